"""Finite-difference verification of every autodiff operation.

Each op's backward rule is checked against central differences on random
inputs; conv2d's forward is additionally checked against scipy's
correlate2d, which is an independent implementation of the same math.
"""

import numpy as np
import numpy.testing as npt
import pytest
from scipy.signal import correlate2d

from graspfusion.autodiff import Tensor, concat, conv2d, maxpool2, no_grad, upsample2


def numeric_grad(f, arrays, which, h=1e-6):
    """Central-difference gradient of scalar f(*arrays) wrt arrays[which]."""
    a = arrays[which]
    g = np.zeros_like(a)
    flat = a.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(*arrays)
        flat[i] = orig - h
        fm = f(*arrays)
        flat[i] = orig
        g.ravel()[i] = (fp - fm) / (2 * h)
    return g


def check_op(build, arrays, rtol=1e-6, atol=1e-8):
    """build(tensors) -> output tensor; compare backward vs numeric grads."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    seed = np.random.default_rng(0).normal(size=out.shape)
    (out * seed).sum().backward()

    def scalar(*arrs):
        consts = [Tensor(a) for a in arrs]
        return float((build(*consts) * seed).sum().item())

    for k, t in enumerate(tensors):
        gn = numeric_grad(scalar, [a.copy() for a in arrays], k)
        npt.assert_allclose(t.grad, gn, rtol=rtol, atol=atol, err_msg=f"input {k}")


class TestArithmetic:
    def test_add_mul_broadcast(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(2, 3, 3, 4))
        b = rng.normal(size=(2, 3, 3, 1))  # broadcast over channels
        check_op(lambda x, y: x * y + x, [a, b])

    def test_sub_square(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(3, 5))
        b = rng.normal(size=(3, 5))
        check_op(lambda x, y: (x - y).square(), [a, b])

    def test_getitem_and_reshape(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(2, 4, 4, 2))
        check_op(lambda x: x[:, 1:, :, :] - x[:, :-1, :, :], [a])
        check_op(lambda x: x.reshape(2, 32), [a])

    def test_scalar_ops(self):
        a = np.random.default_rng(4).normal(size=(3, 3))
        check_op(lambda x: x * 2.5 + 1.0, [a])
        check_op(lambda x: 1.0 - x, [a])

    def test_gradient_accumulates_on_reuse(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = x * 2.0 + x * 3.0
        y.sum().backward()
        npt.assert_allclose(x.grad, [5.0, 5.0, 5.0])


class TestNonlinearities:
    def test_relu(self):
        # keep values away from the kink so the numeric check is clean
        a = np.random.default_rng(5).normal(size=(2, 4, 4, 3))
        a = np.where(np.abs(a) < 0.1, 0.3, a)
        check_op(lambda x: x.relu(), [a])

    def test_relu_at_zero_uses_zero_subgradient(self):
        x = Tensor(np.zeros(4), requires_grad=True)
        x.relu().sum().backward()
        npt.assert_allclose(x.grad, np.zeros(4))

    def test_sigmoid(self):
        a = np.random.default_rng(6).normal(size=(2, 3, 3, 2)) * 3
        check_op(lambda x: x.sigmoid(), [a])

    def test_sigmoid_extreme_values_stable(self):
        out = Tensor(np.array([-800.0, 800.0])).sigmoid()
        npt.assert_allclose(out.data, [0.0, 1.0], atol=1e-12)


class TestConv:
    def test_forward_matches_scipy(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 6, 5, 3))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        for n in range(2):
            for o in range(4):
                ref = sum(
                    correlate2d(x[n, :, :, c], w[o, c], mode="same", boundary="fill")
                    for c in range(3)
                ) + b[o]
                npt.assert_allclose(out[n, :, :, o], ref, atol=1e-10)

    def test_conv3x3_gradients(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(2, 5, 4, 3))
        w = rng.normal(size=(2, 3, 3, 3))
        b = rng.normal(size=2)
        check_op(lambda a, ww, bb: conv2d(a, ww, bb), [x, w, b])

    def test_conv1x1_gradients(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 4, 4, 5))
        w = rng.normal(size=(3, 5, 1, 1))
        b = rng.normal(size=3)
        check_op(lambda a, ww, bb: conv2d(a, ww, bb), [x, w, b])

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError):
            conv2d(Tensor(np.zeros((1, 4, 4, 3))), Tensor(np.zeros((2, 5, 3, 3))), Tensor(np.zeros(2)))


class TestSpatial:
    def test_maxpool_gradients(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(2, 4, 6, 3))  # continuous values: no ties
        check_op(lambda a: maxpool2(a), [x])

    def test_maxpool_tie_routes_to_first(self):
        x = Tensor(np.ones((1, 2, 2, 1)), requires_grad=True)
        maxpool2(x).sum().backward()
        npt.assert_allclose(x.grad[0, :, :, 0], [[1, 0], [0, 0]])

    def test_maxpool_odd_size_rejected(self):
        with pytest.raises(ValueError):
            maxpool2(Tensor(np.zeros((1, 3, 4, 1))))

    def test_upsample_gradients(self):
        rng = np.random.default_rng(11)
        check_op(lambda a: upsample2(a), [rng.normal(size=(2, 3, 2, 4))])

    def test_upsample_forward(self):
        x = Tensor(np.arange(4.0).reshape(1, 2, 2, 1))
        out = upsample2(x).data[0, :, :, 0]
        npt.assert_allclose(out, [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])

    def test_concat_gradients(self):
        rng = np.random.default_rng(12)
        a = rng.normal(size=(2, 3, 3, 2))
        b = rng.normal(size=(2, 3, 3, 4))
        check_op(lambda x, y: concat([x, y]), [a, b])

    def test_pool_then_upsample_restores_shape(self):
        x = Tensor(np.random.default_rng(13).normal(size=(1, 8, 8, 2)))
        assert upsample2(maxpool2(x)).shape == x.shape


class TestGraph:
    def test_no_grad_skips_tape(self):
        x = Tensor(np.ones((1, 4, 4, 1)), requires_grad=True)
        with no_grad():
            y = x.relu() * 2.0
        assert y._backward is None and not y.requires_grad

    def test_constant_inputs_get_no_grad(self):
        x = Tensor(np.ones(3))
        y = (x * 2.0).sum()
        y.backward()
        assert x.grad is None

    def test_deep_chain_backward_is_iterative(self):
        # a graph deeper than the recursion limit must still backprop
        x = Tensor(np.ones(2), requires_grad=True)
        y = x
        for _ in range(3000):
            y = y + 1.0
        y.sum().backward()
        npt.assert_allclose(x.grad, [1.0, 1.0])
