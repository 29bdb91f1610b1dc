"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Just the operations the grasp network needs: tensor arithmetic with
broadcasting, same-padding stride-1 convolution (shifted-window GEMMs,
channels last), 2x2 max pooling, nearest-neighbor 2x upsampling, channel
concatenation, ReLU/sigmoid, slicing and full reduction. Activations carry
the graph; calling backward() on a scalar loss fills .grad on every
reachable leaf that requires it.

Everything is float64 on purpose: the whole network is verified against
central finite differences, and that check is only meaningful well below
float32 noise.
"""

from __future__ import annotations

import numpy as np

_grad_enabled = True
_decision_log = None


class no_grad:
    """Context manager that skips tape construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class decision_trace:
    """Record the piecewise decisions (ReLU signs, pool argmaxes) of a pass.

    Finite differences are meaningless across a ReLU or max-pool decision
    boundary; the gradient checker compares the traces of the two
    perturbed evaluations and discards probes whose decisions differ.
    """

    def __enter__(self):
        global _decision_log
        self._prev = _decision_log
        _decision_log = []
        return self

    def __exit__(self, *exc):
        global _decision_log
        self.chunks = _decision_log
        _decision_log = self._prev
        return False

    def signature(self):
        return b"".join(self.chunks)


def _log_decision(chunk):
    if _decision_log is not None:
        _decision_log.append(chunk)


def _unbroadcast(grad, shape):
    """Sum a gradient down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad=None):
        """Reverse sweep from this tensor; grad defaults to ones."""
        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @staticmethod
    def _wrap(x):
        return x if isinstance(x, Tensor) else Tensor(x)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = self._wrap(other)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return self._make(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            if self.requires_grad:
                self._accumulate(-g)

        return self._make(-self.data, (self,), backward)

    def __sub__(self, other):
        return self + (-self._wrap(other))

    def __rsub__(self, other):
        return self._wrap(other) + (-self)

    def __mul__(self, other):
        other = self._wrap(other)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return self._make(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def square(self):
        def backward(g):
            if self.requires_grad:
                self._accumulate(g * (2.0 * self.data))

        return self._make(self.data * self.data, (self,), backward)

    def __getitem__(self, key):
        def backward(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                full[key] = g
                self._accumulate(full)

        return self._make(self.data[key], (self,), backward)

    def sum(self):
        def backward(g):
            if self.requires_grad:
                self._accumulate(np.broadcast_to(g, self.shape).astype(np.float64))

        return self._make(self.data.sum(), (self,), backward)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape

        def backward(g):
            if self.requires_grad:
                self._accumulate(g.reshape(old))

        return self._make(self.data.reshape(shape), (self,), backward)

    # -- nonlinearities -------------------------------------------------------

    def relu(self):
        mask = self.data > 0
        _log_decision(np.packbits(mask).tobytes())

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * mask)

        return self._make(self.data * mask, (self,), backward)

    def sigmoid(self):
        x = self.data
        out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * out * (1.0 - out))

        return self._make(out, (self,), backward)


# ---------------------------------------------------------------------------
# spatial operations on (N, H, W, C)
#
# Channels-last keeps every heavy copy nearly contiguous on one CPU core:
# convolution is a sum of nine (NHW, Ci) @ (Ci, Co) GEMMs over shifted
# window views, 1x1 convolutions collapse to a single GEMM on a free
# reshape, and the input gradient is the exact adjoint scatter into the
# padded buffer.
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor):
    """Stride-1 zero-padded convolution (cross-correlation) + bias.

    x: (N, H, W, Ci); weight: (Co, Ci, kh, kw) with odd kh, kw; bias: (Co,).
    Computed as one (NHW, Ci) @ (Ci, Co) GEMM per kernel tap over shifted
    window views; scratch buffers are reused across taps, which is what
    keeps a single-core step affordable.
    """
    n, h, w, ci = x.shape
    co, ci_w, kh, kw = weight.shape
    if ci != ci_w:
        raise ValueError(f"conv input has {ci} channels, kernel expects {ci_w}")
    ph, pw = kh // 2, kw // 2
    # contiguous (kh, kw, Ci, Co) so each tap slice hits the BLAS fast path
    wt = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))
    single_tap = kh == 1 and kw == 1
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else x.data

    if single_tap:
        x2 = np.ascontiguousarray(x.data).reshape(-1, ci)
        out = (x2 @ wt[0, 0] + bias.data).reshape(n, h, w, co)
    else:
        patch = np.empty((n, h, w, ci))
        p2 = patch.reshape(-1, ci)
        tmp = np.empty((n * h * w, co))
        acc = np.empty((n * h * w, co))
        acc[:] = bias.data
        for i in range(kh):
            for j in range(kw):
                patch[...] = xp[:, i : i + h, j : j + w, :]
                np.matmul(p2, wt[i, j], out=tmp)
                acc += tmp
        out = acc.reshape(n, h, w, co)

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(-1, co)
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if single_tap:
            if weight.requires_grad:
                x2 = np.ascontiguousarray(x.data).reshape(-1, ci)
                weight._accumulate((x2.T @ g2).T.reshape(weight.shape))
            if x.requires_grad:
                x._accumulate((g2 @ wt[0, 0].T).reshape(n, h, w, ci))
            return
        patch = np.empty((n, h, w, ci))
        p2 = patch.reshape(-1, ci)
        if weight.requires_grad:
            dw = np.empty_like(weight.data)
            for i in range(kh):
                for j in range(kw):
                    patch[...] = xp[:, i : i + h, j : j + w, :]
                    dw[:, :, i, j] = (p2.T @ g2).T
            weight._accumulate(dw)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            tmp = np.empty((n * h * w, ci))
            for i in range(kh):
                for j in range(kw):
                    np.matmul(g2, wt[i, j].T, out=tmp)
                    dxp[:, i : i + h, j : j + w, :] += tmp.reshape(n, h, w, ci)
            x._accumulate(np.ascontiguousarray(dxp[:, ph : ph + h, pw : pw + w, :]))

    return Tensor._make(out, (x, weight, bias), backward)


def maxpool2(x: Tensor):
    """2x2 max pooling, stride 2. Ties route the gradient to the first entry."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    r = x.data.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    idx = r.argmax(axis=-1)
    _log_decision(idx.astype(np.int8).tobytes())
    out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        if x.requires_grad:
            g6 = np.zeros_like(r)
            np.put_along_axis(g6, idx[..., None], g[..., None], axis=-1)
            gx = g6.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
            x._accumulate(gx)

    return Tensor._make(out, (x,), backward)


def upsample2(x: Tensor):
    """Nearest-neighbor 2x upsampling."""
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)
    n, h, w, c = x.shape

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)))

    return Tensor._make(out, (x,), backward)


def concat(tensors, axis=-1):
    """Concatenate along the channel (last) axis by default."""
    tensors = [Tensor._wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(np.ascontiguousarray(g[tuple(sl)]))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)
