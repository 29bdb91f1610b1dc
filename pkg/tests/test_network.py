import numpy as np
import numpy.testing as npt
import pytest

from graspfusion.autodiff import Tensor, no_grad
from graspfusion.data import SceneConfig, prepare_input, synth_scene
from graspfusion.network import (
    CheckpointError,
    NetConfig,
    build_network,
    fuse,
    load_checkpoint,
    save_checkpoint,
)

CFG = NetConfig(input_size=16, depth_levels=4, base_channels=4, seed=0)


def _planes(seed=0, size=16):
    s = synth_scene(seed, SceneConfig(size=size))
    ni = prepare_input(s.observation)
    return ni.color, ni.depth, ni.conf


class TestBuild:
    def test_deterministic(self):
        a = build_network(CFG)
        b = build_network(CFG)
        for k in a.params:
            npt.assert_array_equal(a.params[k].data, b.params[k].data)

    def test_seed_changes_weights(self):
        a = build_network(CFG)
        b = build_network(NetConfig(input_size=16, depth_levels=4, base_channels=4, seed=1))
        assert any(not np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)

    def test_divisibility_rule(self):
        NetConfig(input_size=64, depth_levels=4, base_channels=4)
        with pytest.raises(ValueError):
            NetConfig(input_size=60, depth_levels=4, base_channels=4)

    def test_biases_start_at_zero(self):
        net = build_network(CFG)
        for k, p in net.params.items():
            if k.endswith(".b"):
                npt.assert_array_equal(p.data, np.zeros_like(p.data))

    def test_every_group_present(self):
        net = build_network(CFG)
        groups = {p.group for p in net.params.values()}
        assert groups == {"color_branch", "depth_branch", "confinet", "bem", "heads"}

    def test_confinet_is_five_convs(self):
        net = build_network(CFG)
        conf_layers = {k.rsplit(".", 1)[0] for k in net.params if k.startswith("conf.")}
        assert len(conf_layers) == 5

    def test_parameter_count_reported(self):
        assert build_network(CFG).parameter_count() > 0


class TestFuse:
    def test_zero_confidence_zeroes_depth_block(self):
        rng = np.random.default_rng(0)
        fc = rng.normal(size=(1, 4, 4, 3))
        fd = rng.normal(size=(1, 4, 4, 5))
        out = fuse(fc, fd, np.zeros((1, 4, 4, 1))).data
        npt.assert_array_equal(out[..., :3], fc)
        npt.assert_array_equal(out[..., 3:], np.zeros_like(fd))

    def test_unit_confidence_is_plain_concat(self):
        rng = np.random.default_rng(1)
        fc = rng.normal(size=(2, 4, 4, 8))
        fd = rng.normal(size=(2, 4, 4, 8))
        out = fuse(fc, fd, np.ones((2, 4, 4, 1))).data
        npt.assert_array_equal(out, np.concatenate([fc, fd], axis=-1))

    def test_channel_sum(self):
        fc = np.zeros((1, 4, 4, 8))
        fd = np.zeros((1, 4, 4, 8))
        assert fuse(fc, fd, np.zeros((1, 4, 4, 1))).shape == (1, 4, 4, 16)

    def test_linear_in_depth_features(self):
        rng = np.random.default_rng(2)
        fc = rng.normal(size=(1, 4, 4, 3))
        fd = rng.normal(size=(1, 4, 4, 3))
        c = rng.uniform(0, 1, size=(1, 4, 4, 1))
        a = fuse(fc, fd * 2.5, c).data
        b = fuse(fc, fd, c).data
        npt.assert_allclose(a[..., 3:], 2.5 * b[..., 3:])
        npt.assert_array_equal(a[..., :3], b[..., :3])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            fuse(np.zeros((1, 4, 4, 3)), np.zeros((1, 8, 8, 3)), np.zeros((1, 4, 4, 1)))
        with pytest.raises(ValueError):
            fuse(np.zeros((1, 4, 4, 3)), np.zeros((1, 4, 4, 3)), np.zeros((1, 4, 4, 2)))


class TestForward:
    def test_main_mode_output_shapes(self):
        net = build_network(CFG)
        color, depth, conf = _planes()
        out = net.forward(color, depth, conf)
        for plane in (out.q, out.cos, out.sin, out.width, out.depth_est):
            assert plane.shape == (1, 16, 16, 1)
        assert out.mask_est is None
        assert len(out.confidences) == 4
        for l, c in enumerate(out.confidences):
            assert c.shape == (1, 16 >> l, 16 >> l, 1)
            assert c.data.min() >= 0.0 and c.data.max() <= 1.0

    def test_bem_mode_emits_mask_only(self):
        net = build_network(CFG)
        color, depth, _ = _planes()
        out = net.forward(color, depth, mode="bem_pretrain")
        assert out.mask_est.shape == (1, 16, 16, 1)
        assert out.q is None

    def test_deterministic_forward(self):
        net = build_network(CFG)
        color, depth, conf = _planes()
        with no_grad():
            a = net.forward(color, depth, conf)
            b = net.forward(color, depth, conf)
        npt.assert_array_equal(a.q.data, b.q.data)

    def test_zero_head_weights_give_zero_maps(self):
        net = build_network(CFG)
        for name in ("q", "cos", "sin", "w", "depth"):
            net.params[f"head.{name}.w"].data[:] = 0.0
            net.params[f"head.{name}.b"].data[:] = 0.0
        color, depth, conf = _planes()
        out = net.forward(color, depth, conf)
        npt.assert_array_equal(out.q.data, np.zeros_like(out.q.data))
        npt.assert_array_equal(out.depth_est.data, np.zeros_like(out.depth_est.data))

    def test_zero_input_zero_bias_confidence_is_half(self):
        net = build_network(CFG)
        zeros3 = np.zeros((1, 16, 16, 3))
        zeros1 = np.zeros((1, 16, 16, 1))
        zeros2 = np.zeros((1, 16, 16, 2))
        out = net.forward(zeros3, zeros1, zeros2)
        for c in out.confidences:
            npt.assert_allclose(c.data, 0.5)

    def test_shape_mismatch_rejected(self):
        net = build_network(CFG)
        color, depth, conf = _planes()
        with pytest.raises(ValueError):
            net.forward(color[:, :8], depth[:8], conf)
        with pytest.raises(ValueError):
            net.forward(color, depth)  # main mode needs conf
        with pytest.raises(ValueError):
            net.forward(color, depth, conf, mode="bogus")

    def test_batched_forward_matches_single(self):
        net = build_network(CFG)
        p0 = _planes(0)
        p1 = _planes(1)
        batch = [np.stack([a, b]) for a, b in zip(p0, p1)]
        with no_grad():
            both = net.forward(*batch)
            one = net.forward(*p0)
        npt.assert_allclose(both.q.data[0], one.q.data[0], atol=1e-12)


class TestFreezing:
    def test_stage1_freezes_everything_but_bem(self):
        net = build_network(CFG)
        net.freeze_for_bem_pretrain()
        for p in net.params.values():
            assert p.trainable == (p.group == "bem")

    def test_stage2_keeps_last_bem_decoder_trainable(self):
        net = build_network(CFG)
        net.freeze_for_main_training()
        assert net.params["bem.dec2.w"].trainable
        assert not net.params["bem.dec1.w"].trainable
        assert not net.params["bem.enc_rgb0.w"].trainable
        assert not net.params["bem.mask_out.w"].trainable
        assert net.params["head.q.w"].trainable
        assert net.params["color.enc0.w"].trainable

    def test_frozen_params_get_no_gradient(self):
        net = build_network(CFG)
        net.freeze_for_main_training()
        color, depth, conf = _planes()
        out = net.forward(color, depth, conf)
        out.q.sum().backward()
        assert net.params["bem.enc_rgb0.w"].grad is None
        assert net.params["head.q.w"].grad is not None


class TestCheckpoint:
    def test_round_trip_bitwise(self):
        net = build_network(CFG)
        net.freeze_for_main_training()
        blob = save_checkpoint(net)
        net2 = load_checkpoint(blob)
        assert net2.config == net.config
        for k in net.params:
            npt.assert_array_equal(net2.params[k].data, net.params[k].data)
            assert net2.params[k].trainable == net.params[k].trainable
        assert save_checkpoint(net2) == blob

    def test_truncated_rejected(self):
        blob = save_checkpoint(build_network(CFG))
        with pytest.raises(CheckpointError):
            load_checkpoint(blob[:-10])

    def test_bad_magic_rejected(self):
        blob = save_checkpoint(build_network(CFG))
        with pytest.raises(CheckpointError):
            load_checkpoint(b"NOPE" + blob[4:])

    def test_trailing_garbage_rejected(self):
        blob = save_checkpoint(build_network(CFG))
        with pytest.raises(CheckpointError):
            load_checkpoint(blob + b"\x00")

    def test_config_mismatch_rejected(self):
        blob = save_checkpoint(build_network(CFG))
        other = NetConfig(input_size=32, depth_levels=4, base_channels=4, seed=0)
        with pytest.raises(CheckpointError):
            load_checkpoint(blob, expect_config=other)


def test_state_signature_detects_any_change():
    net = build_network(CFG)
    sig = net.state_signature()
    net.params["color.enc0.w"].data[0, 0, 0, 0] += 1e-12
    assert net.state_signature() != sig
