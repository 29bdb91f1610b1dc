import numpy as np
import numpy.testing as npt
import pytest

from graspfusion.data import (
    NoiseModel,
    Observation,
    SceneConfig,
    inpaint_depth,
    load_sample,
    normalize_minmax,
    pitch_dropout,
    prepare_input,
    read_grasp_maps,
    read_manifest,
    resize_bilinear,
    resize_nearest,
    resize_observation,
    save_sample_pngs,
    split,
    synth_scene,
    write_grasp_maps,
    write_manifest,
)
from graspfusion.geometry import CameraModel


class TestNormalize:
    def test_constant_buffer(self):
        npt.assert_array_equal(normalize_minmax(np.full((4, 4), 7.0)), np.zeros((4, 4)))

    def test_byte_range(self):
        x = np.arange(256, dtype=np.float64)
        npt.assert_allclose(normalize_minmax(x), x / 255.0)

    def test_simple_values(self):
        npt.assert_allclose(normalize_minmax(np.array([2.0, 4.0, 6.0])), [0.0, 0.5, 1.0])

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(8, 8)) * 10
        once = normalize_minmax(x)
        npt.assert_array_equal(normalize_minmax(once), once)


class TestInpaint:
    def test_fully_valid_unchanged(self):
        d = np.random.default_rng(1).uniform(0.3, 0.8, (10, 10))
        out = inpaint_depth(d, np.ones((10, 10), dtype=bool))
        npt.assert_array_equal(out, d)

    def test_single_hole_diffuses_to_constant(self):
        d = np.full((9, 9), 0.6)
        valid = np.ones((9, 9), dtype=bool)
        d[4, 4] = 0.0
        valid[4, 4] = False
        out = inpaint_depth(d, valid)
        assert abs(out[4, 4] - 0.6) < 1e-5

    def test_valid_pixels_exact(self):
        rng = np.random.default_rng(2)
        d = rng.uniform(0.3, 0.8, (16, 16))
        valid = rng.random((16, 16)) > 0.3
        valid[0, 0] = True
        out = inpaint_depth(np.where(valid, d, 0.0), valid)
        npt.assert_array_equal(out[valid], d[valid])
        assert (out > 0).all()

    def test_large_hole_converges_between_boundaries(self):
        d = np.zeros((12, 12))
        valid = np.zeros((12, 12), dtype=bool)
        d[:, 0] = 0.4
        d[:, -1] = 0.8
        valid[:, 0] = valid[:, -1] = True
        out = inpaint_depth(d, valid)
        assert (out >= 0.4 - 1e-9).all() and (out <= 0.8 + 1e-9).all()
        # interior is monotone between the two Dirichlet walls
        mid = out[6]
        assert (np.diff(mid) > -1e-6).all()

    def test_all_invalid_rejected(self):
        with pytest.raises(ValueError):
            inpaint_depth(np.zeros((4, 4)), np.zeros((4, 4), dtype=bool))


class TestResize:
    def test_identity_is_bit_exact(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(8, 8, 3))
        npt.assert_array_equal(resize_bilinear(x, (8, 8)), x)
        m = rng.random((8, 8)) > 0.5
        npt.assert_array_equal(resize_nearest(m, (8, 8)), m)

    def test_constant_preserved(self):
        x = np.full((16, 16), 3.25)
        npt.assert_allclose(resize_bilinear(x, (8, 8)), np.full((8, 8), 3.25))

    def test_nearest_keeps_binary_values(self):
        rng = np.random.default_rng(4)
        m = rng.random((17, 13)) > 0.5
        out = resize_nearest(m, (40, 40))
        assert out.dtype == bool
        assert set(np.unique(out)) <= {True, False}

    def test_observation_resize_rescales_camera(self):
        s = synth_scene(0, SceneConfig(size=64))
        obs2 = resize_observation(s.observation, 32)
        assert obs2.shape == (32, 32)
        assert obs2.camera.fx == pytest.approx(s.observation.camera.fx / 2)
        assert np.all(obs2.depth[obs2.validity] > 0)


class TestSynthScene:
    def test_deterministic_in_seed(self):
        a = synth_scene(11, SceneConfig(size=48))
        b = synth_scene(11, SceneConfig(size=48))
        npt.assert_array_equal(a.observation.rgb, b.observation.rgb)
        npt.assert_array_equal(a.observation.depth, b.observation.depth)
        npt.assert_array_equal(a.mask, b.mask)
        npt.assert_array_equal(a.maps.q, b.maps.q)

    def test_noise_free_scene_is_two_valued(self):
        cfg = SceneConfig(size=48, sigma_d=0.0, p_miss_range=(0.0, 0.0), rgb_noise=0.0)
        s = synth_scene(5, cfg)
        values = np.unique(s.observation.depth)
        assert len(values) == 2
        assert cfg.table_depth in values

    def test_mask_nonempty_over_many_seeds(self):
        cfg = SceneConfig(size=48)
        for seed in range(0, 1001, 17):
            s = synth_scene(seed, cfg)
            assert s.mask.sum() > 0, f"seed {seed}"

    def test_sample_invariants(self):
        for seed in range(12):
            s = synth_scene(seed, SceneConfig(size=48))
            assert s.observation.rgb.min() >= 0 and s.observation.rgb.max() <= 1
            assert np.all(s.observation.depth[s.observation.validity] > 0)
            s.maps.validate_ground_truth()
            assert s.depth_gt is not None and (s.depth_gt > 0).all()

    def test_pitch_dropout_monotone(self):
        assert pitch_dropout(90.0) == pytest.approx(0.0)
        assert pitch_dropout(45.0) > pitch_dropout(90.0)
        assert pitch_dropout(0.0) > pitch_dropout(45.0)

    def test_oblique_scene_has_more_dropout(self):
        cfg90 = SceneConfig(size=48, p_miss_range=(0.0, 0.0))
        cfg45 = SceneConfig(size=48, p_miss_range=(0.0, 0.0), pitch_deg=45.0)
        invalid90 = np.mean([~synth_scene(s, cfg90).observation.validity
                             for s in range(10)])
        invalid45 = np.mean([~synth_scene(s, cfg45).observation.validity
                             for s in range(10)])
        assert invalid45 > invalid90

    def test_oblique_scene_depth_ramp(self):
        cfg = SceneConfig(size=48, sigma_d=0.0, p_miss_range=(0.0, 0.0), pitch_deg=45.0)
        s = synth_scene(3, cfg)
        table = np.where(s.mask, np.nan, s.observation.depth)
        col = np.nanmean(table, axis=1)
        assert col[-1] > col[0]  # farther rows are deeper


class TestPrepareInput:
    def test_plane_shapes_and_scale(self):
        s = synth_scene(2, SceneConfig(size=48))
        ni = prepare_input(s.observation)
        assert ni.color.shape == (48, 48, 3)
        assert ni.depth.shape == (48, 48, 1)
        assert ni.conf.shape == (48, 48, 2)
        assert 0 <= ni.depth_target.min() and ni.depth_target.max() <= 1
        # denormalization undoes the target normalization
        z = ni.denormalize_depth(ni.depth_target)
        assert abs(z.max() - (ni.depth_min + ni.depth_scale)) < 1e-9

    def test_validity_plane(self):
        s = synth_scene(7, SceneConfig(size=48, p_miss_range=(0.2, 0.2)))
        ni = prepare_input(s.observation)
        npt.assert_array_equal(ni.conf[..., 1] == 1.0, s.observation.validity)
        assert np.all(ni.depth[..., 0][~s.observation.validity] == 0.0)


class TestSplit:
    def test_80_20(self):
        train, eval_ = split(list(range(10)), 0.8, seed=0)
        assert len(train) == 8 and len(eval_) == 2

    def test_deterministic(self):
        a = split(list(range(20)), 0.8, seed=5)
        b = split(list(range(20)), 0.8, seed=5)
        assert a == b

    def test_partition(self):
        items = list(range(17))
        train, eval_ = split(items, 0.7, seed=1)
        assert sorted(train + eval_) == items

    def test_both_sides_nonempty(self):
        train, eval_ = split([1, 2], 0.99, seed=0)
        assert len(train) == 1 and len(eval_) == 1

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            split([1, 2], 1.0)
        with pytest.raises(ValueError):
            split([1], 0.5)


class TestNoiseModel:
    def test_zero_noise_identity(self):
        s = synth_scene(1, SceneConfig(size=32))
        rng = np.random.default_rng(0)
        out = NoiseModel(sigma_d=0.0, p_miss=0.0).apply(s.observation, rng)
        npt.assert_array_equal(out.depth, s.observation.depth)
        npt.assert_array_equal(out.validity, s.observation.validity)

    def test_dropout_reduces_validity(self):
        s = synth_scene(1, SceneConfig(size=32, p_miss_range=(0.0, 0.0)))
        rng = np.random.default_rng(0)
        out = NoiseModel(sigma_d=0.0, p_miss=0.3).apply(s.observation, rng)
        assert out.validity.sum() < s.observation.validity.sum()
        assert np.all(out.depth[~out.validity] == 0.0)


class TestFileFormats:
    def test_gmap_round_trip(self, tmp_path):
        s = synth_scene(4, SceneConfig(size=32))
        path = tmp_path / "sample.gmap"
        write_grasp_maps(path, s.maps)
        maps = read_grasp_maps(path)
        # float32 storage: exact at float32 resolution
        npt.assert_array_equal(maps.q, s.maps.q.astype(np.float32).astype(np.float64))
        npt.assert_array_equal(maps.cos, s.maps.cos.astype(np.float32).astype(np.float64))

    def test_gmap_magic_and_truncation(self, tmp_path):
        s = synth_scene(4, SceneConfig(size=16))
        path = tmp_path / "x.gmap"
        write_grasp_maps(path, s.maps)
        blob = path.read_bytes()
        (tmp_path / "bad.gmap").write_bytes(b"XXXX" + blob[4:])
        with pytest.raises(ValueError):
            read_grasp_maps(tmp_path / "bad.gmap")
        (tmp_path / "short.gmap").write_bytes(blob[:-8])
        with pytest.raises(ValueError):
            read_grasp_maps(tmp_path / "short.gmap")

    def test_png_round_trip(self, tmp_path):
        s = synth_scene(9, SceneConfig(size=32))
        names = save_sample_pngs(tmp_path, "t", s)
        loaded = load_sample(*[tmp_path / n for n in names], camera=s.observation.camera)
        npt.assert_array_equal(loaded.mask, s.mask)
        npt.assert_array_equal(loaded.observation.validity, s.observation.validity)
        # depth quantized to millimeters
        d0 = s.observation.depth[s.observation.validity]
        d1 = loaded.observation.depth[loaded.observation.validity]
        assert np.abs(d0 - d1).max() < 5e-4 + 1e-9

    def test_manifest_round_trip(self, tmp_path):
        write_manifest(tmp_path / "m.tsv", [("a_rgb.png", "a_d.png", "a_m.png")])
        triples = read_manifest(tmp_path / "m.tsv")
        assert len(triples) == 1
        assert triples[0][0] == str(tmp_path / "a_rgb.png")

    def test_manifest_rejects_malformed(self, tmp_path):
        (tmp_path / "bad.tsv").write_text("only_two\tfields\n")
        with pytest.raises(ValueError):
            read_manifest(tmp_path / "bad.tsv")


def test_observation_invariants():
    with pytest.raises(ValueError):
        Observation(
            rgb=np.zeros((4, 4, 3)),
            depth=np.zeros((4, 4)),  # invalid: zero depth marked valid
            validity=np.ones((4, 4), dtype=bool),
            camera=CameraModel(fx=10, fy=10, cx=2, cy=2, width=4, height=4),
        )
