"""Dataset ingestion, preprocessing, and the desk-scale synthetic generator.

Real data arrives as (rgb.png, depth16.png, mask.png) triples listed in a
tab-separated manifest; 16-bit depth is millimeters with 0 meaning missing.
The synthetic generator renders one random primitive on a flat table and is
fully deterministic in its seed, which is what the training and evaluation
acceptance runs are built on.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraModel
from .labeling import GraspMaps, label_ground_truth

GMAP_MAGIC = b"GMAP"


@dataclass
class Observation:
    """Aligned RGB + depth + validity with the camera that produced them."""

    rgb: np.ndarray        # (H, W, 3) float in [0, 1]
    depth: np.ndarray      # (H, W) meters, 0 where invalid
    validity: np.ndarray   # (H, W) bool, True = measured
    camera: CameraModel

    def __post_init__(self):
        h, w = self.depth.shape
        if self.rgb.shape != (h, w, 3) or self.validity.shape != (h, w):
            raise ValueError("observation buffers must share one spatial shape")
        if np.any(self.depth[self.validity] <= 0):
            raise ValueError("measured depth must be strictly positive")

    @property
    def shape(self):
        return self.depth.shape


@dataclass
class Sample:
    """One dataset element: observation, object mask, labels, depth target."""

    observation: Observation
    mask: np.ndarray                    # (H, W) bool
    maps: GraspMaps | None = None
    depth_gt: np.ndarray | None = None  # hole-free depth (m), aux-head target


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def normalize_minmax(buffer):
    """Scale a buffer to [0, 1]; a constant buffer maps to all zeros."""
    buffer = np.asarray(buffer, dtype=np.float64)
    lo = buffer.min()
    hi = buffer.max()
    if hi == lo:
        return np.zeros_like(buffer)
    return (buffer - lo) / (hi - lo)


def inpaint_depth(depth, validity, tol=1e-5):
    """Fill invalid depth pixels by iterated 4-neighbor diffusion.

    Valid pixels are Dirichlet boundary values and are never touched.
    Iteration stops when every pixel is filled and the largest per-pixel
    change drops below `tol` meters, or after 10 * max(H, W) sweeps.
    """
    depth = np.asarray(depth, dtype=np.float64)
    validity = np.asarray(validity, dtype=bool)
    if not validity.any():
        raise ValueError("cannot inpaint: no valid depth pixels")
    if validity.all():
        return depth.copy()

    h, w = depth.shape
    cur = np.where(validity, depth, 0.0)
    has = validity.copy()
    hole = ~validity
    for _ in range(10 * max(h, w)):
        nsum = np.zeros_like(cur)
        ncnt = np.zeros((h, w), dtype=np.float64)
        nsum[1:, :] += cur[:-1, :] * has[:-1, :]
        ncnt[1:, :] += has[:-1, :]
        nsum[:-1, :] += cur[1:, :] * has[1:, :]
        ncnt[:-1, :] += has[1:, :]
        nsum[:, 1:] += cur[:, :-1] * has[:, :-1]
        ncnt[:, 1:] += has[:, :-1]
        nsum[:, :-1] += cur[:, 1:] * has[:, 1:]
        ncnt[:, :-1] += has[:, 1:]

        reachable = hole & (ncnt > 0)
        new = cur.copy()
        new[reachable] = nsum[reachable] / ncnt[reachable]
        delta = np.abs(new - cur)[reachable].max() if reachable.any() else 0.0
        newly = reachable & ~has
        cur = new
        has = has | newly
        if has.all() and delta < tol and not newly.any():
            break
    return cur


def _src_coords(n_dst, n_src):
    # half-pixel-center sampling positions
    return (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5


def resize_bilinear(buffer, target):
    """Bilinear resize of a (H, W) or (H, W, C) float buffer."""
    buffer = np.asarray(buffer, dtype=np.float64)
    h, w = buffer.shape[:2]
    th, tw = target
    if (h, w) == (th, tw):
        return buffer.copy()
    ys = np.clip(_src_coords(th, h), 0, h - 1)
    xs = np.clip(_src_coords(tw, w), 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    if buffer.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    top = buffer[y0][:, x0] * (1 - fx) + buffer[y0][:, x1] * fx
    bot = buffer[y1][:, x0] * (1 - fx) + buffer[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_nearest(buffer, target):
    """Nearest-neighbor resize; the right choice for masks and validity."""
    buffer = np.asarray(buffer)
    h, w = buffer.shape[:2]
    th, tw = target
    if (h, w) == (th, tw):
        return buffer.copy()
    ys = np.clip(np.rint(_src_coords(th, h)).astype(int), 0, h - 1)
    xs = np.clip(np.rint(_src_coords(tw, w)).astype(int), 0, w - 1)
    return buffer[ys][:, xs]


def resize_observation(obs: Observation, target):
    """Resize all observation buffers to target x target, rescaling intrinsics."""
    th = tw = int(target)
    if obs.shape == (th, tw):
        return Observation(obs.rgb.copy(), obs.depth.copy(), obs.validity.copy(), obs.camera)
    validity = resize_nearest(obs.validity, (th, tw))
    depth = resize_bilinear(obs.depth, (th, tw))
    # bilinear blending across hole borders leaks zeros; resample those nearest
    depth_nn = resize_nearest(obs.depth, (th, tw))
    border = validity & (depth <= 0)
    depth = np.where(validity, np.where(border, depth_nn, depth), 0.0)
    return Observation(
        rgb=np.clip(resize_bilinear(obs.rgb, (th, tw)), 0.0, 1.0),
        depth=depth,
        validity=validity,
        camera=obs.camera.scaled(tw, th),
    )


# ---------------------------------------------------------------------------
# network input planes
# ---------------------------------------------------------------------------

@dataclass
class NetInput:
    """Normalized planes the network consumes, plus the depth scale to undo.

    color: (H, W, 3) min-max normalized RGB
    depth: (H, W, 1) raw depth normalized on the inpainted range, 0 in holes
    conf:  (H, W, 2) inpainted normalized depth and the validity plane
    The aux depth target is the normalized inpainted depth (`depth_target`);
    meters = depth_min + value * depth_scale.
    """

    color: np.ndarray
    depth: np.ndarray
    conf: np.ndarray
    depth_target: np.ndarray
    depth_min: float
    depth_scale: float

    def denormalize_depth(self, value):
        return self.depth_min + value * self.depth_scale


def prepare_input(obs: Observation, depth_inpainted=None):
    """Build the network input planes for one observation."""
    dip = inpaint_depth(obs.depth, obs.validity) if depth_inpainted is None else depth_inpainted
    dmin = float(dip.min())
    scale = float(dip.max() - dmin)
    dip_n = (dip - dmin) / scale if scale > 0 else np.zeros_like(dip)
    if scale > 0:
        raw_n = np.where(obs.validity, (obs.depth - dmin) / scale, 0.0)
    else:
        raw_n = np.zeros_like(dip)
    return NetInput(
        color=normalize_minmax(obs.rgb),
        depth=raw_n[..., None],
        conf=np.stack([dip_n, obs.validity.astype(np.float64)], axis=-1),
        depth_target=dip_n,
        depth_min=dmin,
        depth_scale=scale,
    )


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class SceneConfig:
    """Knobs of the synthetic desk generator. Defaults mirror the test rig."""

    size: int = 64
    table_depth: float = 0.55          # camera-to-table distance (m)
    height_range: tuple = (0.02, 0.08)  # object height above the table (m)
    sigma_d: float = 0.002             # depth noise stddev (m)
    p_miss_range: tuple = (0.0, 0.2)   # per-scene dropout rate range
    short_px_range: tuple = (6.0, 14.0)
    aspect_range: tuple = (1.4, 2.6)
    rgb_noise: float = 0.01
    pitch_deg: float = 90.0            # 90 = camera vertical over the table
    focal_per_px: float = 1.8          # fx = focal_per_px * size

    def camera(self):
        c = (self.size - 1) / 2.0
        f = self.focal_per_px * self.size
        return CameraModel(fx=f, fy=f, cx=c, cy=c, width=self.size, height=self.size)


def pitch_dropout(pitch_deg):
    """Extra depth-dropout rate for oblique views; zero for the vertical view."""
    return 0.3 * max(math.cos(math.radians(pitch_deg)), 0.0)


def _shape_mask(rng, cfg: SceneConfig):
    """Rasterize one random primitive (rect, ellipse or L) at a random pose."""
    size = cfg.size
    squash = min(max(math.sin(math.radians(cfg.pitch_deg)), 0.5), 1.0)
    short = rng.uniform(*cfg.short_px_range)
    long = short * rng.uniform(*cfg.aspect_range)
    theta = rng.uniform(-math.pi / 2, math.pi / 2)
    kind = rng.choice(["rect", "ellipse", "lshape"])

    # tiny frames (gradient-check scenes) still need an in-bounds object
    limit = 0.42 * size
    if long > limit:
        short *= limit / long
        long = limit
    short = max(short, 2.5)
    margin = long / 2 + 3
    lo, hi = margin, size - 1 - margin
    if lo >= hi:
        lo = hi = (size - 1) / 2.0
    cu = rng.uniform(lo, hi)
    cv = rng.uniform(lo, hi)

    uu, vv = np.meshgrid(np.arange(size, dtype=float), np.arange(size, dtype=float))
    du = uu - cu
    dv = (vv - cv) / squash  # foreshortening of the oblique view
    x = du * math.cos(theta) + dv * math.sin(theta)
    y = -du * math.sin(theta) + dv * math.cos(theta)

    a, b = long / 2, short / 2
    if kind == "rect":
        mask = (np.abs(x) <= a) & (np.abs(y) <= b)
    elif kind == "ellipse":
        mask = (x / a) ** 2 + (y / b) ** 2 <= 1.0
    else:
        arm = max(short * 0.75, 3.0)
        bar1 = (np.abs(x) <= a) & (np.abs(y) <= b)
        bar2 = (np.abs(x - (a - arm / 2)) <= arm / 2) & (np.abs(y - (b + arm / 2)) <= arm / 2 + b)
        mask = bar1 | bar2
    return mask


def synth_scene(seed, config: SceneConfig | None = None):
    """Render one synthetic desk scene, fully deterministic in the seed.

    Depth is the (possibly tilted) table plane minus the object height
    inside the mask, plus Gaussian noise and validity dropout; RGB is flat
    colors plus noise. Ground-truth maps come straight from the labeler and
    depth_gt is the diffusion-inpainted depth.
    """
    cfg = config or SceneConfig()
    rng = np.random.default_rng(seed)
    size = cfg.size
    cam = cfg.camera()

    mask = _shape_mask(rng, cfg)
    height = rng.uniform(*cfg.height_range)
    p_miss = rng.uniform(*cfg.p_miss_range) + pitch_dropout(cfg.pitch_deg)

    # tilted-table depth ramp; flat when the camera is vertical (pitch 90)
    slope = math.cos(math.radians(cfg.pitch_deg)) * cfg.table_depth / cam.fx
    rows = (np.arange(size, dtype=float) - cam.cy) * slope
    depth = cfg.table_depth + np.tile(rows[:, None], (1, size))
    depth = np.where(mask, depth - height, depth)
    if cfg.sigma_d > 0:
        depth = depth + rng.normal(0.0, cfg.sigma_d, depth.shape)
    depth = np.maximum(depth, 1e-3)

    validity = rng.random(depth.shape) >= min(p_miss, 0.95)
    depth = np.where(validity, depth, 0.0)

    table_color = rng.uniform(0.15, 0.55, 3)
    obj_color = rng.uniform(0.45, 0.95, 3)
    rgb = np.where(mask[..., None], obj_color, table_color)
    if cfg.rgb_noise > 0:
        rgb = rgb + rng.normal(0.0, cfg.rgb_noise, rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0)

    obs = Observation(rgb=rgb, depth=depth, validity=validity, camera=cam)
    maps, _ = label_ground_truth(mask)
    return Sample(
        observation=obs,
        mask=mask,
        maps=maps,
        depth_gt=inpaint_depth(depth, validity),
    )


@dataclass
class NoiseModel:
    """Sensor-noise injection used by the robustness metric."""

    sigma_d: float = 0.002
    p_miss: float = 0.1

    def apply(self, obs: Observation, rng):
        depth = obs.depth.copy()
        validity = obs.validity.copy()
        if self.sigma_d > 0:
            depth[validity] += rng.normal(0.0, self.sigma_d, int(validity.sum()))
            depth[validity] = np.maximum(depth[validity], 1e-3)
        if self.p_miss > 0:
            validity &= rng.random(depth.shape) >= self.p_miss
        if not validity.any():  # keep at least one anchor for inpainting
            validity = obs.validity.copy()
            depth = obs.depth.copy()
        depth = np.where(validity, depth, 0.0)
        return replace(obs, rgb=obs.rgb.copy(), depth=depth, validity=validity)


def split(samples, fraction=0.8, seed=0):
    """Deterministic shuffled train/eval partition; both sides non-empty."""
    if not (0.0 < fraction < 1.0):
        raise ValueError("split fraction must lie in (0, 1)")
    samples = list(samples)
    n = len(samples)
    if n < 2:
        raise ValueError("need at least 2 samples to split")
    order = np.random.default_rng(seed).permutation(n)
    n_train = min(max(int(round(fraction * n)), 1), n - 1)
    train = [samples[i] for i in order[:n_train]]
    rest = [samples[i] for i in order[n_train:]]
    return train, rest


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_grasp_maps(path, maps: GraspMaps):
    """Flat binary map file: GMAP magic, u32 H, u32 W, 4 float32 planes."""
    h, w = maps.shape
    with open(path, "wb") as f:
        f.write(GMAP_MAGIC)
        f.write(struct.pack("<II", h, w))
        for plane in (maps.q, maps.cos, maps.sin, maps.width):
            f.write(plane.astype("<f4").tobytes())


def read_grasp_maps(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != GMAP_MAGIC:
        raise ValueError(f"{path}: not a grasp-map file")
    h, w = struct.unpack("<II", blob[4:12])
    need = 12 + 4 * h * w * 4
    if len(blob) != need:
        raise ValueError(f"{path}: truncated grasp-map file")
    planes = np.frombuffer(blob[12:], dtype="<f4").reshape(4, h, w).astype(np.float64)
    return GraspMaps(q=planes[0], cos=planes[1], sin=planes[2], width=planes[3])


def save_sample_pngs(out_dir, stem, sample: Sample):
    """Write the (rgb, depth16, mask) PNG triple; depth as millimeters."""
    out_dir = Path(out_dir)
    rgb8 = np.clip(np.rint(sample.observation.rgb * 255), 0, 255).astype(np.uint8)
    Image.fromarray(rgb8, mode="RGB").save(out_dir / f"{stem}_rgb.png")
    mm = np.clip(np.rint(sample.observation.depth * 1000.0), 0, 65535).astype(np.uint16)
    mm[~sample.observation.validity] = 0
    Image.fromarray(mm).save(out_dir / f"{stem}_depth16.png")
    m8 = (sample.mask.astype(np.uint8)) * 255
    Image.fromarray(m8, mode="L").save(out_dir / f"{stem}_mask.png")
    return (f"{stem}_rgb.png", f"{stem}_depth16.png", f"{stem}_mask.png")


def load_sample(rgb_path, depth_path, mask_path, camera: CameraModel | None = None):
    """Read one (rgb, depth16, mask) triple back into a Sample (unlabeled)."""
    rgb = np.asarray(Image.open(rgb_path).convert("RGB"), dtype=np.float64) / 255.0
    depth_raw = np.asarray(Image.open(depth_path))
    depth = depth_raw.astype(np.float64) / 1000.0
    validity = depth > 0
    mask = np.asarray(Image.open(mask_path).convert("L")) > 127
    if camera is None:
        h, w = depth.shape
        camera = CameraModel(fx=1.8 * w, fy=1.8 * w, cx=(w - 1) / 2, cy=(h - 1) / 2, width=w, height=h)
    obs = Observation(rgb=rgb, depth=depth, validity=validity, camera=camera)
    return Sample(observation=obs, mask=mask)


def write_manifest(path, triples):
    """One tab-separated (rgb, depth, mask) line per sample."""
    with open(path, "w") as f:
        for rgb, depth, mask in triples:
            f.write(f"{rgb}\t{depth}\t{mask}\n")


def read_manifest(path):
    """Read a manifest; relative entries resolve against the manifest's dir."""
    base = Path(path).parent
    triples = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{ln}: expected 3 tab-separated paths")
            triples.append(tuple(str(base / p) if not Path(p).is_absolute() else p for p in parts))
    return triples
