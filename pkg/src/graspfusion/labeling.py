"""Ground-truth grasp maps from binary object masks.

The labeling rule: the grasp center is the center of the minimum-area
rotated bounding rectangle of the mask (snapped onto the mask), the grasp
axis and opening width come from the shortest boundary-to-boundary chord
through that center, and the positive region is an elliptical window whose
major axis is the chord (semi-axes L/2 and L/4). Inside the window the
quality map is 1 and the angle/width maps carry the chord's doubled-angle
encoding and its normalized length; everything is 0 outside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull

from .geometry import HALF_PI, encode_angle, wrap_half_pi

RAY_STEP_PX = 0.5  # sampling step along chord rays
DEFAULT_ANGLE_STEP = math.pi / 180.0


@dataclass
class RotatedRect:
    """Min-area rectangle: float center (u, v), size (along-angle, across), angle."""

    center: tuple
    size: tuple
    angle: float

    @property
    def area(self):
        return self.size[0] * self.size[1]


@dataclass
class ChordResult:
    """Shortest chord through the grasp center."""

    center: tuple          # (u, v) integer pixel
    theta: float           # direction in [-pi/2, pi/2)
    length: float          # pixels, Euclidean distance between endpoints
    endpoints: tuple       # ((u0, v0), (u1, v1)) floats on the mask boundary


@dataclass
class GraspMaps:
    """Per-pixel grasp fields: quality, cos(2phi), sin(2phi), normalized width.

    Width is normalized by the image width so all four maps share the [0, 1]
    (or [-1, 1]) range the network trains against.
    """

    q: np.ndarray
    cos: np.ndarray
    sin: np.ndarray
    width: np.ndarray

    def __post_init__(self):
        shapes = {m.shape for m in (self.q, self.cos, self.sin, self.width)}
        if len(shapes) != 1:
            raise ValueError(f"grasp maps must share one shape, got {shapes}")

    @property
    def shape(self):
        return self.q.shape

    def validate_ground_truth(self):
        """Assert the invariants that only hold for labeled (not predicted) maps."""
        if self.q.min() < 0 or self.q.max() > 1:
            raise ValueError("ground-truth quality must lie in [0, 1]")
        if np.any(self.cos**2 + self.sin**2 > 1 + 1e-9):
            raise ValueError("angle encoding left the unit disc")
        support = self.q != 0
        for name, m in (("cos", self.cos), ("sin", self.sin), ("width", self.width)):
            if np.any((m != 0) & ~support):
                raise ValueError(f"{name} map is non-zero outside the quality support")

    def copy(self):
        return GraspMaps(self.q.copy(), self.cos.copy(), self.sin.copy(), self.width.copy())


def largest_component(mask):
    """Largest 8-connected component of a boolean mask.

    Ties are broken by the component whose first pixel comes earliest in
    row-major order, so the result is deterministic.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask is empty")
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if n == 1:
        return labels == 1
    sizes = np.bincount(labels.ravel())[1:]
    best_size = sizes.max()
    candidates = np.flatnonzero(sizes == best_size) + 1
    flat = labels.ravel()
    first = [np.argmax(flat == lab) for lab in candidates]
    return labels == candidates[int(np.argmin(first))]


def min_area_rect(mask):
    """Minimum-area rotated rectangle enclosing all true pixels.

    Pixels are treated as unit squares (corners at +-0.5), so a single pixel
    yields a 1x1 rectangle and an axis-aligned WxH block yields exactly WxH.
    Computed by rotating calipers over the convex hull: one side of the
    optimal rectangle is collinear with a hull edge, so it suffices to test
    each unique edge direction modulo pi/2.
    """
    mask = np.asarray(mask, dtype=bool)
    vs, us = np.nonzero(mask)
    if len(us) == 0:
        raise ValueError("mask is empty")

    # corners of every true pixel, deduplicated on the half-integer grid
    offs = np.array([(-0.5, -0.5), (-0.5, 0.5), (0.5, -0.5), (0.5, 0.5)])
    pts = (np.stack([us, vs], axis=1)[:, None, :] + offs[None, :, :]).reshape(-1, 2)
    pts = np.unique((pts * 2).astype(np.int64), axis=0) / 2.0

    if len(pts) > 4:
        try:
            hull = ConvexHull(pts)
            pts = pts[hull.vertices]
        except Exception:
            pass  # degenerate (collinear) input: fall through with raw points

    edges = np.diff(np.vstack([pts, pts[:1]]), axis=0)
    angles = np.mod(np.arctan2(edges[:, 1], edges[:, 0]), HALF_PI)
    angles = np.unique(np.round(angles, 12))

    best = None
    for a in angles:
        ca, sa = math.cos(a), math.sin(a)
        x = pts[:, 0] * ca + pts[:, 1] * sa
        y = -pts[:, 0] * sa + pts[:, 1] * ca
        ex = x.max() - x.min()
        ey = y.max() - y.min()
        if best is None or ex * ey < best[0] - 1e-12:
            xc = 0.5 * (x.max() + x.min())
            yc = 0.5 * (y.max() + y.min())
            center = (xc * ca - yc * sa, xc * sa + yc * ca)
            best = (ex * ey, center, (ex, ey), a)

    _, center, size, angle = best
    return RotatedRect(center=center, size=size, angle=wrap_half_pi(angle))


def snap_to_mask(mask, point):
    """Nearest true pixel to a float (u, v) point, row-major tie-break."""
    vs, us = np.nonzero(mask)
    if len(us) == 0:
        raise ValueError("mask is empty")
    d2 = (us - point[0]) ** 2 + (vs - point[1]) ** 2
    i = int(np.argmin(d2))
    return int(us[i]), int(vs[i])


def _point_inside(mask, cu, cv, du, dv, t):
    h, w = mask.shape
    uu = int(np.rint(cu + t * du))
    vv = int(np.rint(cv + t * dv))
    return 0 <= uu < w and 0 <= vv < h and mask[vv, uu]


def _ray_reach(mask, cu, cv, du, dv):
    """Distance along (du, dv) from (cu, cv) to the mask boundary.

    Samples every 0.5 px to find the farthest in-mask sample, then bisects
    to the true pixel-boundary crossing so chord lengths are not quantized
    to the sampling step (a flat quantized minimum would make the returned
    angle arbitrary within the tie plateau).
    """
    h, w = mask.shape
    t_max = math.hypot(w, h)
    ts = np.arange(0.0, t_max + RAY_STEP_PX, RAY_STEP_PX)
    uu = np.rint(cu + ts * du).astype(np.int64)
    vv = np.rint(cv + ts * dv).astype(np.int64)
    ok = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
    inside = np.zeros(len(ts), dtype=bool)
    inside[ok] = mask[vv[ok], uu[ok]]
    if not inside.any():
        return None
    lo = float(ts[np.flatnonzero(inside)[-1]])
    hi = lo + RAY_STEP_PX
    for _ in range(20):
        mid = 0.5 * (lo + hi)
        if _point_inside(mask, cu, cv, du, dv, mid):
            lo = mid
        else:
            hi = mid
    return lo


def shortest_chord(mask, center, step=DEFAULT_ANGLE_STEP):
    """Shortest boundary-to-boundary chord through `center`.

    Directions theta = -pi/2 + k*step are probed over [-pi/2, pi/2); for
    each, rays are cast from the center at theta and theta + pi in 0.5 px
    steps and the chord spans the farthest in-mask samples of both rays.
    Ties go to the smaller theta, making the search deterministic.
    """
    if step <= 0:
        raise ValueError("angular step must be positive")
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    cu, cv = int(round(center[0])), int(round(center[1]))
    if not (0 <= cu < w and 0 <= cv < h) or not mask[cv, cu]:
        raise ValueError(f"chord center ({cu}, {cv}) is not on the mask")

    n_dirs = int(math.ceil((math.pi - 1e-12) / step))
    best = None
    for k in range(n_dirs):
        theta = -HALF_PI + k * step
        du, dv = math.cos(theta), math.sin(theta)
        t_pos = _ray_reach(mask, cu, cv, du, dv)
        t_neg = _ray_reach(mask, cu, cv, -du, -dv)
        length = t_pos + t_neg
        if best is None or length < best[0] - 1e-12:
            best = (length, theta, t_pos, t_neg)

    length, theta, t_pos, t_neg = best
    du, dv = math.cos(theta), math.sin(theta)
    endpoints = (
        (cu + t_pos * du, cv + t_pos * dv),
        (cu - t_neg * du, cv - t_neg * dv),
    )
    return ChordResult(center=(cu, cv), theta=theta, length=length, endpoints=endpoints)


def rasterize_ellipse(center, theta, a, b, shape):
    """Boolean mask of the rotated ellipse (X/a)^2 + (Y/b)^2 <= 1.

    (X, Y) are pixel-center offsets from `center` rotated by -theta, so the
    semi-major axis a lies along theta. Degenerate axes collapse to a
    segment (b = 0) or the single center pixel (a = b = 0).
    """
    if not (a >= b >= 0):
        raise ValueError(f"ellipse axes must satisfy a >= b >= 0, got a={a}, b={b}")
    h, w = shape
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    du = uu - center[0]
    dv = vv - center[1]
    x = du * math.cos(theta) + dv * math.sin(theta)
    y = -du * math.sin(theta) + dv * math.cos(theta)
    if a == 0:
        return (x == 0) & (y == 0)
    if b == 0:
        return (y == 0) & (np.abs(x) <= a)
    return (x / a) ** 2 + (y / b) ** 2 <= 1.0


def label_ground_truth(mask, step=DEFAULT_ANGLE_STEP):
    """Full labeling pipeline for one object mask.

    Returns the (GraspMaps, ChordResult) pair: quality 1 inside the
    elliptical window around the grasp center, angle maps carrying
    (cos 2theta, sin 2theta) of the chord direction, width map carrying the
    chord length normalized by the image width.
    """
    mask = np.asarray(mask, dtype=bool)
    comp = largest_component(mask)
    rect = min_area_rect(comp)
    center = snap_to_mask(comp, rect.center)
    chord = shortest_chord(comp, center, step=step)
    if chord.length <= 0:
        raise ValueError("degenerate object: shortest chord has zero length")

    h, w = comp.shape
    window = rasterize_ellipse(center, chord.theta, chord.length / 2.0, chord.length / 4.0, (h, w))
    c, s = encode_angle(chord.theta)
    wf = window.astype(np.float64)
    maps = GraspMaps(
        q=wf.copy(),
        cos=wf * c,
        sin=wf * s,
        width=wf * (chord.length / w),
    )
    return maps, chord
