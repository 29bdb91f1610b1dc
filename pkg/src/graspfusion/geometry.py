"""Grasp representations and the camera/robot geometry around them.

Everything here is a pure function over numpy arrays: the angle codec used
by the orientation maps, pinhole deprojection, the hand-eye transform, and
the quaternion construction for approach poses (camera viewpoint or
estimated surface normal).

Conventions fixed once for the whole package:
  * pixel coordinates are (u, v) = (column, row)
  * the in-plane grasp angle phi is measured from the image +x axis and
    wrapped to [-pi/2, pi/2)
  * quaternions are (w, x, y, z), unit norm
  * Euler angles (gamma_x, beta_y, alpha_z) use the intrinsic ZYX
    convention and appear only at I/O boundaries
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field

import numpy as np

HALF_PI = math.pi / 2.0


class DegenerateNormalError(ValueError):
    """Surface-normal estimation had too few / collinear valid points."""


def wrap_half_pi(phi):
    """Wrap an angle to [-pi/2, pi/2). Grasp axes are undirected lines."""
    return (phi + HALF_PI) % math.pi - HALF_PI


def encode_angle(phi):
    """Map a grasp angle to the doubled-angle unit-circle pair (cos 2phi, sin 2phi).

    The doubling removes the pi-ambiguity of the grasp axis, so the encoding
    is continuous across the +-pi/2 wrap point.
    """
    if not np.isfinite(phi):
        raise ValueError(f"angle must be finite, got {phi!r}")
    return math.cos(2.0 * phi), math.sin(2.0 * phi)


def decode_angle(c, s):
    """Invert :func:`encode_angle` up to positive scaling of (c, s).

    Uses the two-argument arctangent, then halves and wraps to [-pi/2, pi/2).
    (0, 0) carries no direction and is rejected.
    """
    if c == 0.0 and s == 0.0:
        raise ValueError("angle is undefined for (c, s) = (0, 0)")
    return wrap_half_pi(0.5 * math.atan2(s, c))


@dataclass
class CameraModel:
    """Pinhole intrinsics. Focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image bounds")

    def scaled(self, new_width, new_height):
        """Intrinsics after resizing the image, half-pixel-center correct."""
        su = new_width / self.width
        sv = new_height / self.height
        return CameraModel(
            fx=self.fx * su,
            fy=self.fy * sv,
            cx=(self.cx + 0.5) * su - 0.5,
            cy=(self.cy + 0.5) * sv - 0.5,
            width=new_width,
            height=new_height,
        )


def deproject(u, v, z, cam: CameraModel):
    """Pixel (u, v) at depth z -> 3D point in the camera frame (meters)."""
    if z <= 0:
        raise ValueError(f"invalid depth {z!r}: deprojection needs z > 0")
    return np.array(
        [(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z], dtype=np.float64
    )


def project(p, cam: CameraModel):
    """Camera-frame point -> (u, v) pixel coordinates. Inverse of deproject."""
    p = np.asarray(p, dtype=np.float64)
    if p[2] <= 0:
        raise ValueError("cannot project a point at non-positive depth")
    return p[0] * cam.fx / p[2] + cam.cx, p[1] * cam.fy / p[2] + cam.cy


def width_px_to_m(width_px, z, cam: CameraModel):
    """Gripper opening in pixels -> meters via the pinhole scale at depth z."""
    if z <= 0:
        raise ValueError(f"invalid depth {z!r}: width conversion needs z > 0")
    if width_px < 0:
        raise ValueError("width must be non-negative")
    return width_px * z / cam.fx


def width_m_to_px(width_m, z, cam: CameraModel):
    """Inverse of :func:`width_px_to_m`."""
    if z <= 0:
        raise ValueError(f"invalid depth {z!r}: width conversion needs z > 0")
    return width_m * cam.fx / z


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z)
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0:
        raise ValueError("cannot normalize a zero quaternion")
    return q / n


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dtype=np.float64,
    )


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]], dtype=np.float64)


def quat_to_matrix(q):
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def quat_rotate(q, p):
    """Rotate a 3-vector by a unit quaternion."""
    return quat_to_matrix(q) @ np.asarray(p, dtype=np.float64)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        raise ValueError("rotation axis must be non-zero")
    half = 0.5 * angle
    return np.concatenate(([math.cos(half)], math.sin(half) * axis / n))


def euler_zyx_to_quat(gamma_x, beta_y, alpha_z):
    """Intrinsic ZYX Euler angles -> quaternion (boundary format only)."""
    qz = quat_from_axis_angle([0, 0, 1], alpha_z)
    qy = quat_from_axis_angle([0, 1, 0], beta_y)
    qx = quat_from_axis_angle([1, 0, 0], gamma_x)
    return quat_mul(quat_mul(qz, qy), qx)


def quat_to_euler_zyx(q):
    """Quaternion -> intrinsic ZYX Euler angles (gamma_x, beta_y, alpha_z)."""
    r = quat_to_matrix(q)
    sy = -r[2, 0]
    cy = math.sqrt(max(0.0, 1.0 - sy * sy))
    if cy > 1e-9:
        beta_y = math.atan2(sy, cy)
        gamma_x = math.atan2(r[2, 1], r[2, 2])
        alpha_z = math.atan2(r[1, 0], r[0, 0])
    else:
        # gimbal lock: put the whole twist into alpha_z
        beta_y = math.atan2(sy, cy)
        gamma_x = 0.0
        alpha_z = math.atan2(-r[0, 1], r[1, 1])
    return gamma_x, beta_y, alpha_z


def shortest_arc_quaternion(n):
    """Quaternion rotating (0, 0, 1) onto the unit vector n by the minimal arc.

    The antipodal case n = (0, 0, -1) is singular (any axis in the xy-plane
    works); the tie is broken as a 180 degree rotation about +x. The scalar
    part is non-negative by construction (canonical sign).
    """
    n = np.asarray(n, dtype=np.float64)
    norm = np.linalg.norm(n)
    if norm == 0:
        raise ValueError("direction must be a non-zero vector")
    if abs(norm - 1.0) > 1e-6:
        raise ValueError(f"direction must be unit length, |n| = {norm:.3e}")
    n = n / norm
    d = n[2]  # dot((0,0,1), n)
    if d < -1.0 + 1e-12:
        return np.array([0.0, 1.0, 0.0, 0.0])
    axis = np.array([-n[1], n[0], 0.0])  # cross((0,0,1), n)
    q = np.concatenate(([1.0 + d], axis))
    return q / np.linalg.norm(q)


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------

@dataclass
class HandEyeTransform:
    """Rigid transform taking camera-frame points into the robot base frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-9:
            raise ValueError("hand-eye rotation must be a unit quaternion")

    def apply(self, p):
        return quat_to_matrix(self.rotation) @ np.asarray(p, dtype=np.float64) + self.translation

    def inverse(self):
        q_inv = quat_conj(self.rotation)
        t_inv = -(quat_to_matrix(q_inv) @ self.translation)
        return HandEyeTransform(rotation=q_inv, translation=t_inv)


def camera_to_robot(p, ext: HandEyeTransform):
    """Camera-frame point -> robot base frame: R p + t."""
    return ext.apply(p)


@dataclass
class GraspPose:
    """Full grasp in the robot base frame.

    position (m), unit orientation quaternion, in-plane rotation phi (rad,
    [-pi/2, pi/2)), gripper opening width (m).
    """

    position: np.ndarray
    orientation: np.ndarray
    phi: float
    width: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.orientation = np.asarray(self.orientation, dtype=np.float64)
        if abs(np.linalg.norm(self.orientation) - 1.0) > 1e-9:
            raise ValueError("orientation must be a unit quaternion")
        if self.width < 0:
            raise ValueError("gripper width must be non-negative")
        if not (-HALF_PI <= self.phi < HALF_PI):
            raise ValueError("phi must lie in [-pi/2, pi/2)")

    @classmethod
    def from_euler(cls, position, gamma_x, beta_y, alpha_z, phi, width):
        return cls(position, euler_zyx_to_quat(gamma_x, beta_y, alpha_z), phi, width)

    def euler(self):
        """(gamma_x, beta_y, alpha_z) boundary representation."""
        return quat_to_euler_zyx(self.orientation)


@dataclass
class ImageGrasp:
    """Image-space grasp: pixel position, angle, width in pixels, quality."""

    u: int
    v: int
    phi_img: float
    width_px: float
    quality: float

    def __post_init__(self):
        if self.width_px < 0:
            raise ValueError("width_px must be non-negative")
        if not (-HALF_PI <= self.phi_img < HALF_PI):
            raise ValueError("phi_img must lie in [-pi/2, pi/2)")


# ---------------------------------------------------------------------------
# surface normals
# ---------------------------------------------------------------------------

def estimate_surface_normal(depth, u, v, cam: CameraModel, validity=None, window=5):
    """Unit surface normal at pixel (u, v) from a local plane fit.

    Deprojects the valid pixels of a window x window patch and fits a plane
    by total least squares (smallest singular vector of the centered point
    cloud). The normal is flipped to face the sensor (n_z < 0 in the camera
    frame). Pixels with non-positive or non-finite depth are ignored, as is
    anything masked out by `validity`.

    Raises DegenerateNormalError when fewer than three non-collinear points
    are available; callers fall back to the viewpoint pose.
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    r = window // 2
    u0, u1 = max(0, u - r), min(w, u + r + 1)
    v0, v1 = max(0, v - r), min(h, v + r + 1)

    pts = []
    for vv in range(v0, v1):
        for uu in range(u0, u1):
            if validity is not None and not validity[vv, uu]:
                continue
            z = depth[vv, uu]
            if not np.isfinite(z) or z <= 0:
                continue
            pts.append(deproject(uu, vv, z, cam))
    if len(pts) < 3:
        raise DegenerateNormalError(
            f"only {len(pts)} valid depth points around ({u}, {v})"
        )

    pts = np.asarray(pts)
    centered = pts - pts.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    # rank < 2 means the points are collinear and the plane is unconstrained
    if s[1] < 1e-9 * max(s[0], 1e-12):
        raise DegenerateNormalError("window points are collinear")
    n = vt[2]
    if n[2] > 0:
        n = -n
    return n / np.linalg.norm(n)


# ---------------------------------------------------------------------------
# config file
# ---------------------------------------------------------------------------

def load_camera_config(path):
    """Read camera intrinsics and hand-eye extrinsics from a key = value file.

    The file uses INI-style [camera] / [hand_eye] sections; a flat file
    without section headers is accepted and treated as one camera section.
    Missing hand-eye keys default to the identity transform.
    """
    parser = configparser.ConfigParser()
    with open(path) as f:
        text = f.read()
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError:
        parser.read_string("[camera]\n" + text)

    section = parser["camera"] if parser.has_section("camera") else parser[parser.sections()[0]]
    cam = CameraModel(
        fx=section.getfloat("fx"),
        fy=section.getfloat("fy"),
        cx=section.getfloat("cx"),
        cy=section.getfloat("cy"),
        width=section.getint("width"),
        height=section.getint("height"),
    )

    if parser.has_section("hand_eye"):
        he = parser["hand_eye"]
        src = he
    else:
        src = section if "qw" in section else None
    if src is not None and "qw" in src:
        rotation = np.array([src.getfloat(k) for k in ("qw", "qx", "qy", "qz")])
        translation = np.array([src.getfloat(k, 0.0) for k in ("tx", "ty", "tz")])
        ext = HandEyeTransform(rotation=quat_normalize(rotation), translation=translation)
    else:
        ext = HandEyeTransform()
    return cam, ext


def save_camera_config(path, cam: CameraModel, ext: HandEyeTransform | None = None):
    """Counterpart of :func:`load_camera_config`, used by the synth CLI."""
    lines = ["[camera]"]
    for k in ("fx", "fy", "cx", "cy"):
        lines.append(f"{k} = {float(getattr(cam, k))!r}")
    lines.append(f"width = {cam.width}")
    lines.append(f"height = {cam.height}")
    if ext is not None:
        lines.append("")
        lines.append("[hand_eye]")
        for k, val in zip(("qw", "qx", "qy", "qz"), ext.rotation):
            lines.append(f"{k} = {float(val)!r}")
        for k, val in zip(("tx", "ty", "tz"), ext.translation):
            lines.append(f"{k} = {float(val)!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
