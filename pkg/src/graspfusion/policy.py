"""Open-loop grasp policy: map extraction, pose construction, simulation.

The planner picks the argmax-quality pixel, decodes angle and width there,
and takes the measured depth when the sensor has one; otherwise it falls
back to the auxiliary depth estimate. The pose approaches along the camera
viewpoint axis or along the estimated surface normal, with the in-plane
rotation composed about the approach axis.

The execution oracle is a deterministic antipodal check on the object
mask: the grasp center must lie on the object, the commanded opening must
cover the object's extent along the grasp axis, the fingers (which close
from just outside the commanded width) must start clear of the mask, and
the opening must fit the gripper.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import no_grad
from .data import Observation, Sample, inpaint_depth, prepare_input
from .geometry import (
    DegenerateNormalError,
    GraspPose,
    HandEyeTransform,
    ImageGrasp,
    camera_to_robot,
    decode_angle,
    deproject,
    estimate_surface_normal,
    quat_from_axis_angle,
    quat_mul,
    quat_normalize,
    shortest_arc_quaternion,
    width_m_to_px,
    width_px_to_m,
)
from .labeling import GraspMaps

FINGER_CLEARANCE_PX = 2.0   # fingers approach from this far outside the opening
EXTENT_TOLERANCE_PX = 1.0   # rasterization slack when comparing extents
MIN_PLAN_DEPTH_M = 1e-3     # guard against non-positive aux-depth estimates


@dataclass
class PlannedGrasp:
    """One planned grasp: image-space pick, robot pose, and provenance."""

    image_grasp: ImageGrasp
    robot_pose: GraspPose
    depth_source: str            # "measured" | "estimated"
    orientation_source: str      # "viewpoint" | "normal"
    planning_time: float
    grasp_depth: float           # the z (m) used for deprojection
    fallback_warning: bool = False

    def __post_init__(self):
        if self.planning_time < 0:
            raise ValueError("planning_time must be non-negative")


def extract_grasp(maps: GraspMaps, obs: Observation, depth_est=None):
    """Select the grasp pixel from predicted maps.

    Quality is clamped to [0, 1] before the argmax (the head is linear);
    ties resolve to the first pixel in row-major order. Returns the
    ImageGrasp, the chosen depth z, and whether z was measured or taken
    from the aux estimate (`depth_est`, meters, required when the sensor
    reading at the argmax is invalid).
    """
    for name, plane in (("q", maps.q), ("cos", maps.cos), ("sin", maps.sin), ("width", maps.width)):
        if not np.all(np.isfinite(plane)):
            raise ValueError(f"{name} map contains non-finite values")
    h, w = maps.shape
    q = np.clip(maps.q, 0.0, 1.0)
    flat = int(np.argmax(q))
    v, u = divmod(flat, w)

    phi = decode_angle(float(maps.cos[v, u]), float(maps.sin[v, u]))
    width_px = max(float(maps.width[v, u]) * w, 0.0)
    grasp = ImageGrasp(u=u, v=v, phi_img=phi, width_px=width_px, quality=float(q[v, u]))

    if obs.validity[v, u]:
        return grasp, float(obs.depth[v, u]), "measured"
    if depth_est is None:
        raise ValueError("depth missing at the grasp pixel and no aux estimate given")
    z = max(float(depth_est[v, u]), MIN_PLAN_DEPTH_M)
    return grasp, z, "estimated"


def plan(maps: GraspMaps, obs: Observation, ext: HandEyeTransform,
         mode="viewpoint", depth_est=None, t_received=None):
    """Full pose construction from predicted maps.

    mode "viewpoint": approach along the camera z-axis. mode "normal":
    approach along the (negated, camera-facing) surface normal at the
    grasp pixel, falling back to the viewpoint pose with a warning flag
    when the normal is degenerate. Planning time is wall clock from
    `t_received` (defaults to entry) to return.
    """
    t0 = time.perf_counter() if t_received is None else t_received
    if mode not in ("viewpoint", "normal"):
        raise ValueError(f"unknown planning mode {mode!r}")

    grasp, z, depth_source = extract_grasp(maps, obs, depth_est=depth_est)
    p_cam = deproject(grasp.u, grasp.v, z, obs.camera)

    orientation_source = mode
    fallback = False
    if mode == "normal":
        try:
            n = estimate_surface_normal(obs.depth, grasp.u, grasp.v, obs.camera,
                                        validity=obs.validity)
            q_approach = shortest_arc_quaternion(-n)
        except DegenerateNormalError:
            orientation_source = "viewpoint"
            fallback = True
            q_approach = np.array([1.0, 0.0, 0.0, 0.0])
    else:
        q_approach = np.array([1.0, 0.0, 0.0, 0.0])

    # in-plane rotation about the approach axis, then into the robot frame
    q_cam = quat_mul(q_approach, quat_from_axis_angle([0.0, 0.0, 1.0], grasp.phi_img))
    pose = GraspPose(
        position=camera_to_robot(p_cam, ext),
        orientation=quat_normalize(quat_mul(ext.rotation, q_cam)),
        phi=grasp.phi_img,
        width=width_px_to_m(grasp.width_px, z, obs.camera),
    )
    return PlannedGrasp(
        image_grasp=grasp,
        robot_pose=pose,
        depth_source=depth_source,
        orientation_source=orientation_source,
        planning_time=time.perf_counter() - t0,
        grasp_depth=z,
        fallback_warning=fallback,
    )


def _mask_reach(mask, cu, cv, du, dv, step=0.5):
    """Mask extent along (du, dv) from (cu, cv), boundary-refined.

    Same measurement the labeler uses for chords, so the oracle's extent
    agrees with labeled widths up to sampling resolution.
    """
    h, w = mask.shape
    ts = np.arange(0.0, math.hypot(w, h) + step, step)
    uu = np.rint(cu + ts * du).astype(np.int64)
    vv = np.rint(cv + ts * dv).astype(np.int64)
    ok = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
    inside = np.zeros(len(ts), dtype=bool)
    inside[ok] = mask[vv[ok], uu[ok]]
    if not inside.any():
        return 0.0
    lo = float(ts[np.flatnonzero(inside)[-1]])
    hi = lo + step
    for _ in range(20):
        mid = 0.5 * (lo + hi)
        ui, vi = int(np.rint(cu + mid * du)), int(np.rint(cv + mid * dv))
        if 0 <= ui < w and 0 <= vi < h and mask[vi, ui]:
            lo = mid
        else:
            hi = mid
    return lo


def _fingers_clear(mask, cu, cv, du, dv, half_width, clearance, step=0.5):
    """True when the finger sweep just outside the opening misses the mask."""
    h, w = mask.shape
    for t in np.arange(half_width, half_width + clearance + step / 2, step):
        uu, vv = int(round(cu + t * du)), int(round(cv + t * dv))
        if 0 <= uu < w and 0 <= vv < h and mask[vv, uu]:
            return False
    return True


def simulate_execution(scene: Sample, grasp: PlannedGrasp, gripper_max):
    """Deterministic antipodal success oracle on the scene's object mask.

    Success requires: (a) the grasp center lies on the mask, (b) both
    fingers, closing in from FINGER_CLEARANCE_PX outside the commanded
    opening, start clear of the mask, and (c) the object's extent along
    the grasp axis fits inside the opening, which itself fits inside the
    gripper (gripper_max converted to pixels at the grasp depth).
    """
    mask = np.asarray(scene.mask, dtype=bool)
    ig = grasp.image_grasp
    h, w = mask.shape
    if not (0 <= ig.u < w and 0 <= ig.v < h) or not mask[ig.v, ig.u]:
        return False

    du, dv = math.cos(ig.phi_img), math.sin(ig.phi_img)
    extent = (_mask_reach(mask, ig.u, ig.v, du, dv)
              + _mask_reach(mask, ig.u, ig.v, -du, -dv))
    if extent > ig.width_px + EXTENT_TOLERANCE_PX:
        return False

    gripper_max_px = width_m_to_px(gripper_max, grasp.grasp_depth, scene.observation.camera)
    if ig.width_px > gripper_max_px:
        return False

    half = ig.width_px / 2.0
    return (_fingers_clear(mask, ig.u, ig.v, du, dv, half, FINGER_CLEARANCE_PX)
            and _fingers_clear(mask, ig.u, ig.v, -du, -dv, half, FINGER_CLEARANCE_PX))


class GraspPlanner:
    """Observation-to-grasp pipeline with end-to-end planning-time measurement.

    With a network the pipeline is preprocess -> forward -> extract -> pose;
    without one it plans straight from the sample's ground-truth maps
    (labeler self-consistency runs). Timing starts at raw observation
    receipt, so preprocessing and inference are included.
    """

    def __init__(self, net=None, ext: HandEyeTransform | None = None, mode="viewpoint"):
        self.net = net
        self.ext = ext or HandEyeTransform()
        self.mode = mode

    def plan_sample(self, sample: Sample):
        t0 = time.perf_counter()
        obs = sample.observation
        if self.net is not None:
            ni = prepare_input(obs)
            with no_grad():
                out = self.net.forward_input(ni, mode="main")
            maps, depth_norm = out.numpy_maps()
            depth_est = ni.denormalize_depth(depth_norm)
        else:
            if sample.maps is None:
                raise ValueError("sample has no ground-truth maps to plan from")
            maps = sample.maps
            depth_est = sample.depth_gt
            if depth_est is None:
                depth_est = inpaint_depth(obs.depth, obs.validity)
        return plan(maps, obs, self.ext, mode=self.mode, depth_est=depth_est, t_received=t0)
