"""Evaluation metrics and the synthetic evaluation protocol.

SR is the plain success percentage; RGR counts only successes whose
selected quality exceeds 0.5 (so RGR <= SR by construction); RGG re-plans
the same scene many times under fresh sensor noise and reports the
variance of the planned grasp parameters; PT summarizes planning time.
The pitch sweep runs the whole protocol at a set of observation pitch
angles, with depth dropout growing as the view gets more oblique.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image, ImageDraw

from .data import NoiseModel, SceneConfig, synth_scene
from .policy import GraspPlanner, PlannedGrasp, simulate_execution


@dataclass
class TrialRecord:
    """One controller run, the unit every metric aggregates over."""

    grasp: PlannedGrasp
    success: bool
    quality: float
    planning_time: float

    def __post_init__(self):
        self.quality = float(min(max(self.quality, 0.0), 1.0))


def metric_sr(trials):
    """Success rate: percentage of successful trials."""
    trials = list(trials)
    if not trials:
        raise ValueError("success rate needs at least one trial")
    return 100.0 * sum(t.success for t in trials) / len(trials)


def metric_rgr(trials):
    """Robust grasp rate: successes with selected quality > 0.5, over all trials."""
    trials = list(trials)
    if not trials:
        raise ValueError("robust grasp rate needs at least one trial")
    return 100.0 * sum(t.success and t.quality > 0.5 for t in trials) / len(trials)


def metric_pt(trials):
    """Planning time (mean, 95th percentile) in seconds."""
    times = [t.planning_time for t in trials]
    if not times:
        raise ValueError("planning time needs at least one trial")
    return float(np.mean(times)), float(np.percentile(times, 95))


def metric_rgg(sample, planner: GraspPlanner, runs=200, noise: NoiseModel | None = None, seed=0):
    """Robust grasp generation: parameter variance under repeated noisy planning.

    The same scene is re-planned `runs` times with freshly sampled sensor
    noise (depth noise + validity dropout); returns population variances of
    u, v and width_px, and the circular variance (1 - R) of the doubled
    angle 2*phi. A deterministic planner under zero noise gives exact zeros.
    """
    if runs < 2:
        raise ValueError("variance needs at least two runs")
    noise = noise or NoiseModel()
    rng = np.random.default_rng(seed)
    us, vs, angles2, widths = [], [], [], []
    for _ in range(runs):
        noisy = replace(sample, observation=noise.apply(sample.observation, rng))
        g = planner.plan_sample(noisy).image_grasp
        us.append(g.u)
        vs.append(g.v)
        angles2.append(2.0 * g.phi_img)
        widths.append(g.width_px)
    r_bar = math.hypot(float(np.mean(np.cos(angles2))), float(np.mean(np.sin(angles2))))
    return {
        "u": float(np.var(us)),
        "v": float(np.var(vs)),
        "phi": 1.0 - min(r_bar, 1.0),
        "width": float(np.var(widths)),
    }


def run_trials(scenes, planner: GraspPlanner, gripper_max=0.1):
    """Plan and simulate every scene, yielding the TrialRecord list."""
    records = []
    for scene in scenes:
        planned = planner.plan_sample(scene)
        records.append(
            TrialRecord(
                grasp=planned,
                success=simulate_execution(scene, planned, gripper_max),
                quality=planned.image_grasp.quality,
                planning_time=planned.planning_time,
            )
        )
    return records


def pitch_sweep(planner: GraspPlanner, angles=(0.0, 22.5, 45.0, 90.0), trials=20,
                base_config: SceneConfig | None = None, seed=1000, gripper_max=0.1,
                rgg_runs=0, noise: NoiseModel | None = None):
    """Run the full metric suite at each observation pitch angle.

    Scenes are rendered with the synthetic generator pitched at each angle
    (dropout grows with obliqueness); one row of SR/RGR/RGG/PT per angle.
    rgg_runs = 0 skips the (expensive) variance metric.
    """
    cfg = base_config or SceneConfig()
    rows = []
    for angle in angles:
        acfg = replace(cfg, pitch_deg=float(angle))
        scenes = [synth_scene(seed + i, acfg) for i in range(trials)]
        recs = run_trials(scenes, planner, gripper_max=gripper_max)
        pt_mean, pt_p95 = metric_pt(recs)
        row = {
            "angle_deg": float(angle),
            "trials": len(recs),
            "sr_pct": metric_sr(recs),
            "rgr_pct": metric_rgr(recs),
            "rgg_u": 0.0,
            "rgg_v": 0.0,
            "rgg_phi": 0.0,
            "rgg_w": 0.0,
            "pt_mean_ms": pt_mean * 1000.0,
            "pt_p95_ms": pt_p95 * 1000.0,
        }
        if rgg_runs >= 2:
            rgg = metric_rgg(scenes[0], planner, runs=rgg_runs, noise=noise, seed=seed)
            row.update(rgg_u=rgg["u"], rgg_v=rgg["v"], rgg_phi=rgg["phi"], rgg_w=rgg["width"])
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# visualization
# ---------------------------------------------------------------------------

_RAMP_STOPS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
_RAMP_R = np.array([0.0, 0.0, 0.0, 1.0, 1.0])
_RAMP_G = np.array([0.0, 0.8, 1.0, 1.0, 0.0])
_RAMP_B = np.array([0.6, 1.0, 0.0, 0.0, 0.0])


def _colorize(values):
    v = values.ravel()
    rgb = np.stack(
        [np.interp(v, _RAMP_STOPS, ch) for ch in (_RAMP_R, _RAMP_G, _RAMP_B)], axis=-1
    )
    return rgb.reshape(*values.shape, 3)


def render_heatmap(map2d, underlay_rgb, path, grasp=None, alpha=0.5):
    """Blend a min-max-normalized map over the RGB underlay and save a PNG.

    The argmax pixel gets a cross marker; when an ImageGrasp is given, its
    grasp line (angle + width) is drawn through that pixel. Output size
    equals the input size.
    """
    map2d = np.asarray(map2d, dtype=np.float64)
    underlay_rgb = np.asarray(underlay_rgb, dtype=np.float64)
    if map2d.shape != underlay_rgb.shape[:2]:
        raise ValueError("heatmap and underlay shapes differ")
    h, w = map2d.shape
    lo, hi = map2d.min(), map2d.max()
    norm = np.zeros_like(map2d) if hi == lo else (map2d - lo) / (hi - lo)
    blend = (1 - alpha) * underlay_rgb + alpha * _colorize(norm)
    img = Image.fromarray(np.clip(np.rint(blend * 255), 0, 255).astype(np.uint8), mode="RGB")

    draw = ImageDraw.Draw(img)
    flat = int(np.argmax(map2d))
    mv, mu = divmod(flat, w)
    if grasp is not None:
        mu, mv = grasp.u, grasp.v
        half = grasp.width_px / 2.0
        du, dv = math.cos(grasp.phi_img), math.sin(grasp.phi_img)
        draw.line(
            [(mu - half * du, mv - half * dv), (mu + half * du, mv + half * dv)],
            fill=(255, 255, 255), width=1,
        )
    r = max(1, min(h, w) // 32)
    draw.line([(mu - r, mv), (mu + r, mv)], fill=(255, 0, 255), width=1)
    draw.line([(mu, mv - r), (mu, mv + r)], fill=(255, 0, 255), width=1)
    img.save(path)
    return path
