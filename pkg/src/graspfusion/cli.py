"""Command-line application tying the library together.

Subcommands: label, synth, pretrain-bem, train, predict, eval, gradcheck,
bench. Exit codes: 0 success, 1 runtime failure, 2 usage error. Every
stochastic component is seeded through --seed, so artifacts (checkpoints,
datasets, reports) are reproducible byte for byte; wall-clock timing
columns are the one exception.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as dataio
from .data import NoiseModel, SceneConfig, load_sample, resize_nearest, resize_observation, synth_scene
from .geometry import HandEyeTransform, load_camera_config, save_camera_config
from .labeling import label_ground_truth
from .metrics import metric_pt, metric_rgg, metric_rgr, metric_sr, pitch_sweep, render_heatmap, run_trials
from .network import NetConfig, build_network, read_checkpoint, save_checkpoint, write_checkpoint
from .policy import GraspPlanner, simulate_execution
from .training import evaluate_losses, gradient_check, prepare_samples, train_stage1, train_stage2

DEFAULT_SIZE = 64  # desk-scale default; the full-scale network uses 336


def log(**kv):
    print(" ".join(f"{k}={v}" for k, v in kv.items()))


def _max_levels(size, cap=4):
    levels = 0
    while levels < cap and size % (2 ** (levels + 1)) == 0 and (size >> (levels + 1)) >= 1:
        levels += 1
    return max(levels, 2)


def _net_config(args):
    levels = getattr(args, "levels", None) or _max_levels(args.size)
    return NetConfig(input_size=args.size, depth_levels=levels,
                     base_channels=args.base, seed=args.seed)


def load_app_config(path):
    """Optional INI config supplying flag defaults (see README)."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(f"config file {path!r} not found")
    out = {}
    for section in parser.sections():
        for key, val in parser[section].items():
            out[f"{section}.{key}"] = val
    return out


def _load_dataset(manifest, size=None, camera=None):
    samples = []
    for rgb, depth, mask in dataio.read_manifest(manifest):
        s = load_sample(rgb, depth, mask, camera=camera)
        if size is not None and s.observation.shape != (size, size):
            s.observation = resize_observation(s.observation, size)
            s.mask = resize_nearest(s.mask, (size, size)).astype(bool)
        samples.append(s)
    if not samples:
        raise ValueError(f"manifest {manifest!r} lists no samples")
    return samples


def _label_samples(samples):
    for s in samples:
        s.maps, _ = label_ground_truth(s.mask)
        s.depth_gt = dataio.inpaint_depth(s.observation.depth, s.observation.validity)
    return samples


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = SceneConfig(size=args.size, pitch_deg=args.pitch)
    triples = []
    for i in range(args.count):
        sample = synth_scene(args.seed + i, cfg)
        triples.append(dataio.save_sample_pngs(out, f"scene_{i:04d}", sample))
    dataio.write_manifest(out / "manifest.tsv", triples)
    save_camera_config(out / "camera.cfg", cfg.camera(), HandEyeTransform())
    log(cmd="synth", count=args.count, seed=args.seed, out=str(out))
    return 0


def cmd_label(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    camera = load_camera_config(args.camera)[0] if args.camera else None
    samples = _load_dataset(args.input, size=args.size, camera=camera)
    if args.overlays:
        (out / "overlays").mkdir(exist_ok=True)
    for (rgb_path, _, _), sample in zip(dataio.read_manifest(args.input), samples):
        stem = Path(rgb_path).stem.replace("_rgb", "")
        maps, chord = label_ground_truth(sample.mask)
        dataio.write_grasp_maps(out / f"{stem}.gmap", maps)
        if args.overlays:
            from .geometry import ImageGrasp

            grasp = ImageGrasp(u=chord.center[0], v=chord.center[1], phi_img=chord.theta,
                               width_px=chord.length, quality=1.0)
            render_heatmap(maps.q, sample.observation.rgb, out / "overlays" / f"{stem}.png", grasp=grasp)
        log(cmd="label", sample=stem, theta=f"{chord.theta:.4f}", width_px=f"{chord.length:.2f}")
    return 0


def _csv_logger(path, fieldnames):
    f = open(path, "w", newline="")
    writer = csv.DictWriter(f, fieldnames=fieldnames)
    writer.writeheader()

    def emit(row):
        writer.writerow({k: row.get(k, "") for k in fieldnames})
        f.flush()

    return emit, f


def cmd_pretrain_bem(args):
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    samples = _label_samples(_load_dataset(args.data, size=args.size))
    net = build_network(_net_config(args))
    emit, f = _csv_logger(out.with_suffix(".losses.csv"),
                          ["epoch", "split", "L_mask", "L_depth", "L_grasp", "L_total"])
    try:
        history = train_stage1(net, samples, epochs=args.epochs, batch_size=args.batch,
                               lr=args.lr, seed=args.seed, log=emit)
    finally:
        f.close()
    write_checkpoint(out, net)
    log(cmd="pretrain-bem", steps=len(history.step_losses),
        final_L_mask=f"{history.final['L_mask']:.6f}", out=str(out))
    return 0


def cmd_train(args):
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    samples = _label_samples(_load_dataset(args.data, size=args.size))
    net = read_checkpoint(args.bem)
    if net.config.input_size != args.size:
        raise ValueError(
            f"BEM checkpoint was built for {net.config.input_size}px, data is {args.size}px"
        )
    train, eval_set = dataio.split(samples, fraction=args.split, seed=args.seed)
    emit, f = _csv_logger(out.with_suffix(".losses.csv"),
                          ["epoch", "split", "L_mask", "L_depth", "L_grasp", "L_total"])
    try:
        history = train_stage2(net, train, epochs=args.epochs, batch_size=args.batch,
                               lr=args.lr, seed=args.seed, eval_samples=eval_set, log=emit)
    finally:
        f.close()
    write_checkpoint(out, net)
    log(cmd="train", steps=len(history.step_losses), train=len(train), eval=len(eval_set),
        final_L_total=f"{history.final['L_total']:.6f}", out=str(out))
    return 0


def cmd_predict(args):
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    net = read_checkpoint(args.checkpoint)
    camera, ext = (load_camera_config(args.camera) if args.camera else (None, HandEyeTransform()))
    samples = _load_dataset(args.input, size=net.config.input_size, camera=camera)
    planner = GraspPlanner(net=net, ext=ext, mode=args.mode)
    with open(out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["u", "v", "phi", "width_m", "quality", "depth_source",
                         "planning_ms", "success"])
        for sample in samples:
            planned = planner.plan_sample(sample)
            success = simulate_execution(sample, planned, args.gripper_max)
            g = planned.image_grasp
            writer.writerow([g.u, g.v, f"{g.phi_img:.6f}", f"{planned.robot_pose.width:.6f}",
                             f"{g.quality:.6f}", planned.depth_source,
                             f"{planned.planning_time * 1000:.3f}", int(success)])
    log(cmd="predict", samples=len(samples), mode=args.mode, out=str(out))
    return 0


def _parse_noise(spec):
    model = NoiseModel()
    if spec:
        for part in spec.split(","):
            key, val = part.split("=")
            key = key.strip()
            if key not in ("sigma_d", "p_miss"):
                raise ValueError(f"unknown noise parameter {key!r}")
            model = replace(model, **{key: float(val)})
    return model


def cmd_eval(args):
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    net = read_checkpoint(args.checkpoint)
    planner = GraspPlanner(net=net, mode=args.mode)
    angles = [float(a) for a in args.pitch.split(",")]
    noise = _parse_noise(args.noise)
    cfg = SceneConfig(size=net.config.input_size)
    rows = pitch_sweep(planner, angles=angles, trials=args.trials, base_config=cfg,
                       seed=args.seed, gripper_max=args.gripper_max,
                       rgg_runs=args.rgg_runs, noise=noise)
    fields = ["angle_deg", "trials", "sr_pct", "rgr_pct", "rgg_u", "rgg_v",
              "rgg_phi", "rgg_w", "pt_mean_ms", "pt_p95_ms"]
    with open(out, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{row[k]:.4f}" if isinstance(row[k], float) else row[k])
                             for k in fields})
    if args.heatmaps:
        hdir = Path(args.heatmaps)
        hdir.mkdir(parents=True, exist_ok=True)
        for angle in angles:
            scene = synth_scene(args.seed, replace(cfg, pitch_deg=angle))
            planned = planner.plan_sample(scene)
            from .autodiff import no_grad
            from .data import prepare_input

            with no_grad():
                maps, _ = net.forward_input(prepare_input(scene.observation)).numpy_maps()
            render_heatmap(maps.q, scene.observation.rgb,
                           hdir / f"quality_pitch{angle:g}.png", grasp=planned.image_grasp)
    ckpt_bytes = len(save_checkpoint(net))
    log(cmd="eval", angles=args.pitch, trials=args.trials, model_bytes=ckpt_bytes, out=str(out))
    return 0


def cmd_gradcheck(args):
    config = _net_config(args)
    net = build_network(config)
    cfg = SceneConfig(size=args.size, p_miss_range=(0.05, 0.15))
    samples = [synth_scene(args.seed + i, cfg) for i in range(args.samples)]
    result = gradient_check(net, samples, per_class=args.per_class, seed=args.seed)
    for group, err in sorted(result.per_group.items()):
        log(cmd="gradcheck", group=group, rel_error=f"{err:.3e}")
    log(cmd="gradcheck", size=args.size, checked=result.checked,
        max_rel_error=f"{result.max_rel_error:.3e}")
    return 0 if result.max_rel_error < 1e-4 else 1


def cmd_bench(args):
    cfg = SceneConfig(size=args.size)
    scenes = [synth_scene(args.seed + i, cfg) for i in range(args.count)]
    net = build_network(_net_config(args))
    planner = GraspPlanner(net=net)

    t0 = time.perf_counter()
    for s in scenes:
        label_ground_truth(s.mask)
    t_label = (time.perf_counter() - t0) / len(scenes)

    inputs = prepare_samples(scenes)
    from .autodiff import no_grad

    t0 = time.perf_counter()
    with no_grad():
        for ni in inputs:
            net.forward_input(ni)
    t_fwd = (time.perf_counter() - t0) / len(scenes)

    t0 = time.perf_counter()
    for s in scenes:
        planner.plan_sample(s)
    t_plan = (time.perf_counter() - t0) / len(scenes)

    print(f"{'stage':<12}{'ms/sample':>12}")
    for name, dt in (("label", t_label), ("forward", t_fwd), ("plan", t_plan)):
        print(f"{name:<12}{dt * 1000:>12.2f}")
    log(cmd="bench", size=args.size, count=args.count, params=net.parameter_count())
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def _add_net_flags(p):
    p.add_argument("--size", type=int, default=DEFAULT_SIZE, help="network input size (px)")
    p.add_argument("--levels", type=int, default=None, help="encoder scales (default: fit size)")
    p.add_argument("--base", type=int, default=16, help="channels at the finest scale")
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="graspfusion",
                                     description="RGB-D grasp labeling, training, planning, evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=DEFAULT_SIZE)
    p.add_argument("--pitch", type=float, default=90.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("label", help="label ground-truth maps from a manifest")
    p.add_argument("--input", required=True, help="manifest of rgb/depth/mask triples")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=None, help="resize before labeling")
    p.add_argument("--camera", default=None, help="camera config file")
    p.add_argument("--overlays", action="store_true", help="write overlay images under --out")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("pretrain-bem", help="stage 1: pretrain the background extraction module")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_net_flags(p)
    p.set_defaults(func=cmd_pretrain_bem)

    p = sub.add_parser("train", help="stage 2: train the full network from a BEM checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--bem", required=True, help="stage-1 checkpoint")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--split", type=float, default=0.8)
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_net_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="plan grasps for a manifest and score them")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--mode", choices=("viewpoint", "normal"), default="viewpoint")
    p.add_argument("--camera", default=None)
    p.add_argument("--gripper-max", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="synthetic pitch-sweep evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--pitch", default="0,22.5,45,90")
    p.add_argument("--noise", default="sigma_d=0.002,p_miss=0.1")
    p.add_argument("--mode", choices=("viewpoint", "normal"), default="viewpoint")
    p.add_argument("--gripper-max", type=float, default=0.1)
    p.add_argument("--rgg-runs", type=int, default=0)
    p.add_argument("--seed", type=int, default=1000)
    p.add_argument("--heatmaps", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training graph")
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--per-class", type=int, default=64)
    _add_net_flags(p)
    p.set_defaults(func=cmd_gradcheck)
    p.set_defaults(size=8, base=4)

    p = sub.add_parser("bench", help="time labeler, forward pass, and planning")
    p.add_argument("--count", type=int, default=4)
    _add_net_flags(p)
    p.set_defaults(func=cmd_bench)

    return parser


def run(argv):
    """Dispatch a CLI invocation; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
