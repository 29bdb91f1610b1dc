"""Losses, the Adam optimizer, two-stage training, and gradient checking.

Training runs in two stages. Stage 1 pretrains the background extraction
module alone against object masks (plain MSE). Stage 2 trains the full
network on the grasp + aux-depth objective with the BEM frozen except for
its last decoder conv. Both stages are deterministic given their seed,
which is what the reproducibility acceptance leans on.

Losses return 0-d autodiff tensors: call .item() for the number, call
.backward() to fill parameter gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, decision_trace, no_grad
from .data import Sample, prepare_input
from .labeling import GraspMaps
from .network import PARAM_GROUPS, GraspNetwork, NetOutputs


@dataclass
class LossWeights:
    lambda_d: float = 1.0
    lambda_q: float = 1.0
    lambda_cos: float = 1.0
    lambda_sin: float = 1.0
    lambda_w: float = 1.0

    def __post_init__(self):
        for name in ("lambda_d", "lambda_q", "lambda_cos", "lambda_sin", "lambda_w"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _as_maps(x):
    """Coerce (H,W) / (N,H,W) / (N,H,W,1) inputs to a (N,H,W,1) tensor."""
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if t.data.ndim == 2:
        return t.reshape(1, *t.shape, 1)
    if t.data.ndim == 3:
        return t.reshape(*t.shape, 1)
    if t.data.ndim == 4:
        return t
    raise ValueError(f"expected a 2-4d map, got shape {t.shape}")


def _const_like(x, t):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, ..., None]
    elif arr.ndim == 3:
        arr = arr[..., None]
    if arr.shape != t.shape:
        raise ValueError(f"shape mismatch: prediction {t.shape}, target {arr.shape}")
    return arr


def loss_mask(pred, gt):
    """Mean squared error over all pixels (and batch)."""
    p = _as_maps(pred)
    g = _const_like(gt, p)
    return (p - g).square().sum() * (1.0 / p.size)


def loss_depth(pred, gt, valid=None, weights: LossWeights | None = None):
    """Depth loss: masked MSE plus first-order (forward-difference) matching.

    d = pred - gt. Both terms are normalized by the per-sample count of
    valid pixels; a finite difference contributes only when both of its
    pixels are valid, and boundary pixels contribute none.
    """
    w = weights or LossWeights()
    p = _as_maps(pred)
    g = _const_like(gt, p)
    n_batch = p.shape[0]
    if valid is None:
        vm = np.ones_like(g)
    else:
        vm = _const_like(np.asarray(valid, dtype=np.float64), p)
    counts = vm.sum(axis=(1, 2, 3))
    if np.any(counts == 0):
        raise ValueError("depth loss needs at least one valid pixel per sample")
    inv = (w.lambda_d / counts / n_batch)[:, None, None, None]

    d = p - g
    total = (d.square() * (vm * inv)).sum()
    dx = d[:, :, 1:, :] - d[:, :, :-1, :]          # columns: the image x axis
    wx = vm[:, :, 1:, :] * vm[:, :, :-1, :]
    total = total + (dx.square() * (wx * inv)).sum()
    dy = d[:, 1:, :, :] - d[:, :-1, :, :]          # rows: the image y axis
    wy = vm[:, 1:, :, :] * vm[:, :-1, :, :]
    return total + (dy.square() * (wy * inv)).sum()


def _stack_maps(maps):
    """List of GraspMaps -> dict of (N,H,W) target arrays."""
    if isinstance(maps, GraspMaps):
        maps = [maps]
    return {
        "q": np.stack([m.q for m in maps]),
        "cos": np.stack([m.cos for m in maps]),
        "sin": np.stack([m.sin for m in maps]),
        "width": np.stack([m.width for m in maps]),
    }


def loss_grasp(pred, gt, weights: LossWeights | None = None):
    """Weighted sum of the four per-map mean squared errors.

    `pred` is either a GraspMaps of arrays or the NetOutputs of a forward
    pass; `gt` is a GraspMaps or a list of them (one per batch element).
    """
    w = weights or LossWeights()
    targets = _stack_maps(gt)
    planes = {"q": pred.q, "cos": pred.cos, "sin": pred.sin, "width": pred.width}
    lambdas = {"q": w.lambda_q, "cos": w.lambda_cos, "sin": w.lambda_sin, "width": w.lambda_w}
    total = None
    for key, lam in lambdas.items():
        p = _as_maps(planes[key])
        g = _const_like(targets[key], p)
        term = (p - g).square().sum() * (lam / p.size)
        total = term if total is None else total + term
    return total


def loss_total(outputs: NetOutputs, samples, net_inputs, weights: LossWeights | None = None):
    """Combined objective: depth matching + grasp-map regression.

    The aux-depth target is the normalized inpainted depth, which is
    defined at every pixel, so the depth term runs over the full image
    (real data with an untrusted fill would pass an explicit mask instead).
    """
    w = weights or LossWeights()
    if isinstance(samples, Sample):
        samples = [samples]
        net_inputs = [net_inputs]
    depth_gt = np.stack([ni.depth_target for ni in net_inputs])
    ld = loss_depth(outputs.depth_est, depth_gt, valid=None, weights=w)
    lg = loss_grasp(outputs, [s.maps for s in samples], weights=w)
    return ld + lg


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Standard Adam with bias correction over the trainable parameters."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            if not p.requires_grad:
                continue
            if p.grad is None:
                raise ValueError(f"trainable parameter {p.name!r} has no gradient")
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1**self.t)
            v_hat = self.v[i] / (1 - self.beta2**self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# training stages
# ---------------------------------------------------------------------------

@dataclass
class TrainHistory:
    step_losses: list = field(default_factory=list)   # one dict per optimizer step
    epoch_rows: list = field(default_factory=list)    # one dict per epoch (means)

    @property
    def initial(self):
        return self.step_losses[0]

    @property
    def final(self):
        return self.step_losses[-1]


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def prepare_samples(samples):
    """Precompute the network input planes once per sample."""
    return [prepare_input(s.observation) for s in samples]


def _stack_planes(net_inputs, idx):
    color = np.stack([net_inputs[i].color for i in idx])
    depth = np.stack([net_inputs[i].depth for i in idx])
    conf = np.stack([net_inputs[i].conf for i in idx])
    return color, depth, conf


def train_stage1(net: GraspNetwork, samples, epochs=20, batch_size=4, lr=1e-3,
                 seed=0, max_steps=None, net_inputs=None, log=None):
    """Pretrain the background extraction module on (observation, mask) pairs."""
    if not samples:
        raise ValueError("stage-1 training needs a non-empty dataset")
    net.freeze_for_bem_pretrain()
    opt = Adam(list(net.parameters(only_trainable=True)), lr=lr)
    inputs = net_inputs or prepare_samples(samples)
    targets = [s.mask.astype(np.float64) for s in samples]
    rng = np.random.default_rng(seed)
    history = TrainHistory()
    step = 0

    for epoch in range(epochs):
        epoch_losses = []
        for idx in _batches(len(samples), batch_size, rng):
            if max_steps is not None and step >= max_steps:
                break
            color, depth, _ = _stack_planes(inputs, idx)
            out = net.forward(color, depth, mode="bem_pretrain")
            gt = np.stack([targets[i] for i in idx])
            loss = loss_mask(out.mask_est, gt)
            net.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            val = loss.item()
            epoch_losses.append(val)
            history.step_losses.append({"step": step, "epoch": epoch, "L_mask": val})
        if epoch_losses:
            row = {"epoch": epoch, "split": "train", "L_mask": float(np.mean(epoch_losses))}
            history.epoch_rows.append(row)
            if log:
                log(row)
        if max_steps is not None and step >= max_steps:
            break
    return history


def train_stage2(net: GraspNetwork, samples, epochs=20, batch_size=4, lr=1e-3,
                 seed=0, max_steps=None, weights=None, net_inputs=None,
                 eval_samples=None, log=None):
    """Train the full network with the BEM frozen except its last decoder."""
    if not samples:
        raise ValueError("stage-2 training needs a non-empty dataset")
    for s in samples:
        if s.maps is None:
            raise ValueError("stage-2 samples must carry ground-truth grasp maps")
    w = weights or LossWeights()
    net.freeze_for_main_training()
    opt = Adam(list(net.parameters(only_trainable=True)), lr=lr)
    inputs = net_inputs or prepare_samples(samples)
    rng = np.random.default_rng(seed)
    history = TrainHistory()
    step = 0

    for epoch in range(epochs):
        rows = []
        for idx in _batches(len(samples), batch_size, rng):
            if max_steps is not None and step >= max_steps:
                break
            color, depth, conf = _stack_planes(inputs, idx)
            out = net.forward(color, depth, conf, mode="main")
            batch = [samples[i] for i in idx]
            batch_in = [inputs[i] for i in idx]
            ld = loss_depth(out.depth_est, np.stack([bi.depth_target for bi in batch_in]), weights=w)
            lg = loss_grasp(out, [s.maps for s in batch], weights=w)
            loss = ld + lg
            net.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            rows.append({"step": step, "epoch": epoch, "L_depth": ld.item(),
                         "L_grasp": lg.item(), "L_total": loss.item()})
            history.step_losses.append(rows[-1])
        if rows:
            row = {"epoch": epoch, "split": "train"}
            for key in ("L_depth", "L_grasp", "L_total"):
                row[key] = float(np.mean([r[key] for r in rows]))
            history.epoch_rows.append(row)
            if log:
                log(row)
        if eval_samples:
            row = evaluate_losses(net, eval_samples, weights=w)
            row.update(epoch=epoch, split="eval")
            history.epoch_rows.append(row)
            if log:
                log(row)
        if max_steps is not None and step >= max_steps:
            break
    return history


def evaluate_losses(net: GraspNetwork, samples, weights=None, net_inputs=None, batch_size=4):
    """Mean stage-2 losses over a sample set, without touching gradients."""
    w = weights or LossWeights()
    inputs = net_inputs or prepare_samples(samples)
    sums = {"L_depth": 0.0, "L_grasp": 0.0, "L_total": 0.0}
    with no_grad():
        for i in range(0, len(samples), batch_size):
            idx = range(i, min(i + batch_size, len(samples)))
            color, depth, conf = _stack_planes(inputs, idx)
            out = net.forward(color, depth, conf, mode="main")
            batch_in = [inputs[j] for j in idx]
            ld = loss_depth(out.depth_est, np.stack([bi.depth_target for bi in batch_in]), weights=w).item()
            lg = loss_grasp(out, [samples[j].maps for j in idx], weights=w).item()
            k = len(batch_in)
            sums["L_depth"] += ld * k
            sums["L_grasp"] += lg * k
            sums["L_total"] += (ld + lg) * k
    return {key: val / len(samples) for key, val in sums.items()}


def evaluate_mask_loss(net: GraspNetwork, samples, net_inputs=None, batch_size=4):
    """Mean stage-1 mask loss over a sample set."""
    inputs = net_inputs or prepare_samples(samples)
    total = 0.0
    with no_grad():
        for i in range(0, len(samples), batch_size):
            idx = range(i, min(i + batch_size, len(samples)))
            color, depth, _ = _stack_planes(inputs, idx)
            out = net.forward(color, depth, mode="bem_pretrain")
            gt = np.stack([samples[j].mask.astype(np.float64) for j in idx])
            total += loss_mask(out.mask_est, gt).item() * len(list(idx))
    return total / len(samples)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    per_group: dict
    checked: int
    kink_skips: int = 0


def analytic_gradients(net: GraspNetwork, loss_fn):
    """Backprop gradients of loss_fn() for every parameter of the network."""
    net.zero_grad()
    was = {k: p.requires_grad for k, p in net.params.items()}
    for p in net.params.values():
        p.requires_grad = True
    loss = loss_fn()
    loss.backward()
    grads = {k: p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
             for k, p in net.params.items()}
    for k, p in net.params.items():
        p.requires_grad = was[k]
    net.zero_grad()
    return grads


def sample_entries(net: GraspNetwork, per_class=64, seed=0):
    """Pick up to per_class (param, flat index) probes for each layer group."""
    rng = np.random.default_rng(seed)
    entries = []
    for group in PARAM_GROUPS:
        pool = [(k, i) for k, p in sorted(net.params.items()) if p.group == group
                for i in range(p.size)]
        take = min(per_class, len(pool))
        chosen = rng.choice(len(pool), size=take, replace=False)
        entries.extend(pool[int(c)] for c in chosen)
    return entries


def central_difference(net: GraspNetwork, loss_fn, name, idx, h=1e-3):
    """Two-sided difference for one parameter entry.

    Returns (estimate, crossed): `crossed` is true when the two perturbed
    evaluations took different ReLU / max-pool branches, in which case the
    loss is not differentiable on the probed segment and the estimate says
    nothing about the analytic gradient.
    """
    p = net.params[name]
    orig = p.data.flat[idx]
    with no_grad():
        with decision_trace() as plus:
            p.data.flat[idx] = orig + h
            f_plus = loss_fn().item()
        with decision_trace() as minus:
            p.data.flat[idx] = orig - h
            f_minus = loss_fn().item()
    p.data.flat[idx] = orig
    crossed = plus.signature() != minus.signature()
    return (f_plus - f_minus) / (2 * h), crossed


def _rel_error(ga, gn):
    return abs(ga - gn) / max(abs(ga), abs(gn), 1e-8)


def compare_with_central_differences(net: GraspNetwork, loss_fn, grads, entries, h=1e-3):
    """Max relative error between given gradients and central differences.

    No kink filtering here: this is the raw comparison the mutation
    self-test uses (a corrupted gradient must be flagged on any probe).
    """
    per_group = {g: 0.0 for g in PARAM_GROUPS}
    worst = 0.0
    for name, idx in entries:
        gn, _ = central_difference(net, loss_fn, name, idx, h)
        rel = _rel_error(grads[name].flat[idx], gn)
        group = net.params[name].group
        per_group[group] = max(per_group[group], rel)
        worst = max(worst, rel)
    return GradCheckResult(max_rel_error=worst, per_group=per_group, checked=len(entries))


def gradient_check(net: GraspNetwork, samples, weights=None, h=1e-3, per_class=64, seed=0):
    """Verify the whole training graph against central finite differences.

    Runs the main-mode forward plus the full loss on the given samples and
    compares analytic gradients on >= per_class randomly chosen parameters
    per layer group. A probe whose +-h evaluations land on different sides
    of a ReLU/max-pool decision boundary is discarded and redrawn (finite
    differences are undefined across a kink); the count of such redraws is
    reported. Meant for tiny configs (<= 16x16 inputs).
    """
    if isinstance(samples, Sample):
        samples = [samples]
    w = weights or LossWeights()
    inputs = prepare_samples(samples)
    color, depth, conf = _stack_planes(inputs, range(len(samples)))
    depth_gt = np.stack([ni.depth_target for ni in inputs])
    maps = [s.maps for s in samples]

    def loss_fn():
        out = net.forward(color, depth, conf, mode="main")
        return loss_depth(out.depth_est, depth_gt, weights=w) + loss_grasp(out, maps, weights=w)

    grads = analytic_gradients(net, loss_fn)
    rng = np.random.default_rng(seed)
    per_group = {}
    worst = 0.0
    checked = skipped = 0
    for group in PARAM_GROUPS:
        pool = [(k, i) for k, p in sorted(net.params.items()) if p.group == group
                for i in range(p.size)]
        order = rng.permutation(len(pool))
        accepted = 0
        gerr = 0.0
        for pos in order:
            if accepted >= per_class:
                break
            name, idx = pool[int(pos)]
            gn, crossed = central_difference(net, loss_fn, name, idx, h)
            if crossed:
                skipped += 1
                continue
            gerr = max(gerr, _rel_error(grads[name].flat[idx], gn))
            accepted += 1
        per_group[group] = gerr
        worst = max(worst, gerr)
        checked += accepted
    return GradCheckResult(max_rel_error=worst, per_group=per_group,
                           checked=checked, kink_skips=skipped)
