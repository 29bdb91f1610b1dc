"""The desk-scale hierarchical RGB-D fusion network.

Two U-Net style branches (color, depth) share a four-scale fusion scheme:
a small confidence net turns the inpainted depth + validity planes into a
one-channel confidence map per scale, the depth branch's encoder features
are re-weighted by it, and the color decoder consumes the concatenated
pair as its skip connections. A separate six-layer background extraction
trunk (pretrained on masks, then partially frozen) feeds the shared head
stack, which ends in five linear 1x1 outputs: grasp quality, cos(2phi),
sin(2phi), normalized width, and the auxiliary hole-free depth estimate.

All parameters are float64 leaf tensors of the autodiff engine; a forward
pass in training mode records the tape, so gradients come straight from
loss.backward().
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, conv2d, maxpool2, upsample2

CHECKPOINT_MAGIC = b"UGN3"
CHECKPOINT_VERSION = 1

PARAM_GROUPS = ("color_branch", "depth_branch", "confinet", "bem", "heads")


class CheckpointError(ValueError):
    """Raised for corrupt, truncated, or mismatched checkpoint data."""


@dataclass(frozen=True)
class NetConfig:
    input_size: int = 336
    depth_levels: int = 4
    base_channels: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.input_size % (2**self.depth_levels) != 0:
            raise ValueError(
                f"input_size {self.input_size} must be divisible by 2^{self.depth_levels}"
            )
        if self.depth_levels < 2:
            raise ValueError("need at least two scales")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")

    @property
    def bem_channels(self):
        return max(self.base_channels // 2, 4)

    @property
    def conf_channels(self):
        return max(self.base_channels // 2, 4)

    @property
    def head_channels(self):
        return 2 * self.base_channels

    def channels(self, level):
        return self.base_channels * (2**level)


class Param(Tensor):
    """Named, grouped leaf tensor; requires_grad doubles as the trainable flag."""

    __slots__ = ("group",)

    def __init__(self, data, name, group):
        super().__init__(data, requires_grad=True, name=name)
        self.group = group

    @property
    def trainable(self):
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag):
        self.requires_grad = bool(flag)


@dataclass
class NetOutputs:
    """Forward results; tensors keep the tape alive for training."""

    q: Tensor | None = None
    cos: Tensor | None = None
    sin: Tensor | None = None
    width: Tensor | None = None
    depth_est: Tensor | None = None
    mask_est: Tensor | None = None
    confidences: list | None = None
    mode: str = "main"

    def numpy_maps(self, index=0):
        """Predicted grasp maps + aux depth for one batch element, as arrays."""
        from .labeling import GraspMaps

        maps = GraspMaps(
            q=self.q.data[index, :, :, 0].copy(),
            cos=self.cos.data[index, :, :, 0].copy(),
            sin=self.sin.data[index, :, :, 0].copy(),
            width=self.width.data[index, :, :, 0].copy(),
        )
        return maps, self.depth_est.data[index, :, :, 0].copy()


def fuse(fc, fd, c):
    """Confidence-gated fusion: concat(fc, fd * c) with c broadcast over fd.

    All inputs are channels-last; fc and fd must share spatial dims and c
    is a single-channel map that re-weights every depth channel pixel-wise.
    """
    fc, fd, c = Tensor._wrap(fc), Tensor._wrap(fd), Tensor._wrap(c)
    if fc.shape[-3:-1] != fd.shape[-3:-1] or fc.shape[-3:-1] != c.shape[-3:-1]:
        raise ValueError(
            f"fusion inputs disagree spatially: {fc.shape}, {fd.shape}, {c.shape}"
        )
    if c.shape[-1] != 1:
        raise ValueError(f"confidence map must have one channel, got {c.shape}")
    return concat([fc, fd * c], axis=-1)


class GraspNetwork:
    """Parameter container + forward pass. Deterministic in config.seed."""

    def __init__(self, config: NetConfig):
        self.config = config
        self.params: dict[str, Param] = {}
        rng = np.random.default_rng(config.seed)
        L = config.depth_levels
        ch = config.channels
        bch = config.bem_channels
        cc = config.conf_channels
        hc = config.head_channels

        def conv(name, group, cin, cout, k=3):
            std = 1.0 / np.sqrt(cin * k * k)
            self.params[f"{name}.w"] = Param(rng.normal(0.0, std, (cout, cin, k, k)), f"{name}.w", group)
            self.params[f"{name}.b"] = Param(np.zeros(cout), f"{name}.b", group)

        # color / depth encoder-decoder branches
        for prefix, group, cin0 in (("color", "color_branch", 3), ("depth", "depth_branch", 1)):
            for l in range(L):
                conv(f"{prefix}.enc{l}", group, cin0 if l == 0 else ch(l - 1), ch(l))
            if prefix == "color":
                conv("color.bottom", group, 2 * ch(L - 1), ch(L - 1))
            for l in range(L - 2, -1, -1):
                conv(f"{prefix}.up{l}", group, ch(l + 1), ch(l))
                skip = 2 * ch(l) if prefix == "color" else ch(l)
                conv(f"{prefix}.dec{l}", group, ch(l) + skip, ch(l))

        # confidence net: one trunk conv + one 1-channel tap per scale
        conv("conf.trunk", "confinet", 2, cc)
        for l in range(L):
            conv(f"conf.out{l}", "confinet", cc, 1)

        # background extraction: two 3-layer encoders, 3 decoder convs, mask head
        for l in range(3):
            conv(f"bem.enc_rgb{l}", "bem", 3 if l == 0 else bch * 2 ** (l - 1), bch * 2**l)
            conv(f"bem.enc_depth{l}", "bem", 1 if l == 0 else bch * 2 ** (l - 1), bch * 2**l)
        conv("bem.dec0", "bem", 8 * bch, 4 * bch)
        conv("bem.dec1", "bem", 4 * bch, 2 * bch)
        conv("bem.dec2", "bem", 2 * bch, bch)
        conv("bem.mask_out", "bem", bch, 1, k=1)

        # shared head stack + five linear outputs
        conv("head.shared0", "heads", 2 * ch(0) + bch, hc)
        conv("head.shared1", "heads", hc, hc)
        conv("head.shared2", "heads", hc, hc)
        for out in ("q", "cos", "sin", "w", "depth"):
            conv(f"head.{out}", "heads", hc, 1, k=1)

        self._assert_scale_consistency()

    # -- bookkeeping ---------------------------------------------------------

    def _assert_scale_consistency(self):
        size = self.config.input_size
        for l in range(self.config.depth_levels):
            if size % (2**l) != 0:
                raise ValueError(f"scale {l} does not divide input size {size}")
        # encoder halves (L-1) times, decoder doubles back to the input size
        assert (size >> (self.config.depth_levels - 1)) << (self.config.depth_levels - 1) == size

    def parameters(self, only_trainable=False):
        for p in self.params.values():
            if not only_trainable or p.trainable:
                yield p

    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def set_trainable(self, flag, groups=None, names=None):
        for key, p in self.params.items():
            layer = key.rsplit(".", 1)[0]
            if (groups is None or p.group in groups) and (names is None or layer in names):
                p.trainable = flag

    def freeze_for_bem_pretrain(self):
        """Stage 1: only the background extraction module learns."""
        self.set_trainable(False)
        self.set_trainable(True, groups=("bem",))

    def freeze_for_main_training(self):
        """Stage 2: everything learns except the BEM, whose last decoder
        stays trainable; the BEM mask head is unused and frozen."""
        self.set_trainable(True)
        self.set_trainable(False, groups=("bem",))
        self.set_trainable(True, names=("bem.dec2",))

    def state_signature(self):
        """Bytes of all parameter values, for bitwise freeze checks."""
        return b"".join(self.params[k].data.tobytes() for k in sorted(self.params))

    # -- forward ---------------------------------------------------------------

    def _conv(self, name, x):
        return conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _conv_relu(self, name, x):
        return self._conv(name, x).relu()

    def _bem_trunk(self, rgb, depth):
        r, d = rgb, depth
        for l in range(3):
            if l > 0:
                r, d = maxpool2(r), maxpool2(d)
            r = self._conv_relu(f"bem.enc_rgb{l}", r)
            d = self._conv_relu(f"bem.enc_depth{l}", d)
        z = concat([r, d])
        z = self._conv_relu("bem.dec0", z)
        z = self._conv_relu("bem.dec1", upsample2(z))
        return self._conv_relu("bem.dec2", upsample2(z))

    @staticmethod
    def _as_batch(arr):
        t = Tensor._wrap(arr)
        if t.data.ndim == 3:
            t = Tensor(t.data[None], requires_grad=t.requires_grad)
        return t

    def forward(self, color, depth, conf=None, mode="main"):
        """Run the network. All planes are channels-last.

        color: (N,S,S,3) or (S,S,3); depth: (N,S,S,1); conf: (N,S,S,2)
        (inpainted depth + validity), required in main mode.
        mode "main" emits the five prediction maps; "bem_pretrain" runs only
        the background extraction module and emits mask_est.
        """
        S = self.config.input_size
        color = self._as_batch(color)
        depth = self._as_batch(depth)
        if color.shape[1:3] != (S, S) or depth.shape[1:3] != (S, S):
            raise ValueError(f"inputs must be {S}x{S}, got {color.shape} / {depth.shape}")
        if color.shape[-1] != 3 or depth.shape[-1] != 1:
            raise ValueError("expected 3 color channels and 1 depth channel")

        if mode == "bem_pretrain":
            z = self._bem_trunk(color, depth)
            return NetOutputs(mask_est=self._conv("bem.mask_out", z), mode=mode)
        if mode != "main":
            raise ValueError(f"unknown forward mode {mode!r}")
        if conf is None:
            raise ValueError("main mode needs the confidence input planes")
        conf = self._as_batch(conf)
        if conf.shape[-1] != 2 or conf.shape[1:3] != (S, S):
            raise ValueError(f"confidence input must be (N,{S},{S},2), got {conf.shape}")

        L = self.config.depth_levels

        # per-scale confidence maps in [0, 1]
        trunk = self._conv_relu("conf.trunk", conf)
        confidences = []
        for l in range(L):
            if l > 0:
                trunk = maxpool2(trunk)
            confidences.append(self._conv(f"conf.out{l}", trunk).sigmoid())

        # encoders
        ec, ed = [], []
        xc, xd = color, depth
        for l in range(L):
            if l > 0:
                xc, xd = maxpool2(xc), maxpool2(xd)
            xc = self._conv_relu(f"color.enc{l}", xc)
            xd = self._conv_relu(f"depth.enc{l}", xd)
            ec.append(xc)
            ed.append(xd)

        # depth branch decoder (plain U-Net skips)
        yd = ed[-1]
        for l in range(L - 2, -1, -1):
            yd = self._conv_relu(f"depth.up{l}", upsample2(yd))
            yd = self._conv_relu(f"depth.dec{l}", concat([yd, ed[l]]))

        # color branch decoder with confidence-fused skips at every scale
        yc = self._conv_relu("color.bottom", fuse(ec[-1], ed[-1], confidences[-1]))
        for l in range(L - 2, -1, -1):
            yc = self._conv_relu(f"color.up{l}", upsample2(yc))
            yc = self._conv_relu(f"color.dec{l}", concat([yc, fuse(ec[l], ed[l], confidences[l])]))

        bem_skip = self._bem_trunk(color, depth)

        h = concat([yc, yd, bem_skip])
        for i in range(3):
            h = self._conv_relu(f"head.shared{i}", h)

        return NetOutputs(
            q=self._conv("head.q", h),
            cos=self._conv("head.cos", h),
            sin=self._conv("head.sin", h),
            width=self._conv("head.w", h),
            depth_est=self._conv("head.depth", h),
            confidences=confidences,
            mode="main",
        )

    def forward_input(self, net_input, mode="main"):
        """Forward one prepared NetInput (see data.prepare_input)."""
        return self.forward(net_input.color, net_input.depth, net_input.conf, mode=mode)


def build_network(config: NetConfig):
    """Deterministic construction: same config + seed, bitwise-same weights."""
    return GraspNetwork(config)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(net: GraspNetwork):
    """Serialize config + every parameter (values, trainable flags) to bytes."""
    cfg = net.config
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<IIIq", cfg.input_size, cfg.depth_levels, cfg.base_channels, cfg.seed))
    items = sorted(net.params.items())
    buf.write(struct.pack("<I", len(items)))
    for name, p in items:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", 1 if p.trainable else 0))
        buf.write(struct.pack("<B", p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        buf.write(p.data.astype("<f8").tobytes())
    return buf.getvalue()


def load_checkpoint(blob, expect_config: NetConfig | None = None):
    """Rebuild a network from bytes; rejects corrupt or mismatched data."""
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a network checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    size, levels, base, seed = struct.unpack("<IIIq", take(20))
    try:
        config = NetConfig(input_size=size, depth_levels=levels, base_channels=base, seed=seed)
    except ValueError as e:
        raise CheckpointError(f"invalid stored config: {e}") from e
    if expect_config is not None and config != expect_config:
        raise CheckpointError(f"checkpoint config {config} does not match expected {expect_config}")

    net = GraspNetwork(config)
    (n_items,) = struct.unpack("<I", take(4))
    if n_items != len(net.params):
        raise CheckpointError(f"checkpoint has {n_items} parameters, network expects {len(net.params)}")
    for _ in range(n_items):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        if name not in net.params:
            raise CheckpointError(f"unknown parameter {name!r} in checkpoint")
        (trainable,) = struct.unpack("<B", take(1))
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        p = net.params[name]
        if shape != p.data.shape:
            raise CheckpointError(f"parameter {name!r} has shape {shape}, expected {p.data.shape}")
        count = int(np.prod(shape)) if ndim else 1
        p.data = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()
        p.trainable = bool(trainable)
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return net


def write_checkpoint(path, net: GraspNetwork):
    with open(path, "wb") as f:
        f.write(save_checkpoint(net))


def read_checkpoint(path, expect_config: NetConfig | None = None):
    with open(path, "rb") as f:
        return load_checkpoint(f.read(), expect_config=expect_config)
