"""Detector assembly: grouped VGG-style trunk with multi-scale tap points,
1x1 channel-fusion ("selector") layers, and box/class heads.

The trunk reduces a square input through pooled conv stages to six (by
default) feature maps. With ``grouped=True`` every trunk conv uses
groups=phases so each phase keeps an isolated channel block until the 1x1
fusion convs mix them right before the heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from gssd import tensor as T
from gssd.tensor import ConfigError, Tensor

# base (unscaled) channel widths of the trunk, VGG16-flavoured
_STAGE_WIDTHS = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))
_NECK_WIDTH = 1024  # conv6 / conv7
_EXTRA_WIDTHS_FIRST = (256, 512)
_EXTRA_WIDTHS_REST = (128, 256)

BN_MOMENTUM = 0.1
BN_EPSILON = 1e-5


@dataclass
class ModelConfig:
    """Architecture knobs. Defaults give the desk-scale multi-phase detector."""

    input_size: int = 128
    phases: int = 4
    slices_per_phase: int = 3
    grouped: bool = True
    double_base: bool = False
    n_fusion_convs: int = 1
    n_classes: int = 2
    width_scale: float = 0.25
    boxes_per_cell: tuple = (4, 6, 6, 6, 4, 4)
    scale_min: float = 0.2
    scale_max: float = 0.9
    # Escape hatch for the channel-selector ablation: heads directly on the
    # grouped feature maps. Normal configs must keep fusion convs.
    allow_unfused_grouped: bool = False

    def __post_init__(self):
        self.boxes_per_cell = tuple(int(b) for b in self.boxes_per_cell)

    @property
    def in_channels(self) -> int:
        return self.phases * self.slices_per_phase

    @property
    def n_maps(self) -> int:
        return len(self.boxes_per_cell)

    def validate(self) -> None:
        if self.input_size < 8:
            raise ConfigError(f"input_size {self.input_size} too small")
        if self.phases < 1 or self.slices_per_phase < 1:
            raise ConfigError("phases and slices_per_phase must be positive")
        if self.n_classes < 2:
            raise ConfigError("need at least background + one foreground class")
        if self.n_fusion_convs not in (0, 1, 2):
            raise ConfigError(f"n_fusion_convs must be 0, 1 or 2, got {self.n_fusion_convs}")
        if self.grouped and self.n_fusion_convs == 0 and not self.allow_unfused_grouped:
            raise ConfigError("grouped=True requires n_fusion_convs >= 1 "
                              "(set allow_unfused_grouped for ablation runs)")
        if self.n_maps < 3:
            raise ConfigError("need at least 3 feature maps")
        for b in self.boxes_per_cell:
            if b not in (4, 6):
                raise ConfigError(f"boxes_per_cell entries must be 4 or 6, got {b}")
        if not (0.0 < self.scale_min < self.scale_max <= 1.0):
            raise ConfigError(f"bad prior scales ({self.scale_min}, {self.scale_max})")
        if self.grouped and self.in_channels % self.phases:
            raise ConfigError("input channels not divisible by phases")
        tap_layout(self.input_size, self.n_maps)  # raises if the ladder breaks

    def width(self, base: int) -> int:
        """Scaled channel width; multiples of `phases` when grouped, and
        double_base doubles exactly."""
        w = max(1, round(base * self.width_scale))
        if self.grouped:
            w = self.phases * math.ceil(w / self.phases)
        if self.double_base:
            w *= 2
        return w

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"model.{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        """Parse the model.* keys out of a key=value config echo."""
        raw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line or "=" not in line:
                continue
            key, val = (s.strip() for s in line.split("=", 1))
            if key.startswith("model."):
                raw[key[len("model."):]] = val
        kwargs = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            v = raw[f.name]
            if f.name == "boxes_per_cell":
                kwargs[f.name] = tuple(int(x) for x in v.split(","))
            elif f.type == "bool" or isinstance(getattr(cls, f.name, None), bool):
                kwargs[f.name] = v.lower() in ("1", "true", "yes")
            elif f.name in ("width_scale", "scale_min", "scale_max"):
                kwargs[f.name] = float(v)
            else:
                kwargs[f.name] = int(v)
        return cls(**kwargs)


def tap_layout(input_size: int, n_maps: int):
    """Spatial plan of the tap ladder.

    Returns (n_pools_before_tap1, tap_sizes, extra_convs) where extra_convs
    lists the (stride, padding) of each extra stage's 3x3 conv. Pool depth
    adapts so smaller inputs still support the full ladder; 300 yields the
    canonical 38/19/10/5/3/1.
    """
    for pools in (3, 2, 1):
        size = input_size
        for _ in range(pools):
            if size < 2:
                size = 0
                break
            size = math.ceil(size / 2)
        if size < 2:
            continue
        t1 = size
        t2 = math.ceil(t1 / 2)
        sizes = [t1, t2]
        extras = []
        cur = t2
        ok = cur >= 2
        for _ in range(n_maps - 2):
            if cur <= 1:
                ok = False
                break
            if cur in (3, 5):
                stride, pad, nxt = 1, 0, cur - 2
            else:
                stride, pad, nxt = 2, 1, (cur - 1) // 2 + 1
            extras.append((stride, pad))
            sizes.append(nxt)
            cur = nxt
        if ok:
            return pools, sizes, extras
    raise ConfigError(f"input_size {input_size} cannot produce {n_maps} integer tap sizes")


def tap_sizes(config: ModelConfig):
    return tap_layout(config.input_size, config.n_maps)[1]


def n_priors(config: ModelConfig) -> int:
    return sum(b * s * s for b, s in zip(config.boxes_per_cell, tap_sizes(config)))


# ---------------------------------------------------------------------------
# layer plan


@dataclass(frozen=True)
class ConvSpec:
    name: str
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    padding: int = 0
    groups: int = 1
    bn: bool = False
    relu: bool = False
    bias: bool = True


@dataclass(frozen=True)
class PoolSpec:
    kernel: int
    stride: int
    padding: int = 0
    ceil_mode: bool = True


@dataclass(frozen=True)
class TapSpec:
    index: int


def _trunk_plan(cfg: ModelConfig):
    """Ordered trunk layers with tap markers; returns (plan, tap_channels)."""
    pools, _, extra_convs = tap_layout(cfg.input_size, cfg.n_maps)
    g = cfg.phases if cfg.grouped else 1
    plan = []
    tap_channels = []
    ch = cfg.in_channels

    def conv(name, out_ch, kernel=3, stride=1, padding=1):
        nonlocal ch
        plan.append(ConvSpec(name, ch, out_ch, kernel, stride, padding,
                             groups=g, bn=True, relu=True, bias=False))
        ch = out_ch

    # VGG stages; only the first `pools` inter-stage pools are kept so small
    # inputs reach the ladder with enough resolution left.
    for si, widths in enumerate(_STAGE_WIDTHS[:4]):
        for ci, w in enumerate(widths):
            conv(f"conv{si + 1}_{ci + 1}", cfg.width(w))
        if si < pools:
            plan.append(PoolSpec(2, 2))
    plan.append(TapSpec(0))
    tap_channels.append(ch)

    plan.append(PoolSpec(2, 2))
    for ci, w in enumerate(_STAGE_WIDTHS[4]):
        conv(f"conv5_{ci + 1}", cfg.width(w))
    plan.append(PoolSpec(3, 1, padding=1))  # size-preserving
    conv("conv6", cfg.width(_NECK_WIDTH))
    conv("conv7", cfg.width(_NECK_WIDTH), kernel=1, padding=0)
    plan.append(TapSpec(1))
    tap_channels.append(ch)

    for ei, (stride, pad) in enumerate(extra_convs):
        reduce_w, out_w = _EXTRA_WIDTHS_FIRST if ei == 0 else _EXTRA_WIDTHS_REST
        conv(f"conv{8 + ei}_1", cfg.width(reduce_w), kernel=1, padding=0)
        plan.append(ConvSpec(f"conv{8 + ei}_2", ch, cfg.width(out_w), 3, stride, pad,
                             groups=g, bn=True, relu=True, bias=False))
        ch = cfg.width(out_w)
        plan.append(TapSpec(2 + ei))
        tap_channels.append(ch)

    return plan, tap_channels


class Model:
    """Parameter store plus the layer plan that interprets it.

    Parameter names are stable: trunk convs as ``<layer>.weight`` with
    ``<layer>.bn.gamma/beta`` affine terms, fusion convs as
    ``fuse<tap>_<i>.weight/bias``, heads as ``loc<tap>.*`` / ``conf<tap>.*``.
    Running batch-norm statistics live in ``buffers``.
    """

    def __init__(self, config: ModelConfig, params: dict, buffers: dict):
        config.validate()
        self.config = config
        self.params = params
        self.buffers = buffers
        self.plan, self.tap_channels = _trunk_plan(config)
        self.tap_sizes = tap_sizes(config)

    @property
    def n_priors(self) -> int:
        return n_priors(self.config)

    def _conv(self, x: Tensor, spec: ConvSpec, training: bool) -> Tensor:
        w = self.params[f"{spec.name}.weight"]
        b = self.params.get(f"{spec.name}.bias") if spec.bias else None
        y = T.conv2d(x, w, b, stride=spec.stride, padding=spec.padding, groups=spec.groups)
        if spec.bn:
            y = T.batch_norm(y, self.params[f"{spec.name}.bn.gamma"],
                             self.params[f"{spec.name}.bn.beta"],
                             self.buffers[f"{spec.name}.bn.running_mean"],
                             self.buffers[f"{spec.name}.bn.running_var"],
                             training=training, momentum=BN_MOMENTUM, eps=BN_EPSILON)
        if spec.relu:
            y = T.relu(y)
        return y

    def features(self, x: Tensor, training: bool = False):
        """Pre-fusion feature maps at every tap point."""
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2] != cfg.input_size \
                or x.shape[3] != cfg.input_size:
            raise ConfigError(f"expected input [N,{cfg.in_channels},{cfg.input_size},"
                              f"{cfg.input_size}], got {x.shape}")
        taps = []
        cur = x
        for step in self.plan:
            if isinstance(step, ConvSpec):
                cur = self._conv(cur, step, training)
            elif isinstance(step, PoolSpec):
                cur = T.max_pool2d(cur, step.kernel, step.stride, padding=step.padding,
                                   ceil_mode=step.ceil_mode)
            else:
                taps.append(cur)
        return taps

    def forward(self, x: Tensor, training: bool = False):
        """Run the detector. Returns (loc [N,P,4], conf [N,P,K]) with priors
        flattened scale-major, then row-major cell, then box index."""
        cfg = self.config
        taps = self.features(x, training)
        locs, confs = [], []
        n = x.shape[0]
        for t, feat in enumerate(taps):
            for i in range(cfg.n_fusion_convs):
                if i > 0:
                    feat = T.relu(feat)
                feat = T.conv2d(feat, self.params[f"fuse{t}_{i}.weight"],
                                self.params[f"fuse{t}_{i}.bias"])
            boxes = cfg.boxes_per_cell[t]
            loc = T.conv2d(feat, self.params[f"loc{t}.weight"],
                           self.params[f"loc{t}.bias"], padding=1)
            conf = T.conv2d(feat, self.params[f"conf{t}.weight"],
                            self.params[f"conf{t}.bias"], padding=1)
            h, w = loc.shape[2], loc.shape[3]
            locs.append(T.reshape(T.transpose(loc, (0, 2, 3, 1)), (n, h * w * boxes, 4)))
            confs.append(T.reshape(T.transpose(conf, (0, 2, 3, 1)),
                                   (n, h * w * boxes, cfg.n_classes)))
        return T.concat(locs, axis=1), T.concat(confs, axis=1)

    def state_records(self) -> dict:
        out = {name: t.data for name, t in self.params.items()}
        out.update(self.buffers)
        return out

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype=np.float64).tobytes())
        return h.hexdigest()


def build_model(config: ModelConfig, rng: np.random.Generator) -> Model:
    """Create a model with Xavier-initialized convs and fresh BN statistics."""
    config.validate()
    plan, tap_channels = _trunk_plan(config)
    dtype = T.default_dtype()
    params: dict = {}
    buffers: dict = {}

    def add_conv(name, in_ch, out_ch, kernel, groups, bias, bn):
        params[f"{name}.weight"] = T.xavier_init(
            (out_ch, in_ch // groups, kernel, kernel), rng)
        if bias:
            params[f"{name}.bias"] = Tensor(np.zeros(out_ch), requires_grad=True)
        if bn:
            params[f"{name}.bn.gamma"] = Tensor(np.ones(out_ch), requires_grad=True)
            params[f"{name}.bn.beta"] = Tensor(np.zeros(out_ch), requires_grad=True)
            buffers[f"{name}.bn.running_mean"] = np.zeros(out_ch, dtype=dtype)
            buffers[f"{name}.bn.running_var"] = np.ones(out_ch, dtype=dtype)

    for step in plan:
        if isinstance(step, ConvSpec):
            add_conv(step.name, step.in_ch, step.out_ch, step.kernel,
                     step.groups, step.bias, step.bn)

    for t, ch in enumerate(tap_channels):
        for i in range(config.n_fusion_convs):
            add_conv(f"fuse{t}_{i}", ch, ch, 1, 1, bias=True, bn=False)
        boxes = config.boxes_per_cell[t]
        add_conv(f"loc{t}", ch, boxes * 4, 3, 1, bias=True, bn=False)
        add_conv(f"conf{t}", ch, boxes * config.n_classes, 3, 1, bias=True, bn=False)

    return Model(config, params, buffers)


def save_model(path, model: Model, config_text: Optional[str] = None,
               extra_records: Optional[dict] = None) -> None:
    from gssd.checkpoint import save_checkpoint

    records = model.state_records()
    if extra_records:
        records = {**records, **extra_records}
    save_checkpoint(path, records, config_text or model.config.to_text())


def load_model(path):
    """Rebuild a model from a checkpoint. Returns (model, config_text, extras).

    Record names that do not belong to the architecture (optimizer state,
    counters) are returned in `extras`.
    """
    from gssd.checkpoint import load_checkpoint

    records, config_text = load_checkpoint(path)
    config = ModelConfig.from_text(config_text)
    model = build_model(config, np.random.default_rng(0))
    dtype = T.default_dtype()
    extras = {}
    expected = model.state_records()
    missing = [k for k in expected if k not in records]
    if missing:
        raise ConfigError(f"checkpoint missing records: {sorted(missing)[:5]}")
    for name, arr in records.items():
        if name in model.params:
            want = model.params[name].data.shape
            if tuple(arr.shape) != want:
                raise ConfigError(f"checkpoint/config mismatch for '{name}': "
                                  f"stored {arr.shape}, config implies {want}")
            model.params[name].data = arr.astype(dtype)
        elif name in model.buffers:
            model.buffers[name][...] = arr.astype(dtype)
        else:
            extras[name] = arr
    return model, config_text, extras
