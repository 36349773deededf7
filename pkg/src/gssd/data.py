"""Data pipeline: volume and label files, abdominal-window normalization,
cross-phase slice stacking, weak-label jitter, training augmentation,
synthetic multi-phase phantom volumes, and fold splitting.

Coordinates use the same convention everywhere: boxes are (x_min, y_min,
x_max, y_max) normalized to [0, 1] over the square slice; z indices are
inclusive slice ranges.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from gssd import tensor as T
from gssd.priors import iou_matrix
from gssd.tensor import ConfigError

VOLUME_MAGIC = b"GSSDVOL1"
HU_WINDOW = (-100.0, 400.0)


def window_hu(values: np.ndarray) -> np.ndarray:
    """Clamp to the abdominal window and map it onto [0, 1]."""
    lo, hi = HU_WINDOW
    v = np.clip(np.asarray(values, dtype=T.default_dtype()), lo, hi)
    return (v - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# containers

@dataclass
class WeakLabel:
    """One lesion annotation in one phase: an inclusive z range plus the 2-D
    box that bounds the lesion across that whole range."""
    phase: int
    z_start: int
    z_end: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    cls: int = 1

    def box(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max],
                        dtype=np.float64)

    def covers(self, z: int) -> bool:
        return self.z_start <= z <= self.z_end


@dataclass
class PhaseVolume:
    data: np.ndarray            # [phases, D, H, W] raw HU
    labels: list
    bias: float = 0.0           # scanner offset baked into `data`

    @property
    def n_phases(self) -> int:
        return self.data.shape[0]

    @property
    def depth(self) -> int:
        return self.data.shape[1]


# ---------------------------------------------------------------------------
# file formats

def save_volume(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype="<f4")
    if data.ndim != 4:
        raise ConfigError(f"volume must be [phases, D, H, W], got {data.shape}")
    with open(path, "wb") as f:
        f.write(VOLUME_MAGIC)
        f.write(struct.pack("<4I", *data.shape))
        f.write(data.tobytes())


def load_volume(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != VOLUME_MAGIC:
        raise ConfigError(f"{path}: not a volume file (bad magic)")
    if len(raw) < 24:
        raise ConfigError(f"{path}: truncated header")
    shape = struct.unpack_from("<4I", raw, 8)
    n = int(np.prod(shape, dtype=np.int64))
    if len(raw) != 24 + 4 * n:
        raise ConfigError(f"{path}: payload is {len(raw) - 24} bytes, "
                          f"shape {shape} needs {4 * n}")
    return np.frombuffer(raw, dtype="<f4", count=n, offset=24).reshape(shape).copy()


def save_labels(path, labels) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("# phase z_start z_end x_min y_min x_max y_max class\n")
        for lb in labels:
            f.write(f"{lb.phase} {lb.z_start} {lb.z_end} "
                    f"{lb.x_min:.6f} {lb.y_min:.6f} {lb.x_max:.6f} {lb.y_max:.6f} "
                    f"{lb.cls}\n")


def load_labels(path) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ConfigError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
            try:
                lb = WeakLabel(phase=int(parts[0]), z_start=int(parts[1]),
                               z_end=int(parts[2]), x_min=float(parts[3]),
                               y_min=float(parts[4]), x_max=float(parts[5]),
                               y_max=float(parts[6]), cls=int(parts[7]))
            except ValueError as e:
                raise ConfigError(f"{path}:{ln}: {e}") from None
            if lb.z_start > lb.z_end or lb.x_min >= lb.x_max or lb.y_min >= lb.y_max:
                raise ConfigError(f"{path}:{ln}: degenerate label")
            out.append(lb)
    return out


@dataclass
class ManifestEntry:
    volume: str
    labels: str
    bias: float = 0.0
    seed: int = 0   # per-volume generator seed; 0 for ingested data


def save_manifest(path, entries) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["volume", "labels", "bias", "seed"])
        for e in entries:
            w.writerow([e.volume, e.labels, f"{e.bias:.6f}", e.seed])


def load_manifest(path) -> list:
    with open(path, "r", newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["volume", "labels", "bias", "seed"]:
        raise ConfigError(f"{path}: expected header 'volume,labels,bias,seed'")
    out = []
    for i, row in enumerate(rows[1:], 2):
        if len(row) != 4:
            raise ConfigError(f"{path}:{i}: expected 4 columns")
        out.append(ManifestEntry(volume=row[0], labels=row[1],
                                 bias=float(row[2]), seed=int(row[3])))
    return out


# ---------------------------------------------------------------------------
# slice assembly

def stack_phases(windowed: np.ndarray, z: int) -> np.ndarray:
    """Channels for one slice position: every phase contributes slices
    z-1, z, z+1 (edge-repeated), laid out phase-major so channel p*3+s is
    phase p, slice offset s-1."""
    phases, depth = windowed.shape[0], windowed.shape[1]
    if not 0 <= z < depth:
        raise ConfigError(f"slice {z} outside volume of depth {depth}")
    zs = [min(max(z + dz, 0), depth - 1) for dz in (-1, 0, 1)]
    return windowed[:, zs].reshape(phases * 3, *windowed.shape[2:])


def fuse_cross_phase(boxes: np.ndarray, classes: np.ndarray,
                     iou_threshold: float = 0.5):
    """Merge per-phase annotations of the same lesion: connected components
    under IoU >= threshold, each fused to the coordinate-wise union box."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = boxes.shape[0]
    if n == 0:
        return boxes, np.asarray(classes, dtype=np.int64)
    m = iou_matrix(boxes, boxes) >= iou_threshold
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        for j in range(i + 1, n):
            if m[i, j]:
                parent[find(i)] = find(j)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    fused = []
    fused_cls = []
    for members in groups.values():
        b = boxes[members]
        fused.append([b[:, 0].min(), b[:, 1].min(), b[:, 2].max(), b[:, 3].max()])
        fused_cls.append(int(np.asarray(classes)[members[0]]))
    fused = np.array(fused, dtype=np.float64)
    order = np.lexsort((fused[:, 1], fused[:, 0]))
    return fused[order], np.array(fused_cls, dtype=np.int64)[order]


class SliceDataset:
    """Lesion-bearing slices of a set of volumes, with cross-phase ground
    truth fused per slice. `portal_only` replaces every phase with the portal
    one to form the single-phase baseline input."""

    def __init__(self, volumes, portal_only: bool = False, portal_phase: int = 2):
        self.entries = []
        self.windowed = []
        for vi, vol in enumerate(volumes):
            w = window_hu(vol.data - vol.bias)
            if portal_only:
                if portal_phase >= vol.n_phases:
                    raise ConfigError(f"portal phase {portal_phase} out of range")
                w = np.repeat(w[portal_phase:portal_phase + 1], vol.n_phases, axis=0)
            self.windowed.append(w)
            for z in range(vol.depth):
                live = [lb for lb in vol.labels if lb.covers(z)]
                if not live:
                    continue
                boxes, classes = fuse_cross_phase(
                    np.array([lb.box() for lb in live]),
                    np.array([lb.cls for lb in live]))
                self.entries.append((vi, z, boxes, classes))

    def __len__(self) -> int:
        return len(self.entries)

    def sample(self, index: int):
        vi, z, boxes, classes = self.entries[index]
        return stack_phases(self.windowed[vi], z), boxes.copy(), classes.copy()


# ---------------------------------------------------------------------------
# label noise and augmentation

def jitter_boxes(boxes: np.ndarray, rng: np.random.Generator,
                 alpha: float = 0.01) -> np.ndarray:
    """Simulate sloppy annotations: every coordinate is scaled by an
    independent uniform factor in [1-alpha, 1+alpha], then clamped to the
    frame and reordered if the noise inverted an edge pair."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    factors = rng.uniform(1.0 - alpha, 1.0 + alpha, size=boxes.shape)
    out = np.clip(boxes * factors, 0.0, 1.0)
    x = np.sort(out[:, (0, 2)], axis=1)
    y = np.sort(out[:, (1, 3)], axis=1)
    return np.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], axis=1)


@dataclass
class AugmentConfig:
    mirror_prob: float = 0.5
    scale_min: float = 0.5
    scale_max: float = 1.5
    brightness: float = 0.05
    contrast: float = 0.1
    max_tries: int = 50


def _nn_resize(img: np.ndarray, out_side: int) -> np.ndarray:
    """Nearest-neighbour square resize of [C, H, W]."""
    side = img.shape[1]
    idx = np.minimum((np.arange(out_side) + 0.5) * side / out_side, side - 1).astype(np.int64)
    return img[:, idx[:, None], idx[None, :]]


def augment(channels: np.ndarray, boxes: np.ndarray, classes: np.ndarray,
            rng: np.random.Generator, cfg: Optional[AugmentConfig] = None):
    """Random zoom crop (keeping at least one box center), mirror, and mild
    brightness/contrast. Falls back to the untouched sample when no crop
    retains a box after `max_tries` attempts."""
    cfg = cfg or AugmentConfig()
    c, h, w = channels.shape
    if h != w:
        raise ConfigError(f"augment expects square slices, got {h}x{w}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    classes = np.asarray(classes, dtype=np.int64)

    chosen = None
    for _ in range(cfg.max_tries):
        scale = rng.uniform(cfg.scale_min, cfg.scale_max)
        src = max(2, round(h / scale))
        if src <= h:
            y0 = int(rng.integers(0, h - src + 1))
            x0 = int(rng.integers(0, h - src + 1))
        else:
            y0 = -int(rng.integers(0, src - h + 1))
            x0 = -int(rng.integers(0, src - h + 1))
        px = boxes * h
        centers = (px[:, :2] + px[:, 2:]) / 2
        inside = ((centers[:, 0] > x0) & (centers[:, 0] < x0 + src) &
                  (centers[:, 1] > y0) & (centers[:, 1] < y0 + src))
        shifted = (px - np.array([x0, y0, x0, y0])) / src
        clipped = np.clip(shifted, 0.0, 1.0)
        keep = inside & (clipped[:, 2] - clipped[:, 0] > 1e-4) \
                      & (clipped[:, 3] - clipped[:, 1] > 1e-4)
        if keep.any():
            chosen = (x0, y0, src, clipped[keep], classes[keep])
            break
    if chosen is None:
        out, out_boxes, out_classes = channels.copy(), boxes.copy(), classes.copy()
    else:
        x0, y0, src, out_boxes, out_classes = chosen
        if x0 >= 0 and x0 + src <= h:
            crop = channels[:, y0:y0 + src, x0:x0 + src]
        else:
            crop = np.zeros((c, src, src), dtype=channels.dtype)
            sy, sx = max(0, -y0), max(0, -x0)
            crop[:, sy:sy + h, sx:sx + w] = channels
        out = _nn_resize(crop, h)

    if rng.uniform() < cfg.mirror_prob:
        out = out[:, :, ::-1].copy()
        flipped = out_boxes.copy()
        flipped[:, 0] = 1.0 - out_boxes[:, 2]
        flipped[:, 2] = 1.0 - out_boxes[:, 0]
        out_boxes = flipped

    gain = rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast)
    shift = rng.uniform(-cfg.brightness, cfg.brightness)
    out = np.clip(out * gain + shift, 0.0, 1.0).astype(channels.dtype)
    return out, out_boxes, out_classes


# ---------------------------------------------------------------------------
# synthetic phantoms

@dataclass(frozen=True)
class Lesion:
    """One synthetic lesion: voxel-space center and radii plus the HU it adds
    per phase. A sphere in patient space becomes an ellipsoid in voxel space
    once slice spacing differs from pixel pitch, so radii are per axis."""
    center: tuple   # (x, y, z) voxels
    radius: tuple   # (rx, ry, rz) voxels
    deltas: tuple   # HU added inside the lesion, one value per phase

    @staticmethod
    def make(center, radius, deltas) -> "Lesion":
        """Build from loosely-typed values; a scalar radius means a sphere."""
        center = tuple(float(v) for v in np.atleast_1d(center))
        radius = tuple(float(v) for v in np.atleast_1d(radius))
        if len(radius) == 1:
            radius = radius * 3
        return Lesion(center=center, radius=radius,
                      deltas=tuple(float(v) for v in np.atleast_1d(deltas)))


@dataclass
class PhantomSpec:
    """Knobs for synthetic study generation, parsed from key=value text.

    Anatomy is a bright liver ellipsoid on a darker soft-tissue background.
    Lesions can be pinned down exactly (`lesion.N.center/radius/deltas` keys)
    or drawn per volume via the random_* knobs. "Quiet" random lesions enhance
    in the arterial and delayed phases but vanish in the portal phase, which
    is what makes the single-phase baseline fail on them.
    """
    n_volumes: int = 12
    phases: int = 4
    depth: int = 24
    height: int = 128
    width: int = 128
    background_hu: float = 30.0
    liver_hu: float = 60.0
    liver_center: tuple = ()        # (x, y, z); empty means the volume center
    liver_radii: tuple = ()         # (rx, ry, rz); empty picks a filling default
    noise_hu: float = 8.0
    phase_offsets: tuple = (0.0, 30.0, 50.0, 20.0)
    vendor_bias: float = 0.0
    bias_range: float = 0.0         # extra uniform offset drawn per volume
    seed: int = 0
    lesions: tuple = ()             # explicit Lesion entries, identical per volume
    random_lesions: tuple = (0, 0)  # per-volume count range; (0,0) disables
    radius_xy: tuple = (6.0, 14.0)
    radius_z: tuple = (1.5, 4.0)
    contrast_bright: tuple = (40.0, 90.0, 70.0, 50.0)
    contrast_quiet: tuple = (0.0, 90.0, 0.0, 45.0)
    quiet_fraction: float = 0.5
    visibility_hu: float = 15.0

    def resolved_liver(self):
        c = self.liver_center or (self.width / 2, self.height / 2, self.depth / 2)
        r = self.liver_radii or (0.42 * self.width, 0.42 * self.height,
                                 0.46 * self.depth)
        return tuple(float(v) for v in c), tuple(float(v) for v in r)

    def validate(self) -> None:
        if self.n_volumes < 1 or self.phases < 1:
            raise ConfigError("need at least one volume and one phase")
        if min(self.depth, self.height, self.width) < 1:
            raise ConfigError("volume dimensions must be positive")
        if self.height != self.width:
            raise ConfigError("phantom slices must be square")
        for name in ("phase_offsets", "contrast_bright", "contrast_quiet"):
            if len(getattr(self, name)) != self.phases:
                raise ConfigError(f"{name} needs {self.phases} entries")
        for name in ("liver_center", "liver_radii"):
            v = getattr(self, name)
            if v and len(v) != 3:
                raise ConfigError(f"{name} needs 3 entries")
        lo, hi = (int(v) for v in self.random_lesions)
        if not 0 <= lo <= hi:
            raise ConfigError("bad random lesion count range")
        for name in ("radius_xy", "radius_z"):
            r = getattr(self, name)
            if not (len(r) == 2 and 0 < r[0] <= r[1]):
                raise ConfigError(f"bad {name} range")
        if not 0.0 <= self.quiet_fraction <= 1.0:
            raise ConfigError("quiet_fraction must be in [0,1]")
        liver_c, liver_r = self.resolved_liver()
        if min(liver_r) <= 0:
            raise ConfigError("liver radii must be positive")
        for i, les in enumerate(self.lesions):
            if len(les.center) != 3 or len(les.radius) != 3:
                raise ConfigError(f"lesion {i} needs 3-D center and radius")
            if min(les.radius) <= 0:
                raise ConfigError(f"lesion {i} radius must be positive")
            if len(les.deltas) != self.phases:
                raise ConfigError(f"lesion {i} needs {self.phases} deltas")
            if not _inside_liver(les.center, les.radius, liver_c, liver_r):
                raise ConfigError(f"lesion {i} extends outside the liver")

    @classmethod
    def parse(cls, text: str) -> "PhantomSpec":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        lesion_raw: dict = {}
        for ln, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {ln}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key.startswith("lesion."):
                parts = key.split(".")
                if len(parts) != 3 or parts[2] not in ("center", "radius", "deltas"):
                    raise ConfigError(f"line {ln}: unknown key {key!r}")
                try:
                    idx = int(parts[1])
                    values = tuple(float(x) for x in val.split(","))
                except ValueError:
                    raise ConfigError(f"line {ln}: bad value for {key}: {val!r}") from None
                lesion_raw.setdefault(idx, {})[parts[2]] = values
                continue
            if key not in known or key == "lesions":
                raise ConfigError(f"line {ln}: unknown key {key!r}")
            default = getattr(cls, key)
            try:
                if key == "random_lesions":
                    kwargs[key] = tuple(int(x) for x in val.split(","))
                elif isinstance(default, tuple):
                    kwargs[key] = tuple(float(x) for x in val.split(","))
                elif isinstance(default, bool):
                    kwargs[key] = val.lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    kwargs[key] = int(val)
                else:
                    kwargs[key] = float(val)
            except ValueError:
                raise ConfigError(f"line {ln}: bad value for {key}: {val!r}") from None

        if lesion_raw:
            if sorted(lesion_raw) != list(range(len(lesion_raw))):
                raise ConfigError("lesion indices must be contiguous from 0")
            entries = []
            for idx in range(len(lesion_raw)):
                item = lesion_raw[idx]
                missing = {"center", "radius", "deltas"} - set(item)
                if missing:
                    raise ConfigError(
                        f"lesion {idx} is missing {sorted(missing)}")
                entries.append(Lesion.make(item["center"], item["radius"],
                                           item["deltas"]))
            kwargs["lesions"] = tuple(entries)
        spec = cls(**kwargs)
        spec.validate()
        return spec


def _inside_liver(center, radius, liver_center, liver_radii) -> bool:
    """Sufficient containment test: pad the normalized distance by the lesion
    radius on each axis."""
    q = sum(((abs(c - lc) + r) / lr) ** 2
            for c, r, lc, lr in zip(center, radius, liver_center, liver_radii))
    return q <= 1.0


def _soft_support(spec: PhantomSpec, lesion: Lesion):
    """Soft insertion profile and hard voxel mask of one lesion."""
    zz = np.arange(spec.depth)[:, None, None]
    yy = np.arange(spec.height)[None, :, None]
    xx = np.arange(spec.width)[None, None, :]
    cx, cy, cz = lesion.center
    rx, ry, rz = lesion.radius
    r2 = (((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    soft = np.clip(1.8 * (1.0 - r2), 0.0, 1.0).astype(np.float32)
    return soft, r2 < 1.0


def _draw_lesions(spec: PhantomSpec, rng: np.random.Generator) -> list:
    """Random per-volume lesions placed inside the liver, avoiding overlap
    with each other and with the explicit ones."""
    lo, hi = (int(v) for v in spec.random_lesions)
    if hi == 0:
        return []
    liver_c, liver_r = spec.resolved_liver()
    taken = [(l.center, l.radius) for l in spec.lesions]
    out = []
    for _ in range(int(rng.integers(lo, hi + 1))):
        rx = float(rng.uniform(*spec.radius_xy))
        ry = float(rng.uniform(*spec.radius_xy))
        rz = float(rng.uniform(*spec.radius_z))
        for _ in range(50):
            cx = float(rng.uniform(liver_c[0] - liver_r[0], liver_c[0] + liver_r[0]))
            cy = float(rng.uniform(liver_c[1] - liver_r[1], liver_c[1] + liver_r[1]))
            cz = float(rng.uniform(liver_c[2] - liver_r[2], liver_c[2] + liver_r[2]))
            if not _inside_liver((cx, cy, cz), (rx, ry, rz), liver_c, liver_r):
                continue
            clear = all((cx - oc[0]) ** 2 + (cy - oc[1]) ** 2
                        > (rx + orr[0] + 2) ** 2
                        or abs(cz - oc[2]) > rz + orr[2] + 1
                        for oc, orr in taken)
            if clear:
                break
        else:
            continue
        profile = (spec.contrast_quiet if rng.uniform() < spec.quiet_fraction
                   else spec.contrast_bright)
        taken.append(((cx, cy, cz), (rx, ry, rz)))
        out.append(Lesion(center=(cx, cy, cz), radius=(rx, ry, rz),
                          deltas=tuple(profile)))
    return out


def generate_phantom(spec: PhantomSpec, rng: np.random.Generator) -> PhaseVolume:
    """One synthetic study: noisy soft tissue, a brighter liver ellipsoid,
    and soft-edged lesions adding their per-phase contrast. The noise base is
    shared across phases (one acquisition, several contrast states), so a
    zero-delta phase hides its lesion exactly.

    Labels derive from the inserted voxel support: one box per lesion and
    phase, covering the full extent, emitted only where the phase's contrast
    clears the visibility threshold."""
    spec.validate()
    p, d, h, w = spec.phases, spec.depth, spec.height, spec.width
    base = spec.background_hu + spec.noise_hu * rng.standard_normal((d, h, w))
    vol = np.empty((p, d, h, w), dtype=np.float32)
    for i in range(p):
        vol[i] = base + spec.phase_offsets[i]

    liver = Lesion(center=spec.resolved_liver()[0],
                   radius=spec.resolved_liver()[1],
                   deltas=(spec.liver_hu - spec.background_hu,) * p)
    liver_soft, _ = _soft_support(spec, liver)
    vol += (spec.liver_hu - spec.background_hu) * liver_soft

    labels = []
    for lesion in list(spec.lesions) + _draw_lesions(spec, rng):
        soft, mask = _soft_support(spec, lesion)
        for i in range(p):
            vol[i] += lesion.deltas[i] * soft
        z_any = np.nonzero(mask.any(axis=(1, 2)))[0]
        y_any = np.nonzero(mask.any(axis=(0, 2)))[0]
        x_any = np.nonzero(mask.any(axis=(0, 1)))[0]
        if z_any.size == 0:
            continue
        box = (x_any[0] / w, y_any[0] / h, (x_any[-1] + 1) / w, (y_any[-1] + 1) / h)
        for i in range(p):
            if abs(lesion.deltas[i]) >= spec.visibility_hu:
                labels.append(WeakLabel(phase=i, z_start=int(z_any[0]),
                                        z_end=int(z_any[-1]), x_min=box[0],
                                        y_min=box[1], x_max=box[2], y_max=box[3]))
    bias = spec.vendor_bias
    if spec.bias_range:
        bias += float(rng.uniform(-spec.bias_range, spec.bias_range))
    vol += bias
    return PhaseVolume(data=vol, labels=labels, bias=bias)


# stream domain 2; model init and iteration streams take 0 and 1
RNG_PHANTOM = 2


def phantom_seeds(seed: int, count: int) -> list:
    """Per-volume seeds derived from one corpus seed. Each is recorded in the
    manifest so a single volume can be rebuilt without the others."""
    return [int(np.random.SeedSequence(entropy=seed, spawn_key=(RNG_PHANTOM, i))
                .generate_state(1, np.uint64)[0]) for i in range(count)]


def generate_corpus(spec: PhantomSpec, seed: Optional[int] = None,
                    count: Optional[int] = None):
    """Generate `count` phantoms (default spec.n_volumes) from one spec.
    Returns (volumes, per-volume seeds)."""
    n = spec.n_volumes if count is None else int(count)
    seeds = phantom_seeds(spec.seed if seed is None else int(seed), n)
    return [generate_phantom(spec, np.random.default_rng(s)) for s in seeds], seeds


# ---------------------------------------------------------------------------
# folds

def split_folds(n_items: int, n_folds: int = 5, seed: int = 0):
    """Shuffled k-fold partition: list of (train_indices, val_indices)."""
    if n_items < n_folds:
        raise ConfigError(f"cannot split {n_items} items into {n_folds} folds")
    perm = np.random.default_rng(seed).permutation(n_items)
    sizes = np.full(n_folds, n_items // n_folds)
    sizes[:n_items % n_folds] += 1
    out = []
    start = 0
    for s in sizes:
        val = np.sort(perm[start:start + s])
        train = np.sort(np.concatenate([perm[:start], perm[start + s:]]))
        out.append((train.tolist(), val.tolist()))
        start += s
    return out
