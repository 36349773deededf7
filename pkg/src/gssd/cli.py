"""Command-line pipeline: phantom generation, training, cross-validation,
single-volume detection, and overlay rendering.

A run is described by one UTF-8 key=value file. The top-level keys `seed`
(mandatory), `portal_only`, and `portal_phase` pick the run mode; the dotted
sections `model.*`, `train.*`, `augment.*`, and `eval.*` mirror the library
config dataclasses. The resolved text is echoed into every checkpoint so a
trained model carries its own provenance.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from gssd.data import (AugmentConfig, ManifestEntry, PhantomSpec, PhaseVolume,
                       SliceDataset, generate_corpus, load_labels,
                       load_manifest, load_volume, save_labels, save_manifest,
                       save_volume, window_hu)
from gssd.evaluate import (DISPLAY_THRESHOLD, SWEEP_THRESHOLD, MATCH_IOU,
                           Detection, cross_validate, detect_volume,
                           volume_ground_truth)
from gssd.model import ModelConfig, build_model, load_model
from gssd.priors import NMS_THRESHOLD, NMS_TOP_K
from gssd.tensor import ConfigError
from gssd.train import (TrainConfig, TrainingDiverged, build_rng,
                        load_train_state, train)

ENV_SEED = "GSSD_SEED"

GT_COLOR = (0, 255, 0)
DET_COLOR = (255, 0, 0)

DETECTIONS_HEADER = "slice,x_min,y_min,x_max,y_max,class,confidence"


# ---------------------------------------------------------------------------
# run configuration

@dataclass
class EvalSettings:
    """Scoring knobs shared by `cv` and `detect`."""
    conf_threshold: float = SWEEP_THRESHOLD
    nms_iou: float = NMS_THRESHOLD
    top_k: int = NMS_TOP_K
    match_iou: float = MATCH_IOU
    folds: int = 5


_SECTIONS = {"model": ModelConfig, "train": TrainConfig,
             "augment": AugmentConfig, "eval": EvalSettings}
_TOP_LEVEL = {"seed": int, "portal_only": bool, "portal_phase": int}
# seeding has exactly one source of truth: the top-level key
_REJECTED = {"train.seed": "use the top-level `seed` key"}


def _coerce(default, val: str, where: str, key: str):
    """Parse `val` to the type of a field's default value."""
    try:
        if isinstance(default, bool):
            low = val.lower()
            if low in ("1", "true", "yes"):
                return True
            if low in ("0", "false", "no"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(val)
        if isinstance(default, float):
            return float(val)
        if isinstance(default, tuple):
            elem = int if (default and isinstance(default[0], int)) else float
            return tuple(elem(x) for x in val.split(","))
    except ValueError:
        raise ConfigError(f"{where}: bad value for {key}: {val!r}") from None
    raise ConfigError(f"{where}: cannot set {key} from text")


@dataclass
class RunConfig:
    seed: int
    portal_only: bool = False
    portal_phase: int = 2
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        top: dict = {}
        section_values: dict = {name: {} for name in _SECTIONS}
        defaults = {name: sec() for name, sec in _SECTIONS.items()}
        for ln, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {ln}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            where = f"line {ln}"
            if key in _REJECTED:
                raise ConfigError(f"{where}: {key} is not allowed; "
                                  f"{_REJECTED[key]}")
            if key in _TOP_LEVEL:
                top[key] = _coerce(_TOP_LEVEL[key](), val, where, key)
                continue
            section, _, field_name = key.partition(".")
            if section in defaults and field_name:
                obj = defaults[section]
                if not any(f.name == field_name for f in fields(obj)):
                    raise ConfigError(f"{where}: unknown key {key!r}")
                section_values[section][field_name] = _coerce(
                    getattr(obj, field_name), val, where, key)
                continue
            raise ConfigError(f"{where}: unknown key {key!r}")
        if "seed" not in top:
            raise ConfigError("config must set a top-level `seed`")
        run = cls(seed=top["seed"],
                  portal_only=top.get("portal_only", False),
                  portal_phase=top.get("portal_phase", 2),
                  model=ModelConfig(**section_values["model"]),
                  train=TrainConfig(**section_values["train"]),
                  augment=AugmentConfig(**section_values["augment"]),
                  eval=EvalSettings(**section_values["eval"]))
        run.train.seed = run.seed
        run.validate()
        return run

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        if self.model.slices_per_phase != 3:
            raise ConfigError("the volume pipeline stacks exactly 3 "
                              "neighbouring slices per phase")
        if not 0 <= self.portal_phase < self.model.phases:
            raise ConfigError(f"portal_phase {self.portal_phase} out of range "
                              f"for {self.model.phases} phases")
        e = self.eval
        if not 0.0 <= e.conf_threshold < 1.0:
            raise ConfigError(f"eval.conf_threshold must be in [0, 1), "
                              f"got {e.conf_threshold}")
        if not (0.0 < e.nms_iou < 1.0 and 0.0 < e.match_iou < 1.0):
            raise ConfigError("eval IoU thresholds must be in (0, 1)")
        if e.top_k < 1 or e.folds < 2:
            raise ConfigError("eval.top_k must be >= 1 and eval.folds >= 2")
        a = self.augment
        if not 0.0 <= a.mirror_prob <= 1.0:
            raise ConfigError(f"augment.mirror_prob must be a probability, "
                              f"got {a.mirror_prob}")
        if not 0.0 < a.scale_min <= a.scale_max:
            raise ConfigError(f"bad augment scale range "
                              f"({a.scale_min}, {a.scale_max})")

    def to_text(self) -> str:
        lines = [f"seed = {self.seed}",
                 f"portal_only = {self.portal_only}",
                 f"portal_phase = {self.portal_phase}"]
        for name, obj in (("model", self.model), ("train", self.train),
                          ("augment", self.augment), ("eval", self.eval)):
            for f in fields(obj):
                if name == "train" and f.name == "seed":
                    continue
                v = getattr(obj, f.name)
                if isinstance(v, tuple):
                    v = ",".join(str(x) for x in v)
                lines.append(f"{name}.{f.name} = {v}")
        return "\n".join(lines) + "\n"


def resolve_seed(run: RunConfig, flag: Optional[int]) -> None:
    """CLI flag beats the GSSD_SEED env var beats the config file."""
    seed = run.seed
    env = os.environ.get(ENV_SEED)
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise ConfigError(f"{ENV_SEED} must be an integer, "
                              f"got {env!r}") from None
    if flag is not None:
        seed = flag
    run.seed = seed
    run.train.seed = seed


def _require_matching_config(ckpt_text: str, run: RunConfig,
                             ckpt_path) -> None:
    try:
        saved = RunConfig.parse(ckpt_text)
    except ConfigError as exc:
        raise ConfigError(f"{ckpt_path}: checkpoint does not carry a full "
                          f"run config ({exc}); cannot resume") from None
    diffs = []
    for top in ("seed", "portal_only", "portal_phase"):
        a, b = getattr(saved, top), getattr(run, top)
        if a != b:
            diffs.append(f"{top} ({a} vs {b})")
    for name in _SECTIONS:
        a_obj, b_obj = getattr(saved, name), getattr(run, name)
        for f in fields(a_obj):
            if name == "train" and f.name == "seed":
                continue
            a, b = getattr(a_obj, f.name), getattr(b_obj, f.name)
            if a != b:
                diffs.append(f"{name}.{f.name} ({a} vs {b})")
    if diffs:
        raise ConfigError(f"config does not match checkpoint {ckpt_path}: "
                          + ", ".join(diffs))


# ---------------------------------------------------------------------------
# shared plumbing

def _read_text(path) -> str:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{p}: no such file")
    return p.read_text(encoding="utf-8")


def load_data_dir(path) -> List[PhaseVolume]:
    """Volumes and labels listed by `manifest.csv` in a data directory."""
    root = Path(path)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise ConfigError(f"{manifest}: no such file")
    volumes = []
    for e in load_manifest(manifest):
        data = load_volume(root / e.volume)
        labels = load_labels(root / e.labels)
        volumes.append(PhaseVolume(data=data, labels=labels, bias=e.bias))
    return volumes


def check_volumes(volumes: List[PhaseVolume], cfg: ModelConfig,
                  where) -> None:
    if not volumes:
        raise ConfigError(f"{where}: manifest lists no volumes")
    for i, v in enumerate(volumes):
        if v.n_phases != cfg.phases:
            raise ConfigError(f"{where}: volume {i} has {v.n_phases} phases, "
                              f"model expects {cfg.phases}")
        if v.data.shape[2:] != (cfg.input_size, cfg.input_size):
            raise ConfigError(
                f"{where}: volume {i} slices are "
                f"{v.data.shape[2]}x{v.data.shape[3]}, model expects "
                f"{cfg.input_size}x{cfg.input_size}")


def write_detections(path, detections: List[Detection]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(DETECTIONS_HEADER + "\n")
        for d in detections:
            f.write(f"{d.slice_index},{d.x_min:.6f},{d.y_min:.6f},"
                    f"{d.x_max:.6f},{d.y_max:.6f},{d.cls},{d.confidence:.6f}\n")


def read_detections(path) -> List[Detection]:
    lines = _read_text(path).splitlines()
    if not lines or lines[0] != DETECTIONS_HEADER:
        raise ConfigError(f"{path}: expected header {DETECTIONS_HEADER!r}")
    out = []
    for ln, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 7:
            raise ConfigError(f"{path}:{ln}: expected 7 columns")
        try:
            out.append(Detection(int(parts[0]), float(parts[1]),
                                 float(parts[2]), float(parts[3]),
                                 float(parts[4]), int(parts[5]),
                                 float(parts[6])))
        except ValueError as exc:
            raise ConfigError(f"{path}:{ln}: {exc}") from None
    return out


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary PPM (P6) from an [H, W, 3] uint8 array."""
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def draw_box(rgb: np.ndarray, box, color) -> None:
    """1-px rectangle from unit-square corners, clamped to the image."""
    h, w = rgb.shape[:2]
    x0 = min(max(int(math.floor(box[0] * w)), 0), w - 1)
    y0 = min(max(int(math.floor(box[1] * h)), 0), h - 1)
    x1 = min(max(int(math.ceil(box[2] * w)) - 1, 0), w - 1)
    y1 = min(max(int(math.ceil(box[3] * h)) - 1, 0), h - 1)
    rgb[y0, x0:x1 + 1] = color
    rgb[y1, x0:x1 + 1] = color
    rgb[y0:y1 + 1, x0] = color
    rgb[y0:y1 + 1, x1] = color


def _check_threads(args) -> None:
    threads = getattr(args, "threads", 1)
    if threads < 1:
        raise ConfigError(f"--threads must be >= 1, got {threads}")
    if threads > 1:
        print("note: multi-threaded execution is not implemented; "
              "running single-threaded", file=sys.stderr)


# ---------------------------------------------------------------------------
# commands

def cmd_phantom_gen(args) -> int:
    spec = PhantomSpec.parse(_read_text(args.spec))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    volumes, seeds = generate_corpus(spec, seed=args.seed, count=args.count)
    entries = []
    for i, (vol, s) in enumerate(zip(volumes, seeds)):
        vol_name, lab_name = f"vol_{i:03d}.gsv", f"vol_{i:03d}.txt"
        save_volume(out / vol_name, vol.data)
        save_labels(out / lab_name, vol.labels)
        entries.append(ManifestEntry(volume=vol_name, labels=lab_name,
                                     bias=vol.bias, seed=s))
    save_manifest(out / "manifest.csv", entries)
    print(f"wrote {len(entries)} volumes to {out}")
    return 0


def cmd_train(args) -> int:
    _check_threads(args)
    run = RunConfig.parse(_read_text(args.config))
    resolve_seed(run, args.seed)
    volumes = load_data_dir(args.data)
    check_volumes(volumes, run.model, args.data)
    start_iter, velocity = 0, None
    if args.resume:
        model, ckpt_text, start_iter, velocity = load_train_state(args.resume)
        _require_matching_config(ckpt_text, run, args.resume)
    else:
        model = build_model(run.model, build_rng(run.seed))
    dataset = SliceDataset(volumes, portal_only=run.portal_only,
                           portal_phase=run.portal_phase)
    result = train(model, dataset, run.train, args.out,
                   config_text=run.to_text(), start_iteration=start_iter,
                   velocity=velocity, augment_cfg=run.augment)
    print(f"trained {result.iterations_run} iterations; final loss "
          f"{result.last_loss:.4f}; checkpoint {result.checkpoint}")
    return 0


def cmd_cv(args) -> int:
    _check_threads(args)
    run = RunConfig.parse(_read_text(args.config))
    resolve_seed(run, args.seed)
    volumes = load_data_dir(args.data)
    check_volumes(volumes, run.model, args.data)
    results = cross_validate(
        volumes, run.model, run.train, args.out,
        n_folds=run.eval.folds, conf_threshold=run.eval.conf_threshold,
        nms_iou=run.eval.nms_iou, top_k=run.eval.top_k,
        match_iou=run.eval.match_iou, portal_only=run.portal_only,
        portal_phase=run.portal_phase, augment_cfg=run.augment,
        config_text=run.to_text())
    for r in results:
        if r.error:
            print(f"fold {r.fold}: FAILED: {r.error}", file=sys.stderr)
        else:
            print(f"fold {r.fold}: best AP {r.best_ap:.4f} at iteration "
                  f"{r.best_iteration}")
    clean = [r for r in results if not r.error]
    if clean:
        mean = sum(r.best_ap for r in clean) / len(clean)
        print(f"mean best AP {mean:.4f} over {len(clean)} folds; report "
              f"{Path(args.out) / 'report.csv'}")
    return 0 if clean else 1


def cmd_detect(args) -> int:
    _check_threads(args)
    if not Path(args.checkpoint).is_file():
        raise ConfigError(f"{args.checkpoint}: no such file")
    model, config_text, _ = load_model(args.checkpoint)
    portal_only, portal_phase, ev = False, 2, EvalSettings()
    try:
        saved = RunConfig.parse(config_text)
        portal_only = saved.portal_only
        portal_phase = saved.portal_phase
        ev = saved.eval
    except ConfigError:
        pass   # bare library checkpoint: fall back to defaults
    data = load_volume(args.volume)
    vol = PhaseVolume(data=data, labels=[])
    dets = detect_volume(model, vol, conf_threshold=args.conf,
                         nms_iou=ev.nms_iou, top_k=ev.top_k,
                         portal_only=portal_only, portal_phase=portal_phase)
    write_detections(args.out, dets)
    print(f"{len(dets)} detections above {args.conf:g} -> {args.out}")
    return 0


def cmd_overlay(args) -> int:
    data = load_volume(args.volume)
    dets = read_detections(args.detections)
    if args.labels is not None:
        if not Path(args.labels).is_file():
            raise ConfigError(f"{args.labels}: no such file")
        labels = load_labels(args.labels)
    else:
        sidecar = Path(args.volume).with_suffix(".txt")
        labels = load_labels(sidecar) if sidecar.is_file() else []
    vol = PhaseVolume(data=data, labels=labels)
    if not 0 <= args.phase < vol.n_phases:
        raise ConfigError(f"phase {args.phase} out of range for "
                          f"{vol.n_phases}-phase volume")
    over = [d.slice_index for d in dets if not 0 <= d.slice_index < vol.depth]
    if over:
        raise ConfigError(f"{args.detections}: slice {over[0]} outside "
                          f"volume of depth {vol.depth}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    windowed = window_hu(data[args.phase])
    gt_by_slice: dict = {}
    for t in volume_ground_truth(vol):
        gt_by_slice.setdefault(t.slice_index, []).append(t)
    det_by_slice: dict = {}
    for d in dets:
        det_by_slice.setdefault(d.slice_index, []).append(d)
    for z in range(vol.depth):
        gray = np.clip(windowed[z] * 255.0, 0.0, 255.0).astype(np.uint8)
        rgb = np.stack([gray, gray, gray], axis=-1)
        for t in gt_by_slice.get(z, []):
            draw_box(rgb, t.box, GT_COLOR)
        for d in det_by_slice.get(z, []):
            draw_box(rgb, d.box(), DET_COLOR)
        write_ppm(out / f"slice_{z:03d}.ppm", rgb)
    print(f"wrote {vol.depth} overlays to {out}")
    return 0


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gssd",
        description="multi-phase volumetric lesion detector")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("phantom-gen", help="generate a synthetic study corpus")
    g.add_argument("--spec", required=True, help="phantom key=value spec file")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--count", type=int, default=None,
                   help="number of volumes (default: spec n_volumes)")
    g.add_argument("--seed", type=int, default=None,
                   help="corpus seed (default: spec seed)")
    g.set_defaults(func=cmd_phantom_gen)

    t = sub.add_parser("train", help="train on a data directory")
    t.add_argument("--config", required=True, help="run config file")
    t.add_argument("--data", required=True, help="directory with manifest.csv")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--threads", type=int, default=1)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("cv", help="k-fold cross-validation")
    c.add_argument("--config", required=True, help="run config file")
    c.add_argument("--data", required=True, help="directory with manifest.csv")
    c.add_argument("--out", required=True, help="output directory")
    c.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    c.add_argument("--threads", type=int, default=1)
    c.set_defaults(func=cmd_cv)

    d = sub.add_parser("detect", help="detect lesions in one volume")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--volume", required=True)
    d.add_argument("--out", required=True, help="detections CSV path")
    d.add_argument("--conf", type=float, default=DISPLAY_THRESHOLD,
                   help="confidence cutoff (default %(default)s)")
    d.add_argument("--threads", type=int, default=1)
    d.set_defaults(func=cmd_detect)

    o = sub.add_parser("overlay", help="render detections onto slices")
    o.add_argument("--volume", required=True)
    o.add_argument("--detections", required=True, help="detections CSV")
    o.add_argument("--out", required=True, help="output directory")
    o.add_argument("--labels", default=None,
                   help="ground-truth label file (default: volume sidecar)")
    o.add_argument("--phase", type=int, default=2,
                   help="phase rendered as the background image")
    o.set_defaults(func=cmd_overlay)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
