"""Inference and scoring: turn a trained detector into per-slice boxes,
measure average precision against weak labels, run k-fold cross-validation,
and time the forward pass."""

import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from .data import SliceDataset, fuse_cross_phase, split_folds, stack_phases, window_hu
from .model import ModelConfig, build_model
from .priors import NMS_THRESHOLD, NMS_TOP_K, decode, generate_priors, iou_matrix, nms
from .tensor import ConfigError, Tensor
from .train import TrainConfig, build_rng, train

DISPLAY_THRESHOLD = 0.3   # cutoff when reporting boxes to a reader
SWEEP_THRESHOLD = 0.01    # low cutoff tracing the full PR curve for AP
MATCH_IOU = 0.5


@dataclass(frozen=True)
class Detection:
    """One predicted box on one axial slice, coordinates in [0, 1]."""
    slice_index: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    cls: int
    confidence: float

    def box(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max],
                        dtype=np.float64)


@dataclass(frozen=True)
class GroundTruthBox:
    slice_index: int
    box: tuple
    cls: int


def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _postprocess_slice(loc: np.ndarray, prob: np.ndarray, prior_centers: np.ndarray,
                       slice_index: int, conf_threshold: float, nms_iou: float,
                       top_k: int) -> List[Detection]:
    boxes = decode(loc, prior_centers)
    np.clip(boxes, 0.0, 1.0, out=boxes)
    out: List[Detection] = []
    for cls in range(1, prob.shape[1]):
        scores = prob[:, cls]
        # strictly above: an exactly borderline probability does not count
        idx = np.nonzero(scores > conf_threshold)[0]
        if idx.size == 0:
            continue
        for j in nms(boxes[idx], scores[idx], nms_iou, top_k):
            k = idx[j]
            out.append(Detection(slice_index, boxes[k, 0], boxes[k, 1],
                                 boxes[k, 2], boxes[k, 3], cls,
                                 float(scores[k])))
    return out


def detect_volume(model, volume, conf_threshold: float = SWEEP_THRESHOLD,
                  nms_iou: float = NMS_THRESHOLD, top_k: int = NMS_TOP_K,
                  batch_size: int = 8, portal_only: bool = False,
                  portal_phase: int = 2,
                  slice_indices: Optional[Sequence[int]] = None) -> List[Detection]:
    """Run the detector over every axial slice of a raw volume (or only
    `slice_indices`) and return thresholded, per-class-suppressed boxes.
    Slices come back in ascending order; within a slice, by class then by
    descending confidence."""
    cfg = model.config
    windowed = window_hu(volume.data - volume.bias)
    if portal_only:
        if portal_phase >= volume.n_phases:
            raise ConfigError(f"portal phase {portal_phase} out of range")
        windowed = np.repeat(windowed[portal_phase:portal_phase + 1],
                             volume.n_phases, axis=0)

    zs = list(slice_indices) if slice_indices is not None else list(range(volume.depth))
    if not zs:
        return []
    probe = stack_phases(windowed, zs[0])
    want = (cfg.phases * cfg.slices_per_phase, cfg.input_size, cfg.input_size)
    if probe.shape != want:
        raise ConfigError(
            f"volume yields slice stacks of shape {probe.shape}, "
            f"model expects {want}")

    priors = generate_priors(cfg)
    detections: List[Detection] = []
    for start in range(0, len(zs), batch_size):
        chunk = zs[start:start + batch_size]
        x = np.stack([stack_phases(windowed, z) for z in chunk])
        loc, conf = model.forward(Tensor(x.astype(np.float32)), training=False)
        loc_np = loc.data.astype(np.float64)
        prob = _softmax_np(conf.data.astype(np.float64))
        for i, z in enumerate(chunk):
            detections.extend(_postprocess_slice(
                loc_np[i], prob[i], priors.centers, z,
                conf_threshold, nms_iou, top_k))
    return detections


def volume_ground_truth(volume, slice_offset: int = 0) -> List[GroundTruthBox]:
    """Fused per-slice ground truth for a volume, matching the boxes the
    training set would present. `slice_offset` shifts slice indices so
    several volumes can share one evaluation pool."""
    out: List[GroundTruthBox] = []
    for z in range(volume.depth):
        live = [lb for lb in volume.labels if lb.covers(z)]
        if not live:
            continue
        boxes, classes = fuse_cross_phase(
            np.array([lb.box() for lb in live]),
            np.array([lb.cls for lb in live]))
        for b, c in zip(boxes, classes):
            out.append(GroundTruthBox(z + slice_offset, tuple(float(v) for v in b),
                                      int(c)))
    return out


@dataclass
class APResult:
    ap: float               # mean over ground-truth classes
    per_class: dict         # class -> AP
    curves: dict            # class -> [N,2] array of (recall, precision) ranks


def write_pr_curve(path, result: APResult, cls: Optional[int] = None) -> None:
    """CSV of the raw PR staircase for one class (the only one by default)."""
    if cls is None:
        if len(result.curves) != 1:
            raise ConfigError("several classes present; pick one")
        cls = next(iter(result.curves))
    lines = ["recall,precision"]
    for r, p in result.curves.get(cls, ()):
        lines.append(f"{r:.6f},{p:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def _class_ap(dets: List[Detection], truths: List[GroundTruthBox],
              iou_threshold: float):
    n_gt = len(truths)
    if n_gt == 0 or not dets:
        return 0.0, np.zeros((0, 2))

    by_slice: dict = {}
    for ti, t in enumerate(truths):
        by_slice.setdefault(t.slice_index, []).append(ti)
    truth_boxes = np.array([t.box for t in truths], dtype=np.float64).reshape(-1, 4)

    order = sorted(range(len(dets)),
                   key=lambda i: (-dets[i].confidence, dets[i].slice_index, i))
    matched = np.zeros(n_gt, dtype=bool)
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for rank, di in enumerate(order):
        det = dets[di]
        cand = [ti for ti in by_slice.get(det.slice_index, ()) if not matched[ti]]
        if cand:
            ious = iou_matrix(det.box()[None, :], truth_boxes[cand])[0]
            best = int(np.argmax(ious))
            if ious[best] >= iou_threshold:
                matched[cand[best]] = True
                tp[rank] = 1
                continue
        fp[rank] = 1

    recall = np.cumsum(tp) / n_gt
    precision = np.cumsum(tp) / (np.cumsum(tp) + np.cumsum(fp))

    # all-point interpolation: area under the monotone precision envelope
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    ap = float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
    return ap, np.stack([recall, precision], axis=1)


def average_precision(detections: List[Detection], truths: List[GroundTruthBox],
                      iou_threshold: float = MATCH_IOU) -> APResult:
    """All-point interpolated AP, averaged over the classes that appear in
    the ground truth. Detections are ranked by descending confidence with
    ties broken by slice then insertion order; each is greedily matched to
    the highest-IoU unmatched truth on its slice.

    Detections without any truth score 0; nothing on either side leaves the
    metric undefined and raises."""
    classes = sorted({t.cls for t in truths})
    if not classes:
        if not detections:
            raise ConfigError(
                "average precision undefined: no truths and no detections")
        return APResult(0.0, {}, {})
    per_class, curves = {}, {}
    for cls in classes:
        per_class[cls], curves[cls] = _class_ap(
            [d for d in detections if d.cls == cls],
            [t for t in truths if t.cls == cls], iou_threshold)
    return APResult(float(np.mean(list(per_class.values()))), per_class, curves)


def evaluate_model(model, volumes, conf_threshold: float = SWEEP_THRESHOLD,
                   nms_iou: float = NMS_THRESHOLD, top_k: int = NMS_TOP_K,
                   iou_threshold: float = MATCH_IOU, portal_only: bool = False,
                   portal_phase: int = 2, batch_size: int = 8) -> APResult:
    """AP of a model over whole volumes: every slice is scanned, so false
    alarms on lesion-free slices count against precision."""
    detections: List[Detection] = []
    truths: List[GroundTruthBox] = []
    offset = 0
    for vol in volumes:
        dets = detect_volume(model, vol, conf_threshold, nms_iou, top_k,
                             batch_size, portal_only, portal_phase)
        detections.extend(
            Detection(d.slice_index + offset, d.x_min, d.y_min, d.x_max,
                      d.y_max, d.cls, d.confidence) for d in dets)
        truths.extend(volume_ground_truth(vol, slice_offset=offset))
        offset += vol.depth
    return average_precision(detections, truths, iou_threshold)


# ---------------------------------------------------------------------------
# cross-validation

@dataclass
class FoldResult:
    fold: int
    n_train: int
    n_val: int
    best_iteration: int
    best_ap: float
    final_ap: float
    error: str = ""


def write_cv_report(path, results: List[FoldResult]) -> None:
    """Per-fold summary plus a mean row. A failed fold reports zero AP; its
    message lands in the fold directory, not in this table."""
    lines = ["fold,best_ap,best_iter"]
    for r in results:
        lines.append(f"{r.fold},{r.best_ap:.6f},{r.best_iteration}")
    clean = [r for r in results if not r.error]
    if clean:
        lines.append(f"mean,{np.mean([r.best_ap for r in clean]):.6f},")
    Path(path).write_text("\n".join(lines) + "\n")


def cross_validate(volumes, model_config: ModelConfig, train_config: TrainConfig,
                   out_dir, n_folds: int = 5,
                   conf_threshold: float = SWEEP_THRESHOLD,
                   nms_iou: float = NMS_THRESHOLD, top_k: int = NMS_TOP_K,
                   match_iou: float = MATCH_IOU,
                   portal_only: bool = False, portal_phase: int = 2,
                   augment_cfg=None, config_text: Optional[str] = None,
                   fold_hook: Optional[Callable] = None) -> List[FoldResult]:
    """Train and score one model per fold, tracking the best validation AP
    across the periodic evaluations (train_config.eval_every) and the final
    state. A fold that fails is recorded with its error message and zero AP
    instead of aborting the sweep.

    Per fold, `fold_<k>/` holds the training log and checkpoints plus
    `val_ap.csv` (iter,ap) and `pr_curve.csv` of the final model; `out_dir`
    gets the `report.csv` summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    folds = split_folds(len(volumes), n_folds, seed=train_config.seed)
    config_text = config_text or (model_config.to_text() + train_config.to_text())

    results: List[FoldResult] = []
    for k, (train_idx, val_idx) in enumerate(folds):
        fold_dir = out_dir / f"fold_{k}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        val_vols = [volumes[i] for i in val_idx]
        best = {"iteration": 0, "ap": -1.0}
        ap_rows = []

        def score(m):
            return evaluate_model(m, val_vols, conf_threshold=conf_threshold,
                                  nms_iou=nms_iou, top_k=top_k,
                                  iou_threshold=match_iou,
                                  portal_only=portal_only,
                                  portal_phase=portal_phase)

        try:
            model = build_model(model_config, build_rng(train_config.seed, k))
            dataset = SliceDataset([volumes[i] for i in train_idx],
                                   portal_only=portal_only,
                                   portal_phase=portal_phase)

            def hook(m, iteration):
                ap = score(m).ap
                ap_rows.append((iteration, ap))
                if ap > best["ap"]:
                    best.update(iteration=iteration, ap=ap)

            train(model, dataset, train_config, fold_dir,
                  config_text=config_text, augment_cfg=augment_cfg,
                  val_hook=hook if train_config.eval_every else None)
            final = score(model)
            ap_rows.append((train_config.iterations, final.ap))
            if final.ap > best["ap"]:
                best.update(iteration=train_config.iterations, ap=final.ap)
            if len(final.curves) == 1:
                write_pr_curve(fold_dir / "pr_curve.csv", final)
            results.append(FoldResult(k, len(train_idx), len(val_idx),
                                      best["iteration"], best["ap"], final.ap))
        except Exception as exc:
            (fold_dir / "error.txt").write_text(str(exc) + "\n")
            results.append(FoldResult(k, len(train_idx), len(val_idx),
                                      0, 0.0, 0.0, error=str(exc)))
        if ap_rows:
            (fold_dir / "val_ap.csv").write_text(
                "iter,ap\n" + "".join(f"{i},{a:.6f}\n" for i, a in ap_rows))
        if fold_hook:
            fold_hook(results[-1])
    write_cv_report(out_dir / "report.csv", results)
    return results


# ---------------------------------------------------------------------------
# timing

@dataclass
class BenchmarkResult:
    n_slices: int
    seconds_per_volume: float   # median over the timed runs
    slices_per_second: float
    times_s: tuple

    @property
    def spread(self) -> float:
        """(max - min) / median of the per-run times."""
        return (max(self.times_s) - min(self.times_s)) / self.seconds_per_volume


def benchmark(model, volume, repeats: int = 3, warmup: int = 1,
              **detect_kwargs) -> BenchmarkResult:
    """Wall-clock throughput of whole-volume detection: the median over at
    least three timed full runs, reported as seconds per volume and slices
    per second."""
    if repeats < 3:
        raise ConfigError(f"benchmark needs >= 3 runs, got {repeats}")
    for _ in range(warmup):
        detect_volume(model, volume, **detect_kwargs)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        detect_volume(model, volume, **detect_kwargs)
        times.append(time.perf_counter() - t0)
    median = statistics.median(times)
    return BenchmarkResult(n_slices=volume.depth, seconds_per_volume=median,
                           slices_per_second=volume.depth / median,
                           times_s=tuple(times))
