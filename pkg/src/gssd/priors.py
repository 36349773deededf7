"""Default-box machinery: prior grids over the feature-map ladder, IoU,
ground-truth matching, offset encoding, and greedy NMS.

All box coordinates are normalized to [0, 1] relative to the square input.
Corner form is (x_min, y_min, x_max, y_max); center form is (cx, cy, w, h).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from gssd.model import ModelConfig, tap_sizes
from gssd.tensor import ConfigError

CENTER_VARIANCE = 0.1
SIZE_VARIANCE = 0.2
MATCH_THRESHOLD = 0.5
NMS_THRESHOLD = 0.45
NMS_TOP_K = 200


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return max(0.0, self.width) * max(0.0, self.height)

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    return float(iou_matrix(a.as_array()[None], b.as_array()[None])[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between corner boxes a [N,4] and b [M,4] -> [N,M]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def corner_to_center(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    wh = boxes[..., 2:] - boxes[..., :2]
    c = (boxes[..., 2:] + boxes[..., :2]) / 2
    return np.concatenate([c, wh], axis=-1)


def center_to_corner(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


@dataclass
class PriorSet:
    """Generated default boxes in flattening order (map, cell row, cell col,
    box index). Boxes near the frame edge may extend past [0,1]; they are
    left unclipped so centers stay on the cell grid."""

    centers: np.ndarray     # [P,4] cx, cy, w, h
    corners: np.ndarray     # [P,4]
    map_index: np.ndarray   # [P] which feature map each prior came from
    scale: np.ndarray       # [P] prior scale before clipping
    aspect: np.ndarray      # [P]
    variances: tuple = (CENTER_VARIANCE, SIZE_VARIANCE)

    def __len__(self) -> int:
        return self.centers.shape[0]


def _cell_boxes(scale: float, next_scale: float, n_boxes: int):
    """(w, h, scale, aspect) of every box style for one cell."""
    mid = math.sqrt(scale * next_scale)
    out = [(scale, scale, scale, 1.0), (mid, mid, mid, 1.0)]
    ratios = (2.0, 0.5) if n_boxes == 4 else (2.0, 0.5, 3.0, 1.0 / 3.0)
    for r in ratios:
        out.append((scale * math.sqrt(r), scale / math.sqrt(r), scale, r))
    return out


def generate_priors(config: ModelConfig) -> PriorSet:
    config.validate()
    sizes = tap_sizes(config)
    m = config.n_maps
    scales = [config.scale_min + (config.scale_max - config.scale_min) * k / (m - 1)
              for k in range(m)] + [1.0]

    centers, map_index, scale_meta, aspect_meta = [], [], [], []
    for k, (f, n_boxes) in enumerate(zip(sizes, config.boxes_per_cell)):
        styles = _cell_boxes(scales[k], scales[k + 1], n_boxes)
        for row in range(f):
            cy = (row + 0.5) / f
            for col in range(f):
                cx = (col + 0.5) / f
                for w, h, s, a in styles:
                    centers.append((cx, cy, w, h))
                    scale_meta.append(s)
                    aspect_meta.append(a)
        map_index.extend([k] * (f * f * n_boxes))

    centers = np.array(centers, dtype=np.float64)
    return PriorSet(centers=centers, corners=center_to_corner(centers),
                    map_index=np.array(map_index, dtype=np.int64),
                    scale=np.array(scale_meta), aspect=np.array(aspect_meta))


def encode(gt_corners: np.ndarray, prior_centers: np.ndarray,
           variances=(CENTER_VARIANCE, SIZE_VARIANCE)) -> np.ndarray:
    """Offsets that map priors onto ground-truth boxes (both [M,4])."""
    gt = corner_to_center(gt_corners)
    if np.any(gt[..., 2:] <= 0):
        raise ConfigError("cannot encode a box with non-positive width/height")
    out = np.empty_like(gt)
    out[..., :2] = (gt[..., :2] - prior_centers[..., :2]) / (variances[0] * prior_centers[..., 2:])
    out[..., 2:] = np.log(gt[..., 2:] / prior_centers[..., 2:]) / variances[1]
    return out


def decode(loc: np.ndarray, prior_centers: np.ndarray,
           variances=(CENTER_VARIANCE, SIZE_VARIANCE)) -> np.ndarray:
    """Inverse of encode: offsets [P,4] -> corner boxes [P,4]."""
    loc = np.asarray(loc, dtype=np.float64)
    c = np.empty_like(loc)
    c[..., :2] = prior_centers[..., :2] + loc[..., :2] * variances[0] * prior_centers[..., 2:]
    c[..., 2:] = prior_centers[..., 2:] * np.exp(loc[..., 2:] * variances[1])
    return center_to_corner(c)


@dataclass
class MatchResult:
    labels: np.ndarray       # [P] class per prior, 0 = background
    gt_index: np.ndarray     # [P] matched ground-truth index, -1 for background
    loc_targets: np.ndarray  # [P,4] encoded offsets, zeros for background
    n_matched: int


def match(priors: PriorSet, gt_corners: np.ndarray, gt_classes: np.ndarray,
          threshold: float = MATCH_THRESHOLD) -> MatchResult:
    """Two-phase assignment. Each ground truth first claims its best still
    unclaimed prior (so every one is matched), then every remaining prior
    joins the ground truth it overlaps at `threshold`+ IoU. Ties break toward
    lower indices.
    """
    p = len(priors)
    gt_corners = np.asarray(gt_corners, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    g = gt_corners.shape[0]
    if gt_classes.shape[0] != g:
        raise ConfigError(f"{g} boxes but {gt_classes.shape[0]} class labels")
    if np.any(gt_classes < 1):
        raise ConfigError("ground-truth classes must be >= 1 (0 is background)")
    if g > p:
        raise ConfigError(f"more ground-truth boxes ({g}) than priors ({p})")

    gt_index = np.full(p, -1, dtype=np.int64)
    if g:
        overlaps = iou_matrix(priors.corners, gt_corners)  # [P,G]
        for j in range(g):
            col = overlaps[:, j].copy()
            col[gt_index >= 0] = -1.0
            gt_index[int(np.argmax(col))] = j
        free = gt_index < 0
        best_gt = np.argmax(overlaps, axis=1)
        best_iou = overlaps[np.arange(p), best_gt]
        take = free & (best_iou >= threshold)
        gt_index[take] = best_gt[take]

    matched = gt_index >= 0
    labels = np.zeros(p, dtype=np.int64)
    loc_targets = np.zeros((p, 4), dtype=np.float64)
    if matched.any():
        idx = gt_index[matched]
        labels[matched] = gt_classes[idx]
        loc_targets[matched] = encode(gt_corners[idx], priors.centers[matched],
                                      priors.variances)
    return MatchResult(labels=labels, gt_index=gt_index, loc_targets=loc_targets,
                       n_matched=int(matched.sum()))


def nms(corners: np.ndarray, scores: np.ndarray, iou_threshold: float = NMS_THRESHOLD,
        top_k: int = NMS_TOP_K) -> list:
    """Greedy suppression; returns kept indices, highest score first.
    Score ties keep the lower original index."""
    corners = np.asarray(corners, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size and len(keep) < top_k:
        i = int(order[0])
        keep.append(i)
        if order.size == 1:
            break
        rest = order[1:]
        overlap = iou_matrix(corners[i][None], corners[rest])[0]
        order = rest[overlap <= iou_threshold]
    return keep
