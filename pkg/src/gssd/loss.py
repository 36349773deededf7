"""Multibox training objective: per-prior classification cross entropy with
online hard negative mining, plus smooth-L1 box regression on the matched
priors. Both terms are summed over the batch and divided by the total number
of matched priors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gssd import tensor as T
from gssd.tensor import ConfigError, Tensor


def parse_ratio(text: str) -> float:
    """Positive:negative mining ratio, e.g. "1:3" -> 3.0 negatives per positive."""
    parts = text.split(":")
    if len(parts) != 2:
        raise ConfigError(f"ratio must look like '1:3', got {text!r}")
    try:
        pos, neg = float(parts[0]), float(parts[1])
    except ValueError:
        raise ConfigError(f"ratio must look like '1:3', got {text!r}") from None
    if pos <= 0 or neg < 0:
        raise ConfigError(f"ratio parts must be positive, got {text!r}")
    return neg / pos


@dataclass
class LossConfig:
    neg_pos_ratio: float = 3.0
    loc_weight: float = 1.0

    @classmethod
    def from_ratio(cls, text: str) -> "LossConfig":
        return cls(neg_pos_ratio=parse_ratio(text))


@dataclass
class LossResult:
    total: Tensor       # scalar, differentiable
    conf: float         # classification term after normalization
    loc: float          # regression term after normalization
    n_matched: int
    n_negatives: int


def hard_negative_rows(logits: np.ndarray, labels: np.ndarray,
                       neg_pos_ratio: float) -> np.ndarray:
    """Flattened row indices of the mined negatives.

    Per image, keeps the `ratio * n_positives` background priors whose
    background cross entropy is highest (the confidently-wrong ones); ties
    keep the lower prior index.
    """
    n, p, _ = logits.shape
    z = logits.reshape(n * p, -1).astype(np.float64)
    zmax = z.max(axis=1, keepdims=True)
    bg_ce = (zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))) - z[:, 0]
    rows = []
    flat_labels = labels.reshape(n * p)
    for i in range(n):
        lo = i * p
        img_labels = flat_labels[lo:lo + p]
        n_pos = int((img_labels > 0).sum())
        if n_pos == 0:
            continue
        neg_local = np.nonzero(img_labels == 0)[0]
        want = min(int(neg_pos_ratio * n_pos), neg_local.size)
        if want == 0:
            continue
        order = np.argsort(-bg_ce[lo + neg_local], kind="stable")
        rows.append(lo + neg_local[order[:want]])
    if not rows:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate(rows).astype(np.int64)


def multibox_loss(conf: Tensor, loc: Tensor, labels: np.ndarray,
                  loc_targets: np.ndarray, neg_pos_ratio: float = 3.0,
                  loc_weight: float = 1.0) -> LossResult:
    """conf: [N,P,K] logits; loc: [N,P,4] offsets; labels: [N,P] class per
    prior (0 background); loc_targets: [N,P,4] encoded offsets.

    A batch with no matched priors yields an exact zero with no gradient.
    """
    if conf.ndim != 3 or loc.ndim != 3 or loc.shape[2] != 4:
        raise ConfigError(f"expected conf [N,P,K] and loc [N,P,4], got "
                          f"{conf.shape} and {loc.shape}")
    n, p, k = conf.shape
    labels = np.asarray(labels, dtype=np.int64)
    loc_targets = np.asarray(loc_targets)
    if labels.shape != (n, p) or loc_targets.shape != (n, p, 4):
        raise ConfigError(f"targets shaped {labels.shape}/{loc_targets.shape} do not "
                          f"match predictions [{n},{p}]")
    if labels.min() < 0 or labels.max() >= k:
        raise ConfigError(f"class targets must lie in [0,{k})")

    flat_labels = labels.reshape(n * p)
    pos_rows = np.nonzero(flat_labels > 0)[0]
    n_matched = int(pos_rows.size)
    if n_matched == 0:
        zero = Tensor(np.zeros(()))
        return LossResult(total=zero, conf=0.0, loc=0.0, n_matched=0, n_negatives=0)

    neg_rows = hard_negative_rows(conf.data, labels, neg_pos_ratio)
    sel = np.concatenate([pos_rows, neg_rows])

    conf_flat = T.reshape(conf, (n * p, k))
    ce = T.softmax_cross_entropy(T.take_rows(conf_flat, sel), flat_labels[sel])
    conf_sum = T.sum_all(ce)

    loc_flat = T.reshape(loc, (n * p, 4))
    pred = T.take_rows(loc_flat, pos_rows)
    target = Tensor(loc_targets.reshape(n * p, 4)[pos_rows])
    loc_sum = T.sum_all(T.smooth_l1(pred, target))

    weighted_loc = T.mul(loc_sum, loc_weight) if loc_weight != 1.0 else loc_sum
    total = T.mul(T.add(conf_sum, weighted_loc), 1.0 / n_matched)
    return LossResult(total=total,
                      conf=float(conf_sum.data) / n_matched,
                      loc=float(weighted_loc.data) / n_matched,
                      n_matched=n_matched,
                      n_negatives=int(neg_rows.size))
