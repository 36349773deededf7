"""SGD training loop: per-iteration deterministic sampling and augmentation,
stepped learning rate, momentum with selective weight decay, CSV logging,
periodic checkpoints, and exact resume."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from gssd import tensor as T
from gssd.data import AugmentConfig, augment, jitter_boxes
from gssd.loss import multibox_loss
from gssd.model import Model, load_model, save_model
from gssd.priors import generate_priors, match
from gssd.tensor import ConfigError, Tensor

# spawn-key domains for per-purpose random streams
RNG_BUILD = 0
RNG_ITER = 1

NO_DECAY_SUFFIXES = (".bias", ".bn.gamma", ".bn.beta")


class TrainingDiverged(RuntimeError):
    """Loss or a gradient became non-finite; parameters on disk are from the
    last good step."""


@dataclass
class TrainConfig:
    iterations: int = 10000
    batch_size: int = 16
    lr: float = 0.0005
    momentum: float = 0.9
    weight_decay: float = 0.0005
    # schedule points as fractions of the run, so shorter runs keep the shape
    lr_drop_points: tuple = (0.5, 0.8)
    lr_drop_factor: float = 0.1
    neg_pos_ratio: float = 3.0
    loc_weight: float = 1.0
    jitter_alpha: float = 0.01
    seed: int = 0
    checkpoint_every: int = 1000
    eval_every: int = 500

    def validate(self) -> None:
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch_size must be positive")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ConfigError(f"bad lr/momentum: {self.lr}/{self.momentum}")
        if not all(0 < p <= 1 for p in self.lr_drop_points):
            raise ConfigError("lr_drop_points must be fractions in (0, 1]")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"train.{f.name} = {v}")
        return "\n".join(lines) + "\n"


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    """Stream for one training iteration, independent of all the others."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(RNG_ITER, iteration)))


def build_rng(seed: int, index: int = 0) -> np.random.Generator:
    """Model-initialization stream; `index` separates folds or restarts."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(RNG_BUILD, index)))


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    drops = sum(iteration >= round(p * cfg.iterations) for p in cfg.lr_drop_points)
    return cfg.lr * cfg.lr_drop_factor ** drops


def decayed(name: str) -> bool:
    return not name.endswith(NO_DECAY_SUFFIXES)


def sgd_step(params: dict, velocity: dict, lr: float, momentum: float,
             weight_decay: float) -> None:
    """v <- momentum*v + grad (+ wd*param for decayed names); param -= lr*v."""
    # scanned up front so a raise leaves every parameter untouched
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingDiverged(f"non-finite gradient in {name!r}")
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if weight_decay and decayed(name):
            g = g + weight_decay * p.data
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            velocity[name] = v
        v *= momentum
        v += g
        p.data -= lr * v


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    iterations_run: int
    last_loss: float


def train(model: Model, dataset, cfg: TrainConfig, out_dir,
          config_text: Optional[str] = None, start_iteration: int = 0,
          velocity: Optional[dict] = None,
          val_hook: Optional[Callable] = None,
          augment_cfg: Optional[AugmentConfig] = None) -> TrainResult:
    """Run (or continue) training. Resume is exact: each iteration's batch,
    augmentation, and jitter derive from a stream keyed by the absolute
    iteration index, so a run split across restarts is byte-identical to an
    uninterrupted one."""
    cfg.validate()
    if len(dataset) == 0:
        raise ConfigError("dataset has no lesion-bearing slices")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_text = config_text or (model.config.to_text() + cfg.to_text())
    priors = generate_priors(model.config)
    velocity = velocity if velocity is not None else {}
    aug_cfg = augment_cfg if augment_cfg is not None else AugmentConfig()
    dtype = T.default_dtype()

    log_path = out_dir / "train_log.csv"
    mode = "a" if start_iteration > 0 and log_path.exists() else "w"
    last_loss = float("nan")
    it = start_iteration
    with open(log_path, mode, encoding="utf-8") as log:
        if mode == "w":
            log.write("iter,lr,loss_total,loss_conf,loss_loc\n")
        for it in range(start_iteration, cfg.iterations):
            rng = iteration_rng(cfg.seed, it)
            idx = rng.integers(0, len(dataset), size=cfg.batch_size)
            batch_x = np.empty((cfg.batch_size, model.config.in_channels,
                                model.config.input_size, model.config.input_size),
                               dtype=dtype)
            batch_labels = np.empty((cfg.batch_size, len(priors)), dtype=np.int64)
            batch_targets = np.empty((cfg.batch_size, len(priors), 4), dtype=dtype)
            for b, i in enumerate(idx):
                channels, boxes, classes = dataset.sample(int(i))
                channels, boxes, classes = augment(channels, boxes, classes, rng, aug_cfg)
                boxes = jitter_boxes(boxes, rng, alpha=cfg.jitter_alpha)
                res = match(priors, boxes, classes)
                batch_x[b] = channels
                batch_labels[b] = res.labels
                batch_targets[b] = res.loc_targets
            lr = lr_at(cfg, it)
            loc, conf = model.forward(Tensor(batch_x), training=True)
            res = multibox_loss(conf, loc, batch_labels, batch_targets,
                                neg_pos_ratio=cfg.neg_pos_ratio,
                                loc_weight=cfg.loc_weight)
            total = float(res.total.data)
            if not np.isfinite(total):
                _save_state(out_dir / "final.ckpt", model, config_text, velocity, it)
                log.flush()
                raise TrainingDiverged(
                    f"non-finite loss at iteration {it}; last good parameters "
                    f"saved to {out_dir / 'final.ckpt'}")
            if res.n_matched > 0:
                for p in model.params.values():
                    p.grad = None
                T.backward(res.total)
                try:
                    sgd_step(model.params, velocity, lr, cfg.momentum,
                             cfg.weight_decay)
                except TrainingDiverged as exc:
                    _save_state(out_dir / "final.ckpt", model, config_text,
                                velocity, it)
                    log.flush()
                    raise TrainingDiverged(
                        f"{exc} at iteration {it}; last good parameters saved "
                        f"to {out_dir / 'final.ckpt'}") from None
            last_loss = total
            log.write(f"{it},{lr:.8f},{total:.6f},{res.conf:.6f},{res.loc:.6f}\n")
            done = it + 1
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 \
                    and done < cfg.iterations:
                _save_state(out_dir / f"iter_{done:06d}.ckpt", model, config_text,
                            velocity, done)
            if cfg.eval_every and val_hook and done % cfg.eval_every == 0:
                val_hook(model, done)

    final = out_dir / "final.ckpt"
    _save_state(final, model, config_text, velocity, cfg.iterations)
    return TrainResult(checkpoint=final, log_path=log_path,
                       iterations_run=cfg.iterations - start_iteration,
                       last_loss=last_loss)


def _save_state(path, model: Model, config_text: str, velocity: dict,
                iteration: int) -> None:
    extra = {f"opt.{name}": v for name, v in velocity.items()}
    extra["train.iteration"] = np.array(float(iteration))
    save_model(path, model, config_text=config_text, extra_records=extra)


def load_train_state(path):
    """Rebuild (model, config_text, start_iteration, velocity) from a
    checkpoint written by `train`."""
    model, config_text, extras = load_model(path)
    dtype = T.default_dtype()
    velocity = {}
    iteration = 0
    for name, arr in extras.items():
        if name == "train.iteration":
            iteration = int(arr)
        elif name.startswith("opt."):
            velocity[name[4:]] = arr.astype(dtype)
    for name in velocity:
        if name not in model.params:
            raise ConfigError(f"checkpoint momentum for unknown parameter {name!r}")
    return model, config_text, iteration, velocity
