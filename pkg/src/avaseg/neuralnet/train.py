"""Training loop: shuffled mini-batches, on-the-fly augmentation, weighted
BCE, Adam, validation-F1 model selection with early stopping.

All randomness derives from one seed through numpy SeedSequence spawn keys,
so a run is bit-reproducible: (10, epoch) seeds the shuffle, (20, epoch)
the dropout stream, (30, epoch, sample) each augmentation draw.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..augment import AugmentParams, apply_transform, sample_transform
from ..sarprep import PatchSample
from .loss import LossConfig, weighted_bce
from .model import Model
from .optim import AdamConfig, AdamState, adam_step

__all__ = ["TrainConfig", "TrainHistory", "train", "select_channels"]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    patience: int = 6
    val_fraction: float = 0.1
    seed: int = 7
    threshold: float = 0.5
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentParams = field(default_factory=AugmentParams)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_f1: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_f1: float = -1.0
    stopped_epoch: int = -1

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "val_f1": self.val_f1,
            "best_epoch": self.best_epoch,
            "best_val_f1": self.best_val_f1,
            "stopped_epoch": self.stopped_epoch,
        }


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def select_channels(features: np.ndarray, model: Model) -> np.ndarray:
    """Slice the canonical 5-channel patch layout down to the model's inputs.

    The archive layout is (vv, vh, vvvh, slope, par); the model sees its
    first ``sar_channels`` SAR channels, then slope and/or the reach angle
    as configured.
    """
    cfg = model.cfg
    idx = list(range(cfg.sar_channels))
    if cfg.include_slope:
        idx.append(3)
    if cfg.par_mode != "none":
        idx.append(4)
    return features[..., idx, :, :]


def _pixel_f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def validation_f1(model: Model, patches: list[PatchSample], threshold: float = 0.5) -> float:
    """Pixel F1 over all validation patches at the given threshold."""
    tp = fp = fn = 0
    any_pos = False
    for p in patches:
        x = select_channels(p.features[None], model)
        pred = model.predict(x)[0, 0] >= threshold
        truth = p.labels.astype(bool)
        any_pos = any_pos or truth.any()
        tp += int((pred & truth).sum())
        fp += int((pred & ~truth).sum())
        fn += int((~pred & truth).sum())
    if not any_pos:
        logger.warning("validation set has no avalanche pixels; F1 reported as 0")
        return 0.0
    return _pixel_f1(tp, fp, fn)


def train(model: Model, patches: list[PatchSample], cfg: TrainConfig) -> tuple[Model, TrainHistory]:
    """Optimize in place; returns the model restored to its best-F1 state."""
    if not patches:
        raise ValueError("training requires a non-empty dataset")

    split_rng = _rng(cfg.seed, 1)
    order = split_rng.permutation(len(patches))
    n_val = max(1, int(round(cfg.val_fraction * len(patches))))
    if n_val >= len(patches):
        raise ValueError(f"dataset of {len(patches)} patches is too small for a validation split")
    val_set = [patches[i] for i in order[:n_val]]
    train_set = [patches[i] for i in order[n_val:]]

    state = AdamState()
    history = TrainHistory()
    best_state = None
    bad_epochs = 0

    for epoch in range(cfg.epochs):
        shuffle = _rng(cfg.seed, 10, epoch).permutation(len(train_set))
        drop_rng = _rng(cfg.seed, 20, epoch)
        losses = []
        for start in range(0, len(shuffle), cfg.batch_size):
            batch_idx = shuffle[start:start + cfg.batch_size]
            feats, labs = [], []
            for bi in batch_idx:
                p = train_set[bi]
                t = sample_transform(cfg.augment, _rng(cfg.seed, 30, epoch, int(bi)), size=p.size)
                p = apply_transform(p, t)
                feats.append(p.features)
                labs.append(p.labels)
            x = select_channels(np.stack(feats), model)
            y = np.stack(labs)[:, None].astype(model.dtype.type)

            pred = model.forward(x, training=True, rng=drop_rng)
            loss, gpred = weighted_bce(pred, y, cfg.loss)
            model.zero_grads()
            model.backward(gpred)
            adam_step(model.parameters(), model.gradients(), state, cfg.optimizer)
            losses.append(loss)

        f1 = validation_f1(model, val_set, cfg.threshold)
        history.train_loss.append(float(np.mean(losses)))
        history.val_f1.append(f1)
        logger.info("epoch %d: loss %.4f val_f1 %.4f", epoch, history.train_loss[-1], f1)

        if f1 > history.best_val_f1:
            history.best_val_f1 = f1
            history.best_epoch = epoch
            best_state = model.copy_state()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > cfg.patience:
                break

    history.stopped_epoch = len(history.train_loss) - 1
    if best_state is not None:
        model.load_state(best_state)
    return model, history
