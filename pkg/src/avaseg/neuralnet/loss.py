"""Class-weighted binary cross-entropy on soft per-pixel predictions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["LossConfig", "weighted_bce"]

CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    """Per-class loss weights; avalanche errors count double by default."""

    avalanche_weight: float = 2.0
    background_weight: float = 1.0

    def __post_init__(self):
        if self.avalanche_weight <= 0 or self.background_weight <= 0:
            raise ValueError("loss weights must be positive")


def weighted_bce(pred: np.ndarray, labels: np.ndarray,
                 w: LossConfig = LossConfig()) -> tuple[float, np.ndarray]:
    """Mean weighted BCE and its gradient w.r.t. the predictions.

    Predictions are clamped to [1e-7, 1 - 1e-7] before the logs; the gradient
    is zero where the clamp is active.
    """
    if pred.shape != labels.shape:
        raise ValueError(f"prediction shape {pred.shape} != labels shape {labels.shape}")
    y = labels.astype(pred.dtype)
    p = np.clip(pred, CLAMP, 1.0 - CLAMP)
    wa = np.asarray(w.avalanche_weight, dtype=pred.dtype)
    wb = np.asarray(w.background_weight, dtype=pred.dtype)
    terms = wa * y * np.log(p) + wb * (1.0 - y) * np.log1p(-p)
    loss = -float(terms.mean())
    grad = -(wa * y / p - wb * (1.0 - y) / (1.0 - p)) / p.size
    grad = np.where((pred > CLAMP) & (pred < 1.0 - CLAMP), grad, 0.0).astype(pred.dtype)
    return loss, grad
