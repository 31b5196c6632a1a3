"""Whole-scene prediction by sliding the network over overlapping windows.

Windows advance at half-window stride (the final window per axis is clamped
to the border). Each window is optionally expanded into the 8 dihedral
variants (4 quarter-turns x optional horizontal flip), predicted, inverted
and averaged; window predictions are then merged with a separable quadratic
spline weight surface. The discrete window profile satisfies
w[i] + w[i + S/2] = 1, so interior coverage is a partition of unity, and the
final normalization by accumulated weight makes constants pass through
exactly even at clamped edge windows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import Raster
from .sarprep import FeatureStack

__all__ = [
    "TtaTransform",
    "TTA_TRANSFORMS",
    "tile_windows",
    "apply_tta",
    "invert_tta",
    "spline_window",
    "blend_predictions",
    "segment_scene",
    "threshold_mask",
]


@dataclass(frozen=True)
class TtaTransform:
    """One symmetry of the square: rotate by 90*k degrees, then maybe flip."""

    rotation: int = 0     # degrees, one of 0/90/180/270
    flip: bool = False    # horizontal flip (reverses columns)

    def __post_init__(self):
        if self.rotation not in (0, 90, 180, 270):
            raise ValueError(f"rotation must be a multiple of 90, got {self.rotation}")


TTA_TRANSFORMS = tuple(
    TtaTransform(rotation=rot, flip=flip)
    for flip in (False, True) for rot in (0, 90, 180, 270)
)


def apply_tta(t: TtaTransform, patch: np.ndarray) -> np.ndarray:
    """Rotate then flip the trailing two axes; exact (no interpolation)."""
    if patch.shape[-1] != patch.shape[-2]:
        raise ValueError(f"TTA needs square patches, got {patch.shape[-2:]}")
    out = np.rot90(patch, k=t.rotation // 90, axes=(-2, -1))
    if t.flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def invert_tta(t: TtaTransform, patch: np.ndarray) -> np.ndarray:
    """Exact inverse: undo the flip, then rotate back."""
    if patch.shape[-1] != patch.shape[-2]:
        raise ValueError(f"TTA needs square patches, got {patch.shape[-2:]}")
    out = patch[..., ::-1] if t.flip else patch
    out = np.rot90(out, k=-(t.rotation // 90), axes=(-2, -1))
    return np.ascontiguousarray(out)


def tile_windows(ncols: int, nrows: int, size: int, stride: int | None = None) -> list[tuple[int, int]]:
    """(row, col) offsets covering the scene; the last window abuts the border."""
    if stride is None:
        stride = size // 2
    if stride < 1 or stride > size:
        raise ValueError(f"stride must be in [1, size], got {stride} for size {size}")
    if size > ncols or size > nrows:
        raise ValueError(f"window {size} exceeds scene {ncols}x{nrows}")

    def axis_offsets(n: int) -> list[int]:
        offs = list(range(0, n - size + 1, stride))
        if offs[-1] != n - size:
            offs.append(n - size)
        return offs

    return [(r, c) for r in axis_offsets(nrows) for c in axis_offsets(ncols)]


def spline_window(size: int, dtype=np.float64) -> np.ndarray:
    """Separable quadratic-spline weight surface (size x size).

    The 1-D profile rises as 2t^2, continues as 1 - 2(1-t)^2, and mirrors
    around the window center; shifted copies at half-window stride sum to 1.
    Strictly positive everywhere inside the window.
    """
    t = (np.arange(size, dtype=np.float64) + 0.5) / size  # in (0, 1)
    u = 2.0 * np.minimum(t, 1.0 - t)  # tent in (0, 1], peak at center
    w = np.where(u <= 0.5, 2.0 * u * u, 1.0 - 2.0 * (1.0 - u) ** 2)
    return (w[:, None] * w[None, :]).astype(dtype)


def blend_predictions(
    predictions: list[np.ndarray],
    offsets: list[tuple[int, int]],
    weights: np.ndarray,
    shape: tuple[int, int],
) -> np.ndarray:
    """Weighted average of per-window soft masks onto the scene grid."""
    if len(predictions) != len(offsets):
        raise ValueError("one prediction per window offset required")
    acc = np.zeros(shape, dtype=np.float64)
    norm = np.zeros(shape, dtype=np.float64)
    size = weights.shape[0]
    for pred, (r, c) in sorted(zip(predictions, offsets), key=lambda x: x[1]):
        if pred.shape != weights.shape:
            raise ValueError(f"prediction shape {pred.shape} != window {weights.shape}")
        acc[r:r + size, c:c + size] += weights * pred
        norm[r:r + size, c:c + size] += weights
    if (norm == 0).any():
        raise RuntimeError("tiling left uncovered pixels; offsets violate the coverage contract")
    return acc / norm


def segment_scene(
    model,
    stack: FeatureStack,
    size: int,
    stride: int | None = None,
    use_tta: bool = True,
    select=None,
) -> Raster:
    """Soft (0,1) whole-scene mask from eval-mode window predictions.

    ``model`` needs a ``predict(batch) -> (N, 1, S, S)`` method; ``select``
    optionally maps the 5-channel window array to the model's input layout
    (defaults to the identity).
    """
    geom = stack.geometry
    offsets = tile_windows(geom.ncols, geom.nrows, size, stride)
    arr = stack.as_array()
    weights = spline_window(size)
    transforms = TTA_TRANSFORMS if use_tta else (TtaTransform(),)

    preds = []
    for r, c in offsets:
        window = arr[:, r:r + size, c:c + size]
        batch = np.stack([apply_tta(t, window) for t in transforms])
        if select is not None:
            batch = select(batch)
        out = model.predict(batch)
        back = [invert_tta(t, out[k, 0]) for k, t in enumerate(transforms)]
        preds.append(np.mean(back, axis=0, dtype=np.float64))

    soft = blend_predictions(preds, offsets, weights, (geom.nrows, geom.ncols))
    return Raster(geom, np.clip(soft, 0.0, 1.0).astype(np.float32), nodata=-9999.0)


def threshold_mask(soft: Raster, tau: float = 0.5) -> Raster:
    """Binary mask: 1 where the soft value is >= tau."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {tau}")
    return soft.with_values((soft.values >= tau).astype(np.float32))
