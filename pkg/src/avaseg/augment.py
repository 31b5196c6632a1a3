"""Random geometric augmentation applied identically to features and labels.

A sampled transform composes, in order: shear, rotation, zoom, shift, flips,
all about the patch center. Features are resampled bilinearly, labels with
nearest-neighbor so masks stay binary; samples falling outside the patch are
filled with 0.

Quarter-turn rotations get exact {0, +-1} matrix entries, so axis-aligned
flips, 90-degree rotations and integer pixel shifts reproduce input values
bit-for-bit (the interpolation weights degenerate to exactly 0 and 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sarprep import PatchSample

__all__ = ["AugmentParams", "AffineTransform", "sample_transform", "apply_transform"]


@dataclass(frozen=True)
class AugmentParams:
    """Augmentation magnitudes; all ranges are symmetric around the identity."""

    p_flip_h: float = 0.5
    p_flip_v: float = 0.5
    max_shift: float = 0.1          # fraction of the patch size
    max_rotation: float = 15.0      # degrees
    zoom_range: tuple[float, float] = (0.9, 1.1)
    max_shear: float = 5.0          # degrees
    seed: int = 0

    def __post_init__(self):
        for name in ("p_flip_h", "p_flip_v"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        zmin, zmax = self.zoom_range
        if not (zmin <= 1.0 <= zmax):
            raise ValueError(f"zoom_range must bracket 1.0, got {self.zoom_range}")


@dataclass(frozen=True)
class AffineTransform:
    """y = A (x - c) + offset + c on (row, col) coordinates, c the patch center.

    The offset is in pixels.
    """

    matrix: np.ndarray   # (2, 2)
    offset: np.ndarray   # (2,)

    def __post_init__(self):
        object.__setattr__(self, "matrix", np.asarray(self.matrix, dtype=np.float64))
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=np.float64))

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(2), np.zeros(2))

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """self applied after other."""
        return AffineTransform(self.matrix @ other.matrix,
                               self.matrix @ other.offset + self.offset)

    def inverse(self) -> "AffineTransform":
        a, b = self.matrix[0]
        c, d = self.matrix[1]
        det = a * d - b * c
        if det == 0.0:
            raise ValueError("transform is singular and cannot be inverted")
        inv = np.array([[d, -b], [-c, a]]) / det
        return AffineTransform(inv, -(inv @ self.offset))

    def is_identity(self) -> bool:
        return np.array_equal(self.matrix, np.eye(2)) and np.array_equal(self.offset, np.zeros(2))


def _rotation_matrix(degrees: float) -> np.ndarray:
    """Rotation matrix; exact entries for multiples of 90 degrees."""
    q, rem = divmod(degrees, 90.0)
    if rem == 0.0:
        c, s = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(q) % 4]
    else:
        rad = math.radians(degrees)
        c, s = math.cos(rad), math.sin(rad)
    return np.array([[c, -s], [s, c]])


def sample_transform(params: AugmentParams, rng: np.random.Generator,
                     size: int | None = None) -> AffineTransform:
    """Draw one random transform; deterministic given the generator state.

    ``size`` converts the fractional shift range to pixels; it may be omitted
    when ``max_shift`` is zero.
    """
    shear_deg = rng.uniform(-params.max_shear, params.max_shear) if params.max_shear else 0.0
    rot_deg = rng.uniform(-params.max_rotation, params.max_rotation) if params.max_rotation else 0.0
    zmin, zmax = params.zoom_range
    zoom = rng.uniform(zmin, zmax) if zmin != zmax else float(zmin)
    if params.max_shift:
        if size is None:
            raise ValueError("patch size is required to scale fractional shifts")
        shift = rng.uniform(-params.max_shift, params.max_shift, size=2) * size
    else:
        shift = np.zeros(2)
    flip_h = rng.random() < params.p_flip_h
    flip_v = rng.random() < params.p_flip_v

    sh = math.tan(math.radians(shear_deg)) if shear_deg else 0.0
    shear = AffineTransform(np.array([[1.0, sh], [0.0, 1.0]]), np.zeros(2))
    rot = AffineTransform(_rotation_matrix(rot_deg), np.zeros(2))
    zoomt = AffineTransform(np.array([[zoom, 0.0], [0.0, zoom]]), np.zeros(2))
    t = zoomt.compose(rot.compose(shear))
    t = AffineTransform(t.matrix, t.offset + shift)
    flip = np.diag([-1.0 if flip_v else 1.0, -1.0 if flip_h else 1.0])
    return AffineTransform(flip, np.zeros(2)).compose(t)


def _sample_grid(size: int, t: AffineTransform) -> tuple[np.ndarray, np.ndarray]:
    """Source (row, col) coordinates for every output pixel under t inverse."""
    inv = t.inverse()
    c = (size - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(size, dtype=np.float64),
                             np.arange(size, dtype=np.float64), indexing="ij")
    pts = np.stack([rows.ravel() - c, cols.ravel() - c])
    src = inv.matrix @ pts + inv.offset[:, None] + c
    return src[0].reshape(size, size), src[1].reshape(size, size)


def _bilinear(channel: np.ndarray, src_r: np.ndarray, src_c: np.ndarray) -> np.ndarray:
    n = channel.shape[0]
    r0 = np.floor(src_r)
    c0 = np.floor(src_c)
    fr = src_r - r0
    fc = src_c - c0
    out = np.zeros(src_r.shape, dtype=np.float64)
    for dr, dc, w in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                      (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr = r0 + dr
        cc = c0 + dc
        inside = (rr >= 0) & (rr < n) & (cc >= 0) & (cc < n) & (w != 0.0)
        vals = np.zeros_like(out)
        vals[inside] = channel[rr[inside].astype(np.intp), cc[inside].astype(np.intp)]
        out += np.where(inside, w * vals, 0.0)
    return out


def _nearest(channel: np.ndarray, src_r: np.ndarray, src_c: np.ndarray) -> np.ndarray:
    n = channel.shape[0]
    rr = np.rint(src_r)
    cc = np.rint(src_c)
    inside = (rr >= 0) & (rr < n) & (cc >= 0) & (cc < n)
    out = np.zeros(src_r.shape, dtype=channel.dtype)
    out[inside] = channel[rr[inside].astype(np.intp), cc[inside].astype(np.intp)]
    return out


def apply_transform(patch: PatchSample, t: AffineTransform) -> PatchSample:
    """Warp features (bilinear) and labels (nearest) by the same transform."""
    if t.is_identity():
        return patch
    size = patch.size
    src_r, src_c = _sample_grid(size, t)

    # when every source coordinate is integral the bilinear weights are 0/1;
    # a direct gather then preserves float values bit-for-bit
    exact = np.array_equal(src_r, np.rint(src_r)) and np.array_equal(src_c, np.rint(src_c))
    feats = np.empty_like(patch.features)
    for ci in range(patch.features.shape[0]):
        if exact:
            feats[ci] = _nearest(patch.features[ci], src_r, src_c)
        else:
            feats[ci] = _bilinear(patch.features[ci].astype(np.float64), src_r, src_c).astype(np.float32)
    labels = _nearest(patch.labels, src_r, src_c)
    return PatchSample(features=feats, labels=labels,
                       scene_id=patch.scene_id, row=patch.row, col=patch.col)
