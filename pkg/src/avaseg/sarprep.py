"""SAR change-feature preparation.

Turns calibrated reference/activity dB rasters into the model's input
channels, renders the RGB change composite used for manual labeling, and
cuts feature stacks into training patches.

Channel conventions: backscatter is clipped to [-25, -5] dB; temporal
differences live in [-20, +20] dB and are mapped affinely to [0, 1], so a
zero change is always 0.5 regardless of the scene. The combined channel is
the product of the squared rescaled differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .raster import Raster, read_raster, write_raster, _require_same_grid

__all__ = [
    "ScenePair",
    "FeatureStack",
    "PatchSample",
    "CHANNEL_NAMES",
    "DB_CLIP_LO",
    "DB_CLIP_HI",
    "clip_db",
    "rescale01",
    "diff_channel",
    "vvvh_product",
    "pair_scenes",
    "build_feature_stack",
    "rgb_composite",
    "extract_training_patches",
    "save_patch_archive",
    "load_patch_archive",
]

DB_CLIP_LO = -25.0
DB_CLIP_HI = -5.0
DIFF_LO = DB_CLIP_LO - DB_CLIP_HI  # -20 dB, largest possible decrease
DIFF_HI = DB_CLIP_HI - DB_CLIP_LO  # +20 dB, largest possible increase

CHANNEL_NAMES = ("vv", "vh", "vvvh", "slope", "par")
PATCH_SIZE_MULTIPLE = 16  # deepest paper-scale encoder sees 1/16 resolution


@dataclass(frozen=True)
class ScenePair:
    """Co-registered reference/activity acquisitions from one orbit."""

    vv_ref: Raster
    vv_act: Raster
    vh_ref: Raster
    vh_act: Raster
    orbit: str
    t_ref: str
    t_act: str

    def __post_init__(self):
        for name, r in (("vv_act", self.vv_act), ("vh_ref", self.vh_ref), ("vh_act", self.vh_act)):
            if r.geometry != self.vv_ref.geometry:
                raise ValueError(f"scene pair geometry mismatch on channel {name}")
        if not self.t_ref < self.t_act:
            raise ValueError(f"reference time {self.t_ref} must precede activity time {self.t_act}")


@dataclass(frozen=True)
class FeatureStack:
    """The five model input channels on one grid: vv, vh, vvvh, slope, par."""

    vv: Raster
    vh: Raster
    vvvh: Raster
    slope: Raster
    par: Raster

    def __post_init__(self):
        for name in CHANNEL_NAMES[1:]:
            if getattr(self, name).geometry != self.vv.geometry:
                raise ValueError(f"feature stack geometry mismatch on channel {name}")

    @property
    def geometry(self):
        return self.vv.geometry

    def channels(self) -> tuple[Raster, ...]:
        return tuple(getattr(self, n) for n in CHANNEL_NAMES)

    def as_array(self) -> np.ndarray:
        """(5, nrows, ncols) float32 channel-first view of the stack."""
        return np.stack([c.values for c in self.channels()])


@dataclass(frozen=True)
class PatchSample:
    """One training unit: a 5-channel window plus its binary label mask."""

    features: np.ndarray  # (5, S, S) float32
    labels: np.ndarray    # (S, S) uint8
    scene_id: str = ""
    row: int = 0
    col: int = 0

    def __post_init__(self):
        f = np.ascontiguousarray(self.features, dtype=np.float32)
        l = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if f.ndim != 3 or f.shape[0] != len(CHANNEL_NAMES) or f.shape[1] != f.shape[2]:
            raise ValueError(f"patch features must be (5, S, S), got {f.shape}")
        if l.shape != f.shape[1:]:
            raise ValueError(f"labels shape {l.shape} does not match patch {f.shape[1:]}")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", l)

    @property
    def size(self) -> int:
        return self.features.shape[1]


# ---------------------------------------------------------------------------
# Channel math
# ---------------------------------------------------------------------------


def clip_db(r: Raster) -> Raster:
    """Clamp backscatter to [-25, -5] dB; nodata cells pass through."""
    v = np.clip(r.values, DB_CLIP_LO, DB_CLIP_HI)
    nd = r.nodata_mask()
    if nd.any():
        v = v.copy()
        v[nd] = np.float32(r.nodata)
    return r.with_values(v)


def rescale01(r: Raster, lo: float, hi: float) -> Raster:
    """Affine map [lo, hi] -> [0, 1], clamped."""
    if lo >= hi:
        raise ValueError(f"rescale01 needs lo < hi, got [{lo}, {hi}]")
    v = np.clip((r.values - np.float32(lo)) / np.float32(hi - lo), 0.0, 1.0)
    return r.with_values(v)


def diff_channel(act: Raster, ref: Raster) -> Raster:
    """Temporal dB difference mapped to [0, 1]; zero change maps to 0.5.

    Inputs must already be clipped to the dB working range, so the raw
    difference lies in [-20, +20] and the fixed affine map keeps a given
    physical change at the same feature value across scenes.
    """
    _require_same_grid(act, ref, "diff_channel")
    diff = act.with_values(act.values - ref.values)
    return rescale01(diff, DIFF_LO, DIFF_HI)


def vvvh_product(vv: Raster, vh: Raster) -> Raster:
    """Pixel-wise product of the squared difference channels."""
    _require_same_grid(vv, vh, "vvvh_product")
    return vv.with_values(vv.values ** 2 * vh.values ** 2)


# ---------------------------------------------------------------------------
# Scene pairing
# ---------------------------------------------------------------------------


def pair_scenes(scenes: list[dict]) -> list[tuple[dict, dict]]:
    """Chronological (reference, activity) chaining within each orbit group.

    ``scenes`` are manifest records with at least ``orbit`` and ``timestamp``
    (ISO-8601 strings, so lexicographic order is chronological order).
    Groups with fewer than two scenes yield no pairs.
    """
    groups: dict[str, list[dict]] = {}
    for rec in scenes:
        groups.setdefault(rec["orbit"], []).append(rec)
    pairs = []
    for orbit in sorted(groups):
        ordered = sorted(groups[orbit], key=lambda r: r["timestamp"])
        pairs.extend(zip(ordered[:-1], ordered[1:]))
    return pairs


def load_scene_manifest(path) -> list[dict]:
    """Scene manifest: JSON array of {id, orbit, timestamp, vv_path, vh_path}."""
    with open(path) as fh:
        records = json.load(fh)
    for rec in records:
        missing = {"id", "orbit", "timestamp", "vv_path", "vh_path"} - rec.keys()
        if missing:
            raise ValueError(f"scene record {rec.get('id', '?')} missing keys {sorted(missing)}")
    return records


def load_scene_pair(ref_rec: dict, act_rec: dict, base_dir=".") -> ScenePair:
    """Read the four rasters of a manifest record pair and clip them to dB range."""
    import os

    def rd(rec, key):
        p = rec[key]
        if not os.path.isabs(p):
            p = os.path.join(str(base_dir), p)
        return clip_db(read_raster(p, "binary_grid" if not p.endswith(".asc") else "ascii_grid"))

    return ScenePair(
        vv_ref=rd(ref_rec, "vv_path"), vv_act=rd(act_rec, "vv_path"),
        vh_ref=rd(ref_rec, "vh_path"), vh_act=rd(act_rec, "vh_path"),
        orbit=ref_rec["orbit"], t_ref=ref_rec["timestamp"], t_act=act_rec["timestamp"],
    )


# ---------------------------------------------------------------------------
# Stack assembly and visualization
# ---------------------------------------------------------------------------


def build_feature_stack(pair: ScenePair, slope: Raster, par: Raster) -> FeatureStack:
    """Assemble the 5 input channels; SAR rasters must be clipped dB."""
    for name, r in (("slope", slope), ("par", par)):
        if r.geometry != pair.vv_ref.geometry:
            raise ValueError(f"feature stack geometry mismatch on channel {name}")
    vv = diff_channel(pair.vv_act, pair.vv_ref)
    vh = diff_channel(pair.vh_act, pair.vh_ref)
    return FeatureStack(vv=vv, vh=vh, vvvh=vvvh_product(vv, vh), slope=slope, par=par)


def rgb_composite(pair: ScenePair) -> np.ndarray:
    """8-bit (nrows, ncols, 3) change image: R/B = reference VV, G = activity VV.

    New debris (backscatter increase) renders green.
    """
    ref = rescale01(pair.vv_ref, DB_CLIP_LO, DB_CLIP_HI).values
    act = rescale01(pair.vv_act, DB_CLIP_LO, DB_CLIP_HI).values
    to8 = lambda a: np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    return np.stack([to8(ref), to8(act), to8(ref)], axis=-1)


# ---------------------------------------------------------------------------
# Patch extraction and the on-disk patch archive
# ---------------------------------------------------------------------------


def extract_training_patches(
    stack: FeatureStack,
    labels: Raster,
    size: int,
    require_positive: bool = True,
    scene_id: str = "",
) -> list[PatchSample]:
    """Non-overlapping size x size tiling; optionally keep avalanche patches only."""
    if size % PATCH_SIZE_MULTIPLE:
        raise ValueError(f"patch size must be a multiple of {PATCH_SIZE_MULTIPLE}, got {size}")
    geom = stack.geometry
    if labels.geometry != geom:
        raise ValueError("labels geometry does not match the feature stack")
    if size > min(geom.ncols, geom.nrows):
        raise ValueError(f"patch size {size} exceeds scene {geom.ncols}x{geom.nrows}")

    arr = stack.as_array()
    lab = (labels.values == 1.0).astype(np.uint8)
    out = []
    for row in range(0, geom.nrows - size + 1, size):
        for col in range(0, geom.ncols - size + 1, size):
            lpatch = lab[row:row + size, col:col + size]
            if require_positive and not lpatch.any():
                continue
            out.append(PatchSample(
                features=arr[:, row:row + size, col:col + size].copy(),
                labels=lpatch.copy(), scene_id=scene_id, row=row, col=col,
            ))
    return out


def _patch_basename(scene_id: str, row: int, col: int, channel: str) -> str:
    return f"{scene_id}_{row}_{col}_{channel}.rst"


def save_patch_archive(patches: list[PatchSample], directory, cell_size: float = 20.0,
                       extra: dict | None = None) -> None:
    """Write patches as per-channel binary grids plus an index JSON.

    Patch rasters carry a local pixel-origin geometry; provenance lives in
    the file names and the index.
    """
    import os

    from .raster import GridGeometry

    os.makedirs(str(directory), exist_ok=True)
    index = {
        "patch_size": patches[0].size if patches else 0,
        "cell_size": cell_size,
        "channels": list(CHANNEL_NAMES),
        "samples": [],
    }
    if extra:
        index.update(extra)
    for p in patches:
        geom = GridGeometry(p.size, p.size, 0.0, 0.0, cell_size)
        for ci, ch in enumerate(CHANNEL_NAMES):
            r = Raster(geom, p.features[ci])
            write_raster(r, os.path.join(str(directory), _patch_basename(p.scene_id, p.row, p.col, ch)))
        write_raster(Raster(geom, p.labels.astype(np.float32)),
                     os.path.join(str(directory), _patch_basename(p.scene_id, p.row, p.col, "label")))
        index["samples"].append({"scene": p.scene_id, "row": p.row, "col": p.col})
    with open(os.path.join(str(directory), "index.json"), "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)


def load_patch_archive(directory) -> tuple[list[PatchSample], dict]:
    """Read a patch archive back; returns (patches, index)."""
    import os

    with open(os.path.join(str(directory), "index.json")) as fh:
        index = json.load(fh)
    patches = []
    for rec in index["samples"]:
        sid, row, col = rec["scene"], rec["row"], rec["col"]
        feats = []
        for ch in index["channels"]:
            r = read_raster(os.path.join(str(directory), _patch_basename(sid, row, col, ch)))
            feats.append(r.values)
        lab = read_raster(os.path.join(str(directory), _patch_basename(sid, row, col, "label")))
        patches.append(PatchSample(
            features=np.stack(feats), labels=lab.values.astype(np.uint8),
            scene_id=sid, row=row, col=col,
        ))
    return patches, index
