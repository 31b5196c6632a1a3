"""Pixel- and object-level comparison of predicted vs ground-truth masks.

Objects are 8-connected components compared through their tight bounding
boxes; predicted and true objects are matched greedily by descending box
IoU, one-to-one, counting any positive overlap as a hit unless a stricter
minimum IoU is requested.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from .raster import Raster, _require_same_grid

__all__ = [
    "ComponentBox",
    "EvalReport",
    "pixel_confusion",
    "connected_components",
    "bbox_iou",
    "object_match",
    "evaluate",
]

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class ComponentBox:
    """One connected component: id, inclusive bounding box, pixel count."""

    component_id: int
    row_min: int
    col_min: int
    row_max: int
    col_max: int
    pixel_count: int

    def __post_init__(self):
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise ValueError("bounding box corners are inverted")
        if self.pixel_count < 1:
            raise ValueError("components hold at least one pixel")

    @property
    def area(self) -> int:
        return (self.row_max - self.row_min + 1) * (self.col_max - self.col_min + 1)


@dataclass
class EvalReport:
    pixel_precision: float
    pixel_recall: float
    pixel_f1: float
    object_tp: int
    object_fn: int
    object_fp: int
    mean_bbox_iou: float
    matches: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, indent: int = 1) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def table_row(self, method: str = "FCN") -> str:
        """One row in the segmentation-results table layout."""
        return (f"{method} | F1 {100 * self.pixel_f1:.1f} | IoU {100 * self.mean_bbox_iou:.1f} | "
                f"TP {self.object_tp}, FN {self.object_fn}, FP {self.object_fp}")


def _require_binary(r: Raster, what: str) -> np.ndarray:
    vals = np.unique(r.values)
    if not np.isin(vals, (0.0, 1.0)).all():
        raise ValueError(f"{what} must be binary, found values {vals[:8]}")
    return r.values == 1.0


def pixel_confusion(pred: Raster, truth: Raster) -> tuple[float, float, float]:
    """(precision, recall, F1) from exact pixel counts; 0 when undefined."""
    _require_same_grid(pred, truth, "pixel_confusion")
    p = _require_binary(pred, "prediction")
    t = _require_binary(truth, "truth")
    tp = int((p & t).sum())
    fp = int((p & ~t).sum())
    fn = int((~p & t).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def connected_components(mask: Raster) -> list[ComponentBox]:
    """8-connected components with ids assigned in row-major scan order."""
    m = _require_binary(mask, "mask")
    labeled, count = ndimage.label(m, structure=_EIGHT_CONNECTED)
    if count == 0:
        return []
    # renumber by first occurrence in scan order so ids are deterministic
    flat = labeled.ravel()
    first_seen = {}
    for lab in flat[flat > 0]:
        if lab not in first_seen:
            first_seen[lab] = len(first_seen)
            if len(first_seen) == count:
                break
    boxes = []
    slices = ndimage.find_objects(labeled)
    for lab, cid in first_seen.items():
        sl = slices[lab - 1]
        boxes.append(ComponentBox(
            component_id=cid,
            row_min=sl[0].start, col_min=sl[1].start,
            row_max=sl[0].stop - 1, col_max=sl[1].stop - 1,
            pixel_count=int((labeled[sl] == lab).sum()),
        ))
    boxes.sort(key=lambda b: b.component_id)
    return boxes


def bbox_iou(a: ComponentBox, b: ComponentBox) -> float:
    """Intersection over union of the inclusive pixel-area boxes."""
    ir = min(a.row_max, b.row_max) - max(a.row_min, b.row_min) + 1
    ic = min(a.col_max, b.col_max) - max(a.col_min, b.col_min) + 1
    inter = max(0, ir) * max(0, ic)
    union = a.area + b.area - inter
    return inter / union if union else 0.0


def object_match(
    pred_components: list[ComponentBox],
    truth_components: list[ComponentBox],
    min_iou: float = 0.0,
) -> tuple[int, int, int, list[dict]]:
    """Greedy one-to-one matching by descending box IoU.

    A pair qualifies when its IoU is positive and at least ``min_iou``.
    Returns (TP, FN, FP, matches).
    """
    candidates = []
    for t in truth_components:
        for p in pred_components:
            iou = bbox_iou(p, t)
            if iou > 0.0 and iou >= min_iou:
                candidates.append((iou, t.component_id, p.component_id))
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))

    matched_t: set[int] = set()
    matched_p: set[int] = set()
    matches = []
    for iou, tid, pid in candidates:
        if tid in matched_t or pid in matched_p:
            continue
        matched_t.add(tid)
        matched_p.add(pid)
        matches.append({"truth_id": tid, "pred_id": pid, "iou": iou})

    tp = len(matched_t)
    fn = len(truth_components) - tp
    fp = len(pred_components) - len(matched_p)
    return tp, fn, fp, matches


def evaluate(pred: Raster, truth: Raster, min_iou: float = 0.0) -> EvalReport:
    """Full pixel + object report; mean box IoU is over matched pairs only."""
    precision, recall, f1 = pixel_confusion(pred, truth)
    pred_comp = connected_components(pred)
    truth_comp = connected_components(truth)
    tp, fn, fp, matches = object_match(pred_comp, truth_comp, min_iou)
    mean_iou = float(np.mean([m["iou"] for m in matches])) if matches else 0.0
    return EvalReport(
        pixel_precision=precision, pixel_recall=recall, pixel_f1=f1,
        object_tp=tp, object_fn=fn, object_fp=fp,
        mean_bbox_iou=mean_iou, matches=matches,
    )
