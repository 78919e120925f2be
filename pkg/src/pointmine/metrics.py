"""Pseudo-label diagnostics: foreground ratios, part-selection gap, merge rate, mIoU."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import box_iou, mask_iou, mask_to_box, points_in_boxes


def rv_ratio(mask: np.ndarray, box) -> float:
    """Mask area over box area, clipped to 1."""
    area = float(box[2]) * float(box[3])
    if not area > 0:
        raise ValueError("foreground ratio needs a box with positive area")
    return min(float(np.count_nonzero(mask)) / area, 1.0)


def _mask_rv(mask: np.ndarray) -> float:
    b = mask_to_box(mask)
    return 0.0 if b.empty else rv_ratio(mask, b)


def bag_rv(masks: list[np.ndarray]) -> np.ndarray:
    """Foreground ratio of each proposal mask inside its own tight box."""
    return np.array([_mask_rv(m) for m in masks])


def rv_threshold(bag_ratios: list[np.ndarray]) -> float:
    """Mean over instances of the per-bag maximum foreground ratio."""
    if not bag_ratios:
        raise ValueError("no instances")
    return float(np.mean([np.max(r) for r in bag_ratios]))


@dataclass
class LocalGapInput:
    """Per-instance ingredients of the part-selection gap."""

    rv_bag: np.ndarray  # foreground ratio of every proposal
    box_areas: np.ndarray  # area of every proposal's tight box
    rv_selected: float
    rv_gt: float
    gt_area: float


def local_eligible(item: LocalGapInput, t_rv: float) -> bool:
    """Bag holds a proposal above the ratio threshold whose box is smaller than the gt box."""
    j = int(np.argmax(item.rv_bag))
    return bool(item.rv_bag[j] > t_rv and item.box_areas[j] < item.gt_area)


def gap_local(items: list[LocalGapInput], t_rv: float) -> float | None:
    """Mean selected-minus-gt foreground ratio over eligible instances; None when none are."""
    diffs = [it.rv_selected - it.rv_gt for it in items if local_eligible(it, t_rv)]
    if not diffs:
        return None
    return float(np.mean(diffs))


def gap_group(pseudo_boxes: list[np.ndarray], points: list[np.ndarray],
              classes: list[np.ndarray]) -> float:
    """Fraction of pseudo boxes that contain a same-class point of another instance.

    Inputs are per scene: ``(N, 4)`` boxes, ``(N, 2)`` points and ``(N,)``
    class ids, with row ``i`` of each belonging to the same instance.
    """
    bad = total = 0
    for boxes, pts, cls in zip(pseudo_boxes, points, classes):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        cls = np.asarray(cls)
        n = len(boxes)
        total += n
        if n < 2:
            continue
        inside = points_in_boxes(np.asarray(pts).reshape(-1, 2), boxes)
        same = (cls[:, None] == cls[None, :]) & ~np.eye(n, dtype=bool)
        bad += int(np.count_nonzero((inside & same).any(axis=1)))
    return bad / total if total else 0.0


def miou_box(selected, gt) -> tuple[float, int]:
    """Mean box IoU; rows whose gt is None are skipped and counted."""
    vals, skipped = [], 0
    for s, g in zip(selected, gt):
        if g is None:
            skipped += 1
            continue
        vals.append(box_iou(s, g))
    return (float(np.mean(vals)) if vals else 0.0), skipped


def miou_mask(selected, gt) -> tuple[float, int]:
    vals, skipped = [], 0
    for s, g in zip(selected, gt):
        if g is None or s is None:
            skipped += 1
            continue
        vals.append(mask_iou(s, g))
    return (float(np.mean(vals)) if vals else 0.0), skipped


@dataclass
class InstanceRow:
    image_id: str
    instance_id: int
    box_iou: float
    mask_iou: float
    rv_selected: float
    rv_gt: float
    local_eligible: bool
    group_bad: bool


@dataclass
class DiagnosticReport:
    gap_local: float | None
    gap_group: float
    miou_box: float
    miou_mask: float
    t_rv: float
    n_instances: int
    n_local_eligible: int
    skipped: int = 0
    rows: list[InstanceRow] = field(default_factory=list)

    def to_json(self, include_rows: bool = True) -> str:
        d = asdict(self)
        if not include_rows:
            d.pop("rows")
        return json.dumps(d, indent=1, sort_keys=True)

    def table(self) -> str:
        def fmt(v):
            if v is None:
                return "NA"
            return f"{v:.4f}" if isinstance(v, float) else str(v)

        items = [
            ("gap_local", self.gap_local),
            ("gap_group", self.gap_group),
            ("miou_box", self.miou_box),
            ("miou_mask", self.miou_mask),
            ("t_rv", self.t_rv),
            ("instances", self.n_instances),
            ("local_eligible", self.n_local_eligible),
        ]
        w = max(len(k) for k, _ in items)
        return "\n".join(f"{k.ljust(w)}  {fmt(v).rjust(8)}" for k, v in items)
