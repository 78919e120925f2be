"""Box and binary-mask primitives.

Boxes are ``[x, y, w, h]`` in continuous pixel coordinates with the half-open
convention: a box covers ``x <= px < x + w`` and ``y <= py < y + h``. Binary
masks are ``(H, W)`` boolean numpy arrays stored row-major.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np


class Box(NamedTuple):
    x: float
    y: float
    w: float
    h: float
    empty: bool = False

    @property
    def area(self) -> float:
        return max(self.w, 0.0) * max(self.h, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "Box":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


class Point(NamedTuple):
    x: float
    y: float
    class_id: int
    instance_id: int


def _as_xywh(b) -> np.ndarray:
    if isinstance(b, Box):
        return b.as_array()
    return np.asarray(b, dtype=np.float64)[..., :4]


def box_iou(a, b) -> float:
    """IoU of two boxes; 0 when the union is degenerate."""
    a = _as_xywh(a)
    b = _as_xywh(b)
    iw = min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0])
    ih = min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a[2] * a[3] + b[2] * b[3] - inter
    if union <= 0.0:
        return 0.0
    return float(inter / union)


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` xywh arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 0] + a[:, None, 2], b[None, :, 0] + b[None, :, 2])
    y2 = np.minimum(a[:, None, 1] + a[:, None, 3], b[None, :, 1] + b[None, :, 3])
    inter = np.clip(x2 - x1, 0.0, None) * np.clip(y2 - y1, 0.0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def box_contains(outer, inner) -> bool:
    """True when ``inner`` lies entirely inside ``outer`` (edges may touch)."""
    o = _as_xywh(outer)
    i = _as_xywh(inner)
    return bool(
        o[0] <= i[0]
        and o[1] <= i[1]
        and i[0] + i[2] <= o[0] + o[2]
        and i[1] + i[3] <= o[1] + o[3]
    )


def clip_box(b, width: float, height: float) -> Box:
    """Clip a box to the image rectangle ``[0, width) x [0, height)``."""
    a = _as_xywh(b)
    x1 = min(max(a[0], 0.0), width)
    y1 = min(max(a[1], 0.0), height)
    x2 = min(max(a[0] + a[2], 0.0), width)
    y2 = min(max(a[1] + a[3], 0.0), height)
    return Box(float(x1), float(y1), float(x2 - x1), float(y2 - y1))


def point_in_box(p, b) -> bool:
    px, py = float(p[0]), float(p[1])
    a = _as_xywh(b)
    return bool(a[0] <= px < a[0] + a[2] and a[1] <= py < a[1] + a[3])


def points_in_boxes(points: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """``(M, P)`` boolean containment table, half-open."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    px = points[None, :, 0]
    py = points[None, :, 1]
    return (
        (boxes[:, None, 0] <= px)
        & (px < boxes[:, None, 0] + boxes[:, None, 2])
        & (boxes[:, None, 1] <= py)
        & (py < boxes[:, None, 1] + boxes[:, None, 3])
    )


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def mask_to_box(m: np.ndarray) -> Box:
    """Tightest box around the foreground; empty masks give a tagged zero box."""
    m = np.asarray(m, dtype=bool)
    rows = np.flatnonzero(m.any(axis=1))
    if rows.size == 0:
        return Box(0.0, 0.0, 0.0, 0.0, empty=True)
    cols = np.flatnonzero(m.any(axis=0))
    y0, y1 = rows[0], rows[-1]
    x0, x1 = cols[0], cols[-1]
    return Box(float(x0), float(y0), float(x1 - x0 + 1), float(y1 - y0 + 1))


def box_to_mask(b, width: int, height: int) -> np.ndarray:
    """Rasterize a box: pixel (px, py) is set iff its center lies inside."""
    a = _as_xywh(b)
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    cx = (xs >= a[0]) & (xs < a[0] + a[2])
    cy = (ys >= a[1]) & (ys < a[1] + a[3])
    return cy[:, None] & cx[None, :]


def mask_perimeter(m: np.ndarray) -> int:
    """Number of foreground pixels with at least one 4-neighbour outside."""
    m = np.asarray(m, dtype=bool)
    if not m.any():
        return 0
    p = np.pad(m, 1)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return int(np.count_nonzero(m & ~interior))


def rle_encode(m: np.ndarray) -> list[int]:
    """Column-major run lengths, starting with the (possibly empty) zero run."""
    flat = np.asarray(m, dtype=bool).flatten(order="F")
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return runs


def rle_decode(counts: Sequence[int], width: int, height: int) -> np.ndarray:
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise ValueError("negative run length in RLE counts")
    total = sum(counts)
    if total != width * height:
        raise ValueError(
            f"RLE counts sum to {total}, expected {width}x{height}={width * height}"
        )
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, counts)
    return flat.reshape((height, width), order="F")
