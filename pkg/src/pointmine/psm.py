"""Proposal selection: two-branch MIL head, point-distance guidance, bag loss.

Batched computations run over a :class:`BagBatch`, which stacks the proposals
of many bags into one ``(R, D)`` feature matrix with per-bag row offsets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset_io import Scene
from .geometry import box_iou_matrix, points_in_boxes
from .losses import EPS, LossValue


@dataclass
class MilHead:
    W_cls: np.ndarray
    b_cls: np.ndarray
    W_ins: np.ndarray
    b_ins: np.ndarray

    @classmethod
    def zeros(cls, dim: int, num_classes: int) -> "MilHead":
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        return cls(
            np.zeros((dim, num_classes)),
            np.zeros(num_classes),
            np.zeros((dim, num_classes)),
            np.zeros(num_classes),
        )

    @property
    def dim(self) -> int:
        return self.W_cls.shape[0]

    @property
    def num_classes(self) -> int:
        return self.W_cls.shape[1]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.W_cls.ravel(), self.b_cls, self.W_ins.ravel(), self.b_ins])

    @classmethod
    def from_vector(cls, v: np.ndarray, dim: int, num_classes: int) -> "MilHead":
        dk = dim * num_classes
        v = np.asarray(v, dtype=np.float64)
        return cls(
            v[:dk].reshape(dim, num_classes).copy(),
            v[dk : dk + num_classes].copy(),
            v[dk + num_classes : 2 * dk + num_classes].reshape(dim, num_classes).copy(),
            v[2 * dk + num_classes :].copy(),
        )

    def copy(self) -> "MilHead":
        return MilHead(self.W_cls.copy(), self.b_cls.copy(), self.W_ins.copy(), self.b_ins.copy())


@dataclass
class DistanceConfig:
    d: float = 0.015
    penalize: bool = True

    def __post_init__(self):
        if not self.d > 0:
            raise ValueError("distance exponent d must be > 0")


@dataclass
class TrainerConfig:
    iters: int = 300
    lr: float = 1.0


@dataclass
class BagBatch:
    """Proposals of ``N`` bags stacked row-wise.

    ``weights`` gives each bag's share of the loss (defaults to ``1/N``).
    """

    features: np.ndarray
    starts: np.ndarray
    labels: np.ndarray
    s_dis: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.starts = np.asarray(self.starts, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.s_dis = np.asarray(self.s_dis, dtype=np.float64)
        n = len(self.starts)
        if self.weights is None:
            self.weights = np.full(n, 1.0 / max(n, 1))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        sizes = np.diff(np.append(self.starts, len(self.features)))
        if n and (self.starts[0] != 0 or np.any(sizes < 1)):
            raise ValueError("every bag needs at least one proposal")
        self.rows = np.repeat(np.arange(n), sizes)

    @classmethod
    def from_bags(cls, feats: list[np.ndarray], labels, s_dis: list[np.ndarray] | None = None,
                  weights=None) -> "BagBatch":
        sizes = [f.shape[0] for f in feats]
        starts = np.concatenate(([0], np.cumsum(sizes)[:-1])).astype(np.int64)
        if s_dis is None:
            s_dis = [np.ones(s) for s in sizes]
        return cls(np.vstack(feats), starts, np.asarray(labels), np.concatenate(s_dis), weights)

    @property
    def n_bags(self) -> int:
        return len(self.starts)

    def bag_slice(self, i: int) -> slice:
        end = self.starts[i + 1] if i + 1 < len(self.starts) else len(self.features)
        return slice(int(self.starts[i]), int(end))


def softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def segment_softmax(y: np.ndarray, starts: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Softmax down each column within each segment of rows."""
    mx = np.maximum.reduceat(y, starts, axis=0)
    e = np.exp(y - mx[rows])
    return e / np.add.reduceat(e, starts, axis=0)[rows]


@dataclass
class MilForward:
    A: np.ndarray  # class softmax, (R, K)
    B: np.ndarray  # proposal softmax per bag, (R, K)
    S: np.ndarray  # fused proposal scores, (R, K)
    bag: np.ndarray  # bag scores, (N, K)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def mil_forward(head: MilHead, batch: BagBatch, cls_activation: str = "softmax") -> MilForward:
    """Fused scores of every row; the class branch is a softmax over classes
    or, with ``cls_activation="sigmoid"``, an independent sigmoid per class."""
    F = batch.features
    Z = F @ head.W_cls + head.b_cls
    A = softmax_rows(Z) if cls_activation == "softmax" else _sigmoid(Z)
    B = segment_softmax(F @ head.W_ins + head.b_ins, batch.starts, batch.rows)
    S = A * B * batch.s_dis[:, None]
    bag = np.add.reduceat(S, batch.starts, axis=0)
    return MilForward(A, B, S, bag)


def mil_backward(head: MilHead, batch: BagBatch, fw: MilForward, d_bag: np.ndarray,
                 d_S: np.ndarray | None = None, cls_activation: str = "softmax") -> MilHead:
    """Chain ``dL/d bag`` (and optionally ``dL/dS``) back to head parameters."""
    dS = d_bag[batch.rows]
    if d_S is not None:
        dS = dS + d_S
    sd = batch.s_dis[:, None]
    dA = dS * fw.B * sd
    dB = dS * fw.A * sd
    if cls_activation == "softmax":
        dZ = fw.A * (dA - np.sum(dA * fw.A, axis=1, keepdims=True))
    else:
        dZ = dA * fw.A * (1.0 - fw.A)
    inner = np.add.reduceat(dB * fw.B, batch.starts, axis=0)[batch.rows]
    dY = fw.B * (dB - inner)
    F = batch.features
    return MilHead(F.T @ dZ, dZ.sum(axis=0), F.T @ dY, dY.sum(axis=0))


# ---------------------------------------------------------------- single-bag API


def score_heads(bag_features: np.ndarray, head: MilHead) -> tuple[np.ndarray, np.ndarray]:
    """Class scores (softmax over classes) and instance scores (softmax over proposals)."""
    F = np.asarray(bag_features, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] < 1:
        raise ValueError("bag features must be a non-empty (M, D) matrix")
    if F.shape[1] != head.dim:
        raise ValueError(f"feature dim {F.shape[1]} != head dim {head.dim}")
    s_cls = softmax_rows(F @ head.W_cls + head.b_cls)
    s_ins = segment_softmax(F @ head.W_ins + head.b_ins, np.array([0]), np.zeros(len(F), dtype=np.int64))
    return s_cls, s_ins


def fuse_and_bag(s_cls: np.ndarray, s_ins: np.ndarray, s_dis_row=None) -> tuple[np.ndarray, np.ndarray]:
    s_cls = np.asarray(s_cls, dtype=np.float64)
    s_ins = np.asarray(s_ins, dtype=np.float64)
    if s_cls.shape != s_ins.shape:
        raise ValueError(f"score shapes differ: {s_cls.shape} vs {s_ins.shape}")
    if s_dis_row is None:
        s_dis_row = np.ones(s_cls.shape[0])
    s_dis_row = np.asarray(s_dis_row, dtype=np.float64)
    if s_dis_row.shape != (s_cls.shape[0],):
        raise ValueError("distance scores must have one entry per proposal")
    S = s_cls * s_ins * s_dis_row[:, None]
    return S, S.sum(axis=0)


def select_psm(S: np.ndarray, class_id: int) -> int:
    """Index of the best proposal for ``class_id``; ties go to the lowest index."""
    return int(np.argmax(np.asarray(S)[:, class_id]))


# ---------------------------------------------------------------- distance guidance


def box_overlap_flags(scene: Scene, i: int, boxes: np.ndarray) -> np.ndarray:
    """``(len(boxes), N)`` flags of arbitrary boxes read as members of bag ``i``.

    ``t[m, j]`` is set when box ``m`` overlaps some proposal of bag ``j``
    (box IoU > 0) and contains the point of ``j``, for ``j != i`` of the same
    class.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = scene.n_instances
    pts = np.array([[p.x, p.y] for p in scene.points]).reshape(-1, 2)
    cls_i = scene.points[i].class_id
    t = np.zeros((len(boxes), n), dtype=bool)
    contains = points_in_boxes(pts, boxes)
    for j in range(n):
        if j == i or scene.points[j].class_id != cls_i:
            continue
        cand = contains[:, j]
        if not cand.any():
            continue
        overlaps = (box_iou_matrix(boxes, scene.bags[j].boxes) > 0.0).any(axis=1)
        t[:, j] = cand & overlaps
    return t


def overlap_flags(scene: Scene) -> list[np.ndarray]:
    """Per bag ``i`` the ``(M_i, N)`` flag table of its own proposals."""
    return [box_overlap_flags(scene, i, bag.boxes) for i, bag in enumerate(scene.bags)]


def box_distance_scores(scene: Scene, i: int, boxes: np.ndarray, cfg: DistanceConfig) -> np.ndarray:
    t = box_overlap_flags(scene, i, boxes)
    pts = np.array([[p.x, p.y] for p in scene.points]).reshape(-1, 2)
    dist = np.hypot(*(pts - pts[i]).T)
    return distance_score(t.astype(np.float64) @ dist, cfg)


def distance_weights(scene: Scene, flags: list[np.ndarray]) -> list[np.ndarray]:
    pts = np.array([[p.x, p.y] for p in scene.points]).reshape(-1, 2)
    out = []
    for i, t in enumerate(flags):
        dist = np.hypot(*(pts - pts[i]).T)
        out.append(t.astype(np.float64) @ dist)
    return out


def distance_score(w_dis, cfg: DistanceConfig) -> np.ndarray:
    """``sigmoid(1 / W)^(+d)`` (penalty form) or ``^(-d)`` (printed form); W=0 gives 1."""
    w = np.asarray(w_dis, dtype=np.float64)
    out = np.ones_like(w)
    pos = w > 0
    sig = 1.0 / (1.0 + np.exp(-1.0 / w[pos]))
    exponent = cfg.d if cfg.penalize else -cfg.d
    out[pos] = sig**exponent
    return out


def distance_scores(scene: Scene, flags: list[np.ndarray], cfg: DistanceConfig) -> list[np.ndarray]:
    return [distance_score(w, cfg) for w in distance_weights(scene, flags)]


# ---------------------------------------------------------------- loss and training


def psm_loss(bag_scores: np.ndarray, labels, weights=None) -> LossValue:
    """Weighted mean over bags of summed BCE; gradient w.r.t. the bag scores.

    ``labels`` are class indices or one-hot rows.
    """
    bag_scores = np.asarray(bag_scores, dtype=np.float64)
    n, k = bag_scores.shape
    labels = np.asarray(labels)
    onehot = labels if labels.ndim == 2 else np.eye(k)[labels]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    p, inside = np.clip(bag_scores, EPS, 1 - EPS), (bag_scores > EPS) & (bag_scores < 1 - EPS)
    per = -(onehot * np.log(p) + (1 - onehot) * np.log(1 - p))
    value = float(np.sum(w[:, None] * per))
    grad = w[:, None] * (-(onehot / p) + (1 - onehot) / (1 - p)) * inside
    return LossValue(value, grad)


def psm_objective(head: MilHead, batch: BagBatch) -> tuple[float, MilHead]:
    fw = mil_forward(head, batch)
    lv = psm_loss(fw.bag, batch.labels, batch.weights)
    return lv.value, mil_backward(head, batch, fw, lv.grad)


def _step(head: MilHead, grad: MilHead, lr: float) -> None:
    head.W_cls -= lr * grad.W_cls
    head.b_cls -= lr * grad.b_cls
    head.W_ins -= lr * grad.W_ins
    head.b_ins -= lr * grad.b_ins


def train_psm(batch: BagBatch, head: MilHead, cfg: TrainerConfig) -> tuple[MilHead, list[float]]:
    """Full-batch gradient descent on the bag loss; returns a new head and the loss trace."""
    head = head.copy()
    trace: list[float] = []
    for it in range(cfg.iters):
        value, grad = psm_objective(head, batch)
        if not math.isfinite(value):
            raise FloatingPointError(f"PSM loss became non-finite at iteration {it}")
        trace.append(value)
        _step(head, grad, cfg.lr)
    if cfg.iters:
        value, _ = psm_objective(head, batch)
        if not math.isfinite(value):
            raise FloatingPointError(f"PSM loss became non-finite at iteration {cfg.iters}")
        trace.append(value)
    return head, trace
