"""Completeness heads, self-generated IoU targets and holistic re-scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import box_iou_matrix
from .losses import LossValue, smooth_l1
from .psm import TrainerConfig


@dataclass
class CompletenessHead:
    W: np.ndarray
    b: float
    stage: str = "I"

    @classmethod
    def zeros(cls, dim: int, stage: str = "I") -> "CompletenessHead":
        if stage not in ("I", "II"):
            raise ValueError("stage must be 'I' or 'II'")
        return cls(np.zeros(dim), 0.0, stage)

    def copy(self) -> "CompletenessHead":
        return CompletenessHead(self.W.copy(), float(self.b), self.stage)

    def to_vector(self) -> np.ndarray:
        return np.append(self.W, self.b)

    @classmethod
    def from_vector(cls, v, stage: str = "I") -> "CompletenessHead":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:-1].copy(), float(v[-1]), stage)


@dataclass
class CompletenessTargets:
    T: np.ndarray
    T_prime: np.ndarray


@dataclass
class SasdConfig:
    k: int = 3
    loops: int = 2
    trainer: TrainerConfig = None
    standardize: bool = True

    def __post_init__(self):
        if self.trainer is None:
            self.trainer = TrainerConfig(iters=300, lr=1.0)
        if self.k < 1 or self.loops < 0:
            raise ValueError("k must be >= 1 and loops >= 0")


def _topk(scores: np.ndarray, k: int) -> np.ndarray:
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")[: min(k, len(scores))]


def context_enhance(bag_features: np.ndarray, scores, k: int) -> np.ndarray:
    """Add the mean of the ``k`` best-scoring rows to every row."""
    F = np.asarray(bag_features, dtype=np.float64)
    ctx = F[_topk(scores, k)].mean(axis=0)
    return F + ctx[None, :]


def completeness_targets(boxes: np.ndarray, b_star) -> CompletenessTargets:
    T = box_iou_matrix(boxes, np.asarray([float(v) for v in b_star[:4]]))[:, 0]
    return CompletenessTargets(T, 2.0 * T - 1.0)


def predict_completeness(F_star: np.ndarray, head: CompletenessHead) -> np.ndarray:
    F_star = np.asarray(F_star, dtype=np.float64)
    if F_star.shape[-1] != head.W.shape[0]:
        raise ValueError(f"feature dim {F_star.shape[-1]} != head dim {head.W.shape[0]}")
    return np.tanh(F_star @ head.W + head.b)


def sasd_loss(s_I, t_I, s_II, t_II) -> LossValue:
    """Two target terms plus a consistency term, each averaged over its own entries.

    The first ``len(s_I)`` entries of the stage-II vectors are the proposals
    shared with stage I; the consistency term compares only those. The
    gradient is ``[d/ds_I, d/ds_II]``.
    """
    s_I = np.asarray(s_I, dtype=np.float64)
    s_II = np.asarray(s_II, dtype=np.float64)
    m = len(s_I)
    if len(t_I) != m or len(t_II) != len(s_II):
        raise ValueError("each prediction needs one target per entry")
    if len(s_II) < m:
        raise ValueError(f"stage-II bag has {len(s_II)} entries, fewer than the {m} shared ones")
    a = smooth_l1(s_I, t_I)
    b = smooth_l1(s_II, t_II)
    c = smooth_l1(s_I, s_II[:m])
    value = a.value / m + b.value / len(s_II) + c.value / m
    g_I = a.grad / m + c.grad / m
    g_II = b.grad / len(s_II)
    g_II[:m] -= c.grad / m
    return LossValue(value, np.concatenate([g_I, g_II]))


def holistic_score(S: np.ndarray, s_comp) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    factor = (np.asarray(s_comp, dtype=np.float64) + 1.0) / 2.0
    return S * factor.reshape(-1, *([1] * (S.ndim - 1)))


def select_holistic(S_prime: np.ndarray, class_id: int) -> int:
    return int(np.argmax(np.asarray(S_prime)[:, class_id]))


# ---------------------------------------------------------------- corpus training


@dataclass
class CompletenessBatch:
    """Stacked enhanced features of many bags for both stages.

    Stage-II bag ``i`` occupies ``rows_II[starts_II[i]:...]`` and its first
    ``sizes_I[i]`` rows are the proposals shared with stage-I bag ``i``.
    """

    F_I: np.ndarray
    starts_I: np.ndarray
    F_II: np.ndarray
    starts_II: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.sizes_I = np.diff(np.append(self.starts_I, len(self.F_I)))
        self.sizes_II = np.diff(np.append(self.starts_II, len(self.F_II)))
        if np.any(self.sizes_II < self.sizes_I):
            raise ValueError("stage-II bags must contain the stage-I proposals")
        self.bag_I = np.repeat(np.arange(len(self.starts_I)), self.sizes_I)
        self.bag_II = np.repeat(np.arange(len(self.starts_II)), self.sizes_II)
        local = np.arange(len(self.F_I)) - self.starts_I[self.bag_I]
        self.shared = self.starts_II[self.bag_I] + local


def _sl1_terms(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ad = np.abs(d)
    quad = ad < 1.0
    return np.where(quad, 0.5 * d * d, ad - 0.5), np.where(quad, d, np.sign(d))


def corpus_sasd_objective(head_I: CompletenessHead, head_II: CompletenessHead,
                          batch: CompletenessBatch, t_I: np.ndarray, t_II: np.ndarray):
    """Bag-weighted sum of per-bag ``sasd_loss`` with gradients for both heads."""
    sI = np.tanh(batch.F_I @ head_I.W + head_I.b)
    sII = np.tanh(batch.F_II @ head_II.W + head_II.b)
    wI = batch.weights[batch.bag_I] / batch.sizes_I[batch.bag_I]
    wII = batch.weights[batch.bag_II] / batch.sizes_II[batch.bag_II]
    per_a, da = _sl1_terms(sI - t_I)
    per_b, db = _sl1_terms(sII - t_II)
    per_c, dc = _sl1_terms(sI - sII[batch.shared])
    value = float(np.sum(wI * (per_a + per_c)) + np.sum(wII * per_b))
    gI = wI * (da + dc)
    gII = wII * db
    np.subtract.at(gII, batch.shared, wI * dc)
    zI = gI * (1.0 - sI * sI)
    zII = gII * (1.0 - sII * sII)
    grad_I = CompletenessHead(batch.F_I.T @ zI, float(zI.sum()), "I")
    grad_II = CompletenessHead(batch.F_II.T @ zII, float(zII.sum()), "II")
    return value, grad_I, grad_II


def train_completeness(batch: CompletenessBatch, t_I: np.ndarray, t_II: np.ndarray,
                       head_I: CompletenessHead, head_II: CompletenessHead,
                       cfg: TrainerConfig, max_halvings: int = 30):
    """Full-batch gradient descent on both heads; targets are constants.

    Each step starts at ``cfg.lr`` and is halved until the loss does not
    increase, so the trace is non-increasing.
    """
    head_I, head_II = head_I.copy(), head_II.copy()
    value, gI, gII = corpus_sasd_objective(head_I, head_II, batch, t_I, t_II)
    trace = [value]
    for it in range(cfg.iters):
        step = cfg.lr
        for _ in range(max_halvings):
            cand_I = CompletenessHead(head_I.W - step * gI.W, head_I.b - step * gI.b, "I")
            cand_II = CompletenessHead(head_II.W - step * gII.W, head_II.b - step * gII.b, "II")
            v, cgI, cgII = corpus_sasd_objective(cand_I, cand_II, batch, t_I, t_II)
            if math.isfinite(v) and v <= value:
                break
            step *= 0.5
        else:
            break  # no descent step found; at a stationary point to working precision
        head_I, head_II, value, gI, gII = cand_I, cand_II, v, cgI, cgII
        trace.append(value)
    return head_I, head_II, trace


@dataclass
class DistillBag:
    """One instance seen by both stages (stage-II rows start with the stage-I rows)."""

    feats_I: np.ndarray
    boxes_I: np.ndarray
    score_I: np.ndarray  # class column of the stage-I scores
    feats_II: np.ndarray
    boxes_II: np.ndarray
    score_II: np.ndarray
    weight: float
    n_select: int | None = None  # only the leading stage-II rows may be selected

    def pick_II(self, scores: np.ndarray) -> int:
        n = len(scores) if self.n_select is None else self.n_select
        return int(np.argmax(scores[:n]))


@dataclass
class DistillResult:
    sel_I: np.ndarray
    sel_II: np.ndarray
    comp_I: list
    comp_II: list
    head_I: CompletenessHead
    head_II: CompletenessHead
    trace: list


def self_distill(bags: list[DistillBag], cfg: SasdConfig) -> DistillResult:
    """Select, retarget, retrain and reselect for ``cfg.loops`` rounds.

    Context enhancement always uses the stage's raw selection scores; the
    targets of each round are IoUs with the previous round's holistic winner.
    """
    n = len(bags)
    sel_I = np.array([int(np.argmax(b.score_I)) for b in bags], dtype=np.int64)
    sel_II = np.array([b.pick_II(b.score_II) for b in bags], dtype=np.int64)
    dim = bags[0].feats_I.shape[1] if n else 0
    head_I, head_II = CompletenessHead.zeros(dim, "I"), CompletenessHead.zeros(dim, "II")
    comp_I = [np.zeros(len(b.score_I)) for b in bags]
    comp_II = [np.zeros(len(b.score_II)) for b in bags]
    trace: list = []
    if n == 0 or cfg.loops == 0:
        return DistillResult(sel_I, sel_II, comp_I, comp_II, head_I, head_II, trace)
    enh_I = [context_enhance(b.feats_I, b.score_I, cfg.k) for b in bags]
    enh_II = [context_enhance(b.feats_II, b.score_II, cfg.k) for b in bags]
    if cfg.standardize:
        # fixed per-column affine map; keeps GD well conditioned across corpora
        allF = np.vstack(enh_I + enh_II)
        mu, sd = allF.mean(axis=0), allF.std(axis=0)
        sd[sd < 1e-12] = 1.0
        enh_I = [(f - mu) / sd for f in enh_I]
        enh_II = [(f - mu) / sd for f in enh_II]
    sizes_I = [len(b.score_I) for b in bags]
    sizes_II = [len(b.score_II) for b in bags]
    batch = CompletenessBatch(
        np.vstack(enh_I),
        np.concatenate(([0], np.cumsum(sizes_I)[:-1])).astype(np.int64),
        np.vstack(enh_II),
        np.concatenate(([0], np.cumsum(sizes_II)[:-1])).astype(np.int64),
        np.array([b.weight for b in bags]),
    )
    for _ in range(cfg.loops):
        t_I = np.concatenate(
            [completeness_targets(b.boxes_I, b.boxes_I[s]).T_prime for b, s in zip(bags, sel_I)]
        )
        t_II = np.concatenate(
            [completeness_targets(b.boxes_II, b.boxes_II[s]).T_prime for b, s in zip(bags, sel_II)]
        )
        head_I, head_II, tr = train_completeness(batch, t_I, t_II, head_I, head_II, cfg.trainer)
        trace.append(tr)
        comp_I = [predict_completeness(f, head_I) for f in enh_I]
        comp_II = [predict_completeness(f, head_II) for f in enh_II]
        sel_I = np.array(
            [int(np.argmax(holistic_score(b.score_I, c))) for b, c in zip(bags, comp_I)],
            dtype=np.int64,
        )
        sel_II = np.array(
            [b.pick_II(holistic_score(b.score_II, c)) for b, c in zip(bags, comp_II)],
            dtype=np.int64,
        )
    return DistillResult(sel_I, sel_II, comp_I, comp_II, head_I, head_II, trace)
