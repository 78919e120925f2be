"""Selection refinement: proposal augmentation, negatives, refinement losses, box mining."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset_io import ProposalBag, Scene
from .geometry import Box, box_contains, box_iou, box_iou_matrix
from .losses import EPS, LossValue, focal
from .psm import BagBatch, MilHead, TrainerConfig, _sigmoid, _step, mil_backward, mil_forward


@dataclass
class PnpgConfig:
    v: float = 0.1
    t_neg1: float = 0.3
    t_neg2: float = 0.5
    n_bg: int = 32
    n_part: int = 8
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("t_neg1", "t_neg2"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.n_bg < 0 or self.n_part < 0:
            raise ValueError("negative counts must be >= 0")


@dataclass
class BmsConfig:
    k: int = 3
    t_min1: float = 0.6
    t_min2: float = 0.3

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        for name in ("t_min1", "t_min2"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass
class SrmConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    focal_alpha: float = 0.25
    cls_activation: str = "sigmoid"
    trainer: TrainerConfig = None

    def __post_init__(self):
        if self.trainer is None:
            self.trainer = TrainerConfig()
        if self.cls_activation not in ("sigmoid", "softmax"):
            raise ValueError("cls_activation must be 'sigmoid' or 'softmax'")


# ---------------------------------------------------------------- proposal generation


def sample_positive(b_psm, s_dis: float, cfg: PnpgConfig) -> list[Box]:
    """Four rescaled copies of ``b_psm``.

    With ``delta = v / s_dis`` the sizes are ``(1 +/- delta)`` times the
    original; each size is placed center-preserving
    (``x - (w' - w) / 2``) and corner-shifted (``x + (w' - w) / 2``).
    Order: grow/center, grow/shifted, shrink/center, shrink/shifted.
    """
    if not s_dis > 0:
        raise ValueError("s_dis must be > 0")
    x, y, w, h = (float(v) for v in b_psm[:4])
    delta = cfg.v / s_dis
    out = []
    for size_sign in (1.0, -1.0):
        nw = max((1.0 + size_sign * delta) * w, 0.0)
        nh = max((1.0 + size_sign * delta) * h, 0.0)
        for shift in (-1.0, 1.0):
            out.append(Box(x + shift * (nw - w) / 2.0, y + shift * (nh - h) / 2.0, nw, nh))
    return out


def sample_background_negatives(scene: Scene, cfg: PnpgConfig, rng: np.random.Generator,
                                max_tries: int | None = None) -> list[Box]:
    """Random image boxes whose best IoU with every bag proposal is below ``t_neg1``."""
    if cfg.n_bg == 0:
        return []
    all_boxes = np.vstack([bag.boxes for bag in scene.bags])
    tries = max_tries if max_tries is not None else 4 * cfg.n_bg
    W, H = scene.width, scene.height
    cand = np.empty((tries, 4))
    cand[:, 2] = rng.uniform(0.05, 0.5, tries) * W
    cand[:, 3] = rng.uniform(0.05, 0.5, tries) * H
    cand[:, 0] = rng.uniform(0.0, 1.0, tries) * (W - cand[:, 2])
    cand[:, 1] = rng.uniform(0.0, 1.0, tries) * (H - cand[:, 3])
    keep = box_iou_matrix(cand, all_boxes).max(axis=1) < cfg.t_neg1
    return [Box.from_array(b) for b in cand[keep][: cfg.n_bg]]


def sample_part_negatives(b_psm, cfg: PnpgConfig, rng: np.random.Generator,
                          max_tries: int | None = None) -> list[Box]:
    """Sub-boxes of ``b_psm`` whose IoU with it is below ``t_neg2``."""
    if cfg.n_part == 0:
        return []
    x, y, w, h = (float(v) for v in b_psm[:4])
    tries = max_tries if max_tries is not None else 4 * cfg.n_part
    cand = np.empty((tries, 4))
    cand[:, 2] = rng.uniform(0.1, 0.7, tries) * w
    cand[:, 3] = rng.uniform(0.1, 0.7, tries) * h
    cand[:, 0] = x + rng.uniform(0.0, 1.0, tries) * (w - cand[:, 2])
    cand[:, 1] = y + rng.uniform(0.0, 1.0, tries) * (h - cand[:, 3])
    keep = box_iou_matrix(cand, np.array([[x, y, w, h]]))[:, 0] < cfg.t_neg2
    return [Box.from_array(b) for b in cand[keep][: cfg.n_part]]


# ---------------------------------------------------------------- losses


def _true_class(scores: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        return np.sum(scores * labels, axis=1)
    return scores[np.arange(len(labels)), labels]


def _label_index(labels) -> np.ndarray:
    labels = np.asarray(labels)
    return labels.argmax(axis=1) if labels.ndim == 2 else labels.astype(np.int64)


def srm_positive_loss(srm_bag, psm_bag, labels, gamma: float = 2.0, alpha: float = 0.25,
                      weights=None) -> LossValue:
    """PSM-confidence-weighted focal loss on the true-class SRM bag score.

    The PSM weight is a constant; the gradient is w.r.t. ``srm_bag`` only.
    ``weights`` replaces the plain ``1/N`` average.
    """
    srm_bag = np.asarray(srm_bag, dtype=np.float64)
    psm_bag = np.asarray(psm_bag, dtype=np.float64)
    n = srm_bag.shape[0]
    idx = _label_index(labels)
    conf = psm_bag[np.arange(n), idx]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    p = srm_bag[np.arange(n), idx]
    fl = focal(p, np.ones(n), gamma=gamma, alpha=alpha)
    # per-entry focal values, recomputed to weight them individually
    pc = np.clip(p, EPS, 1 - EPS)
    per = -alpha * (1 - pc) ** gamma * np.log(pc)
    value = float(np.sum(w * conf * per))
    grad = np.zeros_like(srm_bag)
    grad[np.arange(n), idx] = w * conf * fl.grad
    return LossValue(value, grad)


def negative_weight(psm_bag, labels) -> float:
    """Mean true-class PSM bag score over the image's instances."""
    return float(np.mean(_true_class(np.asarray(psm_bag, dtype=np.float64), labels)))


def srm_negative_loss(neg_scores, psm_bag, labels, beta: float | None = None) -> LossValue:
    """``-(1/|U|) sum_U sum_k beta s_k^2 log(1 - s_k)``; gradient w.r.t. ``neg_scores``."""
    s = np.asarray(neg_scores, dtype=np.float64)
    if s.size == 0:
        return LossValue(0.0, np.zeros_like(s))
    if beta is None:
        beta = negative_weight(psm_bag, labels)
    u = s.shape[0]
    sc = np.clip(s, 0.0, 1.0 - EPS)
    log1m = np.log1p(-sc)
    value = -beta / u * np.sum(sc * sc * log1m)
    grad = -beta / u * (2.0 * sc * log1m - sc * sc / (1.0 - sc))
    return LossValue(value, grad)


def srm_loss(pos: LossValue, neg: LossValue, alpha: float = 0.25) -> LossValue:
    """``alpha * pos + (1 - alpha) * neg``; gradient blocks are concatenated."""
    return LossValue(
        alpha * pos.value + (1.0 - alpha) * neg.value,
        np.concatenate([alpha * np.ravel(pos.grad), (1.0 - alpha) * np.ravel(neg.grad)]),
    )


# ---------------------------------------------------------------- training


@dataclass
class NegativeBatch:
    """Negative proposals of many images; ``image`` maps rows to image index."""

    features: np.ndarray
    image: np.ndarray
    n_images: int


def srm_objective(head: MilHead, pos: BagBatch, psm_bag: np.ndarray, bag_image: np.ndarray,
                  neg: NegativeBatch, cfg: SrmConfig) -> tuple[float, MilHead]:
    """Corpus SRM loss: mean over images of ``alpha * L_pos + (1 - alpha) * L_neg``.

    ``pos.weights`` must already hold ``1 / (N_img * n_images)`` per bag.
    """
    fw = mil_forward(head, pos, cfg.cls_activation)
    lp = srm_positive_loss(fw.bag, psm_bag, pos.labels, cfg.gamma, cfg.focal_alpha, pos.weights)
    grad = mil_backward(head, pos, fw, cfg.alpha * lp.grad, cls_activation=cfg.cls_activation)
    value = cfg.alpha * lp.value
    if neg.features.shape[0]:
        conf = psm_bag[np.arange(pos.n_bags), pos.labels]
        n_img = neg.n_images
        beta = np.bincount(bag_image, weights=conf, minlength=n_img) / np.maximum(
            np.bincount(bag_image, minlength=n_img), 1
        )
        u = np.bincount(neg.image, minlength=n_img).astype(np.float64)
        z = neg.features @ head.W_cls + head.b_cls
        s = _sigmoid(z)
        sc = np.clip(s, 0.0, 1.0 - EPS)
        log1m = np.log1p(-sc)
        rw = (beta[neg.image] / u[neg.image] / n_img)[:, None]
        value += (1.0 - cfg.alpha) * float(-np.sum(rw * sc * sc * log1m))
        ds = -rw * (2.0 * sc * log1m - sc * sc / (1.0 - sc))
        dz = (1.0 - cfg.alpha) * ds * s * (1.0 - s)
        grad.W_cls += neg.features.T @ dz
        grad.b_cls += dz.sum(axis=0)
    return value, grad


def train_srm(pos: BagBatch, psm_bag: np.ndarray, bag_image: np.ndarray, neg: NegativeBatch,
              head: MilHead, cfg: SrmConfig) -> tuple[MilHead, list[float]]:
    head = head.copy()
    trace: list[float] = []
    for it in range(cfg.trainer.iters):
        value, grad = srm_objective(head, pos, psm_bag, bag_image, neg, cfg)
        if not math.isfinite(value):
            raise FloatingPointError(f"SRM loss became non-finite at iteration {it}")
        trace.append(value)
        _step(head, grad, cfg.trainer.lr)
    if cfg.trainer.iters:
        trace.append(srm_objective(head, pos, psm_bag, bag_image, neg, cfg)[0])
    return head, trace


# ---------------------------------------------------------------- box mining


@dataclass
class MiningResult:
    box: Box
    branch: str  # "none", "expand" (first rule) or "contain" (second rule)
    merged_with: int | None


def box_mining(b_sel, boxes: np.ndarray, scores: np.ndarray, cfg: BmsConfig) -> MiningResult:
    """Expand ``b_sel`` using the top-k scoring boxes of the positive bag.

    Candidates are visited in descending score order (stable on ties). A
    candidate must be larger than ``b_sel``. If its IoU exceeds ``t_min1`` it
    is merged as ``(b_j + iou * b_sel) / (iou + 1)`` and ``t_min1`` rises to
    that IoU. Otherwise, while no such merge has happened yet, a candidate that
    contains ``b_sel`` with IoU above ``t_min2`` is merged as
    ``(iou * b_j + b_sel) / (iou + 1)`` and ``t_min2`` rises to that IoU.
    """
    sel = np.array([float(v) for v in b_sel[:4]])
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")[: cfg.k]
    t1, t2 = cfg.t_min1, cfg.t_min2
    cnt = 0
    out, branch, merged = sel.copy(), "none", None
    sel_area = sel[2] * sel[3]
    for j in order:
        bj = boxes[j]
        if not bj[2] * bj[3] > sel_area:
            continue
        iou = box_iou(bj, sel)
        if iou > t1:
            out = (bj + iou * sel) / (iou + 1.0)
            t1 = iou
            cnt += 1
            branch, merged = "expand", int(j)
        elif cnt == 0 and box_contains(bj, sel) and iou > t2:
            out = (bj * iou + sel) / (iou + 1.0)
            t2 = iou
            branch, merged = "contain", int(j)
    return MiningResult(Box.from_array(out), branch, merged)


def match_mask(b_srm, bag: ProposalBag) -> tuple[int, np.ndarray]:
    """Mask of the proposal whose box best overlaps ``b_srm`` (lowest index on ties)."""
    idx = [i for i, p in enumerate(bag.proposals) if p.mask is not None]
    if not idx:
        raise ValueError(f"bag {bag.instance_id} has no mask proposals")
    boxes = np.array([bag.proposals[i].box.as_array() for i in idx])
    iou = box_iou_matrix(np.array([[float(v) for v in b_srm[:4]]]), boxes)[0]
    best = idx[int(np.argmax(iou))]
    return best, bag.proposals[best].mask
