"""Scalar losses with exact gradients, plus a central-difference checker."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

EPS = 1e-7


@dataclass
class LossValue:
    """A loss value and its gradient w.r.t. whatever it was evaluated on."""

    value: float
    grad: np.ndarray

    def __post_init__(self):
        self.value = float(self.value)
        self.grad = np.asarray(self.grad, dtype=np.float64)

    def scaled(self, factor: float) -> "LossValue":
        return LossValue(self.value * factor, self.grad * factor)


def _clamp(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    inside = (p > EPS) & (p < 1.0 - EPS)
    return np.clip(p, EPS, 1.0 - EPS), inside


def bce(pred, target) -> LossValue:
    """Summed binary cross-entropy over the entries of ``pred``."""
    p, inside = _clamp(pred)
    c = np.asarray(target, dtype=np.float64)
    value = -np.sum(c * np.log(p) + (1.0 - c) * np.log(1.0 - p))
    grad = (-(c / p) + (1.0 - c) / (1.0 - p)) * inside
    return LossValue(value, grad)


def focal(pred, target, gamma: float = 2.0, alpha: float = 0.25) -> LossValue:
    """Summed focal loss ``-alpha (1 - p_t)^gamma log p_t``.

    ``alpha`` weights every entry uniformly, so ``gamma=0, alpha=1`` is exactly
    cross-entropy.
    """
    p, inside = _clamp(pred)
    t = np.asarray(target, dtype=np.float64)
    pt = np.where(t > 0.5, p, 1.0 - p)
    sign = np.where(t > 0.5, 1.0, -1.0)
    one_m = 1.0 - pt
    log_pt = np.log(pt)
    value = -alpha * np.sum(one_m**gamma * log_pt)
    if gamma == 0.0:
        d_pt = -alpha / pt
    else:
        d_pt = alpha * (gamma * one_m ** (gamma - 1.0) * log_pt - one_m**gamma / pt)
    return LossValue(value, d_pt * sign * inside)


def smooth_l1(pred, target, beta: float = 1.0) -> LossValue:
    """Summed smooth-L1 with transition at ``beta``; gradient w.r.t. ``pred``."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    ad = np.abs(d)
    quad = ad < beta
    value = np.sum(np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta))
    grad = np.where(quad, d / beta, np.sign(d))
    return LossValue(value, grad)


def dice(pred_mask, target_mask, smooth: float = 1.0) -> LossValue:
    """``1 - (2|PT| + s) / (|P|^2 + |T|^2 + s)`` with gradient w.r.t. the soft mask."""
    p = np.asarray(pred_mask, dtype=np.float64)
    t = np.asarray(target_mask, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    num = 2.0 * np.sum(p * t) + smooth
    den = np.sum(p * p) + np.sum(t * t) + smooth
    value = 1.0 - num / den
    grad = -(2.0 * t * den - num * 2.0 * p) / (den * den)
    return LossValue(value, grad)


def total_loss(
    mask: LossValue,
    cls: LossValue,
    psm: LossValue,
    srm: LossValue,
    aff: LossValue,
    lam: float = 0.25,
) -> LossValue:
    """``mask + cls + lam * psm + srm + aff``; gradient blocks are concatenated."""
    value = mask.value + cls.value + lam * psm.value + srm.value + aff.value
    grad = np.concatenate(
        [
            np.ravel(mask.grad),
            np.ravel(cls.grad),
            lam * np.ravel(psm.grad),
            np.ravel(srm.grad),
            np.ravel(aff.grad),
        ]
    )
    return LossValue(value, grad)


@dataclass
class GradReport:
    name: str
    max_rel_err: float
    points: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def gradcheck(
    f: Callable[[np.ndarray], LossValue],
    x,
    step: float = 1e-6,
    tol: float = 1e-4,
    floor: float = 1e-5,
    name: str = "f",
) -> GradReport:
    """Compare ``f(x).grad`` against central differences.

    The relative error of each component is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps near-zero components from dividing round-off by zero.
    """
    x = np.array(x, dtype=np.float64)
    base = f(x)
    analytic = np.ravel(base.grad)
    if analytic.size != x.size:
        raise ValueError(f"{name}: gradient has {analytic.size} entries, expected {x.size}")
    if not np.isfinite(base.value) or not np.all(np.isfinite(analytic)):
        raise FloatingPointError(f"{name}: non-finite evaluation at the base point")
    flat = x.ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x).value
        flat[i] = orig - step
        lo = f(x).value
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError(f"{name}: non-finite evaluation at component {i}")
        numeric[i] = (hi - lo) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
    return GradReport(name, err, 1, tol)
