"""Seeded finite-difference checks over every differentiable loss chain."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .losses import LossValue, bce, dice, focal, gradcheck, smooth_l1, total_loss
from .mlar import affinity_loss
from .psm import BagBatch, MilHead, mil_backward, mil_forward, psm_loss
from .sasd import CompletenessBatch, CompletenessHead, corpus_sasd_objective, sasd_loss
from .srm import NegativeBatch, SrmConfig, srm_loss, srm_negative_loss, srm_objective, srm_positive_loss

TOL = 1e-4

# A chain draws (loss function of a flat vector, base point) from an rng.
Chain = Callable[[np.random.Generator], tuple[Callable[[np.ndarray], LossValue], np.ndarray]]


def _probs(rng, n):
    return rng.uniform(0.05, 0.95, n)


def _bce(rng):
    t = rng.integers(0, 2, 6).astype(float)
    return (lambda x: bce(x, t)), _probs(rng, 6)


def _focal(rng):
    t = rng.integers(0, 2, 6).astype(float)
    g = float(rng.uniform(0.5, 3.0))
    return (lambda x: focal(x, t, gamma=g, alpha=0.25)), _probs(rng, 6)


def _smooth_l1(rng):
    t = rng.normal(size=6)
    x = t + rng.normal(scale=1.2, size=6)
    # keep clear of the two kinks at |d| = 1
    d = x - t
    near = np.abs(np.abs(d) - 1.0) < 1e-2
    x[near] += 0.05
    return (lambda v: smooth_l1(v, t)), x


def _dice(rng):
    t = (rng.random((4, 4)) < 0.5).astype(float)
    return (lambda x: dice(x.reshape(4, 4), t)), rng.random(16)


def _bag_batch(rng, dim=3, k=3, sizes=(3, 2, 4)):
    F = rng.normal(size=(sum(sizes), dim))
    starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    labels = rng.integers(0, k, len(sizes))
    s_dis = rng.uniform(0.9, 1.0, sum(sizes))
    w = rng.uniform(0.5, 1.0, len(sizes))
    return BagBatch(F, starts, labels, s_dis, w / w.sum()), dim, k


def _psm(rng):
    batch, dim, k = _bag_batch(rng)

    def f(v):
        head = MilHead.from_vector(v, dim, k)
        fw = mil_forward(head, batch)
        lv = psm_loss(fw.bag, batch.labels, batch.weights)
        return LossValue(lv.value, mil_backward(head, batch, fw, lv.grad).to_vector())

    return f, rng.normal(scale=0.5, size=2 * dim * k + 2 * k)


def _srm_positive(rng):
    n, k = 4, 3
    psm_bag = rng.uniform(0.1, 0.9, (n, k))
    labels = rng.integers(0, k, n)
    w = rng.uniform(0.5, 1.5, n)
    return (
        lambda x: srm_positive_loss(x.reshape(n, k), psm_bag, labels, 2.0, 0.25, w),
        rng.uniform(0.05, 0.95, n * k),
    )


def _srm_negative(rng):
    u, k = 5, 3
    psm_bag = rng.uniform(0.1, 0.9, (2, k))
    labels = rng.integers(0, k, 2)
    return (lambda x: srm_negative_loss(x.reshape(u, k), psm_bag, labels)), rng.uniform(0.02, 0.9, u * k)


def _srm_combined(rng):
    n, k, u = 3, 3, 4
    psm_bag = rng.uniform(0.1, 0.9, (n, k))
    labels = rng.integers(0, k, n)

    def f(x):
        pos = srm_positive_loss(x[: n * k].reshape(n, k), psm_bag, labels)
        neg = srm_negative_loss(x[n * k :].reshape(u, k), psm_bag, labels)
        return srm_loss(pos, neg, 0.25)

    return f, rng.uniform(0.05, 0.9, n * k + u * k)


def _srm_heads(rng):
    batch, dim, k = _bag_batch(rng)
    psm_bag = rng.uniform(0.1, 0.9, (batch.n_bags, k))
    bag_image = np.array([0, 0, 1])
    neg = NegativeBatch(rng.normal(size=(5, dim)), np.array([0, 0, 1, 1, 1]), 2)
    cfg = SrmConfig()

    def f(v):
        value, grad = srm_objective(MilHead.from_vector(v, dim, k), batch, psm_bag, bag_image, neg, cfg)
        return LossValue(value, grad.to_vector())

    return f, rng.normal(scale=0.5, size=2 * dim * k + 2 * k)


def _sasd(rng):
    m, extra = 4, 2
    t_I = rng.uniform(-1, 1, m)
    t_II = rng.uniform(-1, 1, m + extra)
    return (lambda x: sasd_loss(x[:m], t_I, x[m:], t_II)), rng.uniform(-1, 1, 2 * m + extra)


def _sasd_heads(rng):
    dim = 3
    F_I = rng.normal(size=(5, dim))
    F_II = rng.normal(size=(8, dim))
    batch = CompletenessBatch(F_I, np.array([0, 3]), F_II, np.array([0, 5]), np.array([0.6, 0.4]))
    t_I = rng.uniform(-1, 1, 5)
    t_II = rng.uniform(-1, 1, 8)

    def f(v):
        hI = CompletenessHead.from_vector(v[: dim + 1], "I")
        hII = CompletenessHead.from_vector(v[dim + 1 :], "II")
        value, gI, gII = corpus_sasd_objective(hI, hII, batch, t_I, t_II)
        return LossValue(value, np.concatenate([gI.to_vector(), gII.to_vector()]))

    return f, rng.normal(scale=0.4, size=2 * (dim + 1))


def _affinity(rng):
    shape = (3, 4)
    y = (rng.random(shape) < 0.5).astype(float)
    sup = rng.random(shape) < 0.7
    sup[0, 0] = True
    n = y.size

    def f(x):
        return affinity_loss(x[:n].reshape(shape), x[n:].reshape(shape), y, sup)

    # stay away from the |.| kinks at the labels
    x = np.concatenate([y.ravel(), y.ravel()]) + rng.choice([-1, 1], 2 * n) * rng.uniform(0.1, 0.4, 2 * n)
    return f, x


def _total(rng):
    t = (rng.random((3, 3)) < 0.5).astype(float)
    c = rng.integers(0, 2, 3).astype(float)
    b = rng.integers(0, 2, 4).astype(float)

    def f(x):
        return total_loss(
            dice(x[:9].reshape(3, 3), t),
            focal(x[9:12], c),
            bce(x[12:16], b),
            bce(x[16:18], np.array([1.0, 0.0])),
            smooth_l1(x[18:20], np.array([0.2, -0.3])),
            lam=0.25,
        )

    x = np.concatenate([rng.random(9), _probs(rng, 3), _probs(rng, 4), _probs(rng, 2),
                        rng.uniform(-0.5, 0.5, 2)])
    return f, x


CHAINS: dict[str, Chain] = {
    "bce": _bce,
    "focal": _focal,
    "smooth_l1": _smooth_l1,
    "dice": _dice,
    "psm_loss": _psm,
    "srm_positive": _srm_positive,
    "srm_negative": _srm_negative,
    "srm_loss": _srm_combined,
    "srm_heads": _srm_heads,
    "sasd_loss": _sasd,
    "sasd_heads": _sasd_heads,
    "affinity_loss": _affinity,
    "total_loss": _total,
}


@dataclass
class ChainResult:
    name: str
    points: int
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def _corrupt(f):
    # test hook: a 1% gradient scaling error
    def g(x):
        lv = f(x)
        return LossValue(lv.value, lv.grad * 1.01)

    return g


def run_suite(points: int = 100, seed: int = 0, tol: float = TOL, inject: str | None = None,
              chains: list[str] | None = None) -> list[ChainResult]:
    """Check every chain at ``points`` seeded random points.

    ``inject`` names a chain whose analytic gradient is deliberately wrong.
    """
    names = list(CHAINS) if chains is None else chains
    unknown = [n for n in names + ([inject] if inject else []) if n not in CHAINS]
    if unknown:
        raise KeyError(f"unknown loss chain {unknown[0]!r}; known: {', '.join(CHAINS)}")
    out = []
    for ci, name in enumerate(names):
        rng = np.random.default_rng(np.random.SeedSequence([seed, ci]))
        worst = 0.0
        for _ in range(points):
            f, x = CHAINS[name](rng)
            if name == inject:
                f = _corrupt(f)
            worst = max(worst, gradcheck(f, x, tol=tol, name=name).max_rel_err)
        out.append(ChainResult(name, points, worst, tol))
    return out
