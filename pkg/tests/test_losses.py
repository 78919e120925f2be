import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pointmine.losses import EPS, LossValue, bce, dice, focal, gradcheck, smooth_l1, total_loss

probs = arrays(np.float64, st.integers(1, 6), elements=st.floats(0.01, 0.99))


class TestBce:
    def test_perfect(self):
        assert bce([1 - EPS, EPS], [1, 0]).value == pytest.approx(0.0, abs=1e-6)

    def test_half(self):
        assert bce([0.5, 0.5], [1, 0]).value == pytest.approx(2 * math.log(2))

    def test_gradcheck(self, rng):
        t = np.array([1.0, 0.0, 1.0])
        x = rng.uniform(0.1, 0.9, 3)
        assert gradcheck(lambda p: bce(p, t), x, tol=1e-5).passed


class TestFocal:
    def test_perfect(self):
        assert focal([1 - EPS], [1]).value == pytest.approx(0.0, abs=1e-12)

    def test_half(self):
        assert focal([0.5], [1], gamma=2, alpha=0.25).value == pytest.approx(0.25 * 0.25 * math.log(2))

    def test_gradcheck(self, rng):
        t = np.array([1.0, 0.0, 0.0, 1.0])
        x = rng.uniform(0.1, 0.9, 4)
        assert gradcheck(lambda p: focal(p, t), x, tol=1e-5).passed


@given(probs, st.data())
def test_focal_gamma0_alpha1_is_cross_entropy(p, data):
    t = np.array(data.draw(st.lists(st.integers(0, 1), min_size=p.size, max_size=p.size)), float)
    assert focal(p, t, gamma=0.0, alpha=1.0).value == pytest.approx(bce(p, t).value, abs=1e-12)
    assert np.allclose(focal(p, t, gamma=0.0, alpha=1.0).grad, bce(p, t).grad, atol=1e-12)


class TestSmoothL1:
    def test_zero(self):
        assert smooth_l1([1.5], [1.5]).value == 0.0

    def test_quadratic_zone(self):
        assert smooth_l1([0.5], [0.0]).value == pytest.approx(0.125)

    def test_linear_zone(self):
        assert smooth_l1([2.0], [0.0]).value == pytest.approx(1.5)
        assert smooth_l1([2.0], [0.0]).grad.tolist() == [1.0]


class TestDice:
    def test_perfect(self):
        m = np.array([[1, 0], [1, 1]], float)
        assert dice(m, m).value == pytest.approx(0.0, abs=1e-12)

    def test_empty_pred(self):
        t = np.ones((8, 8))
        assert dice(np.zeros((8, 8)), t).value == pytest.approx(1 - 1 / 65)

    def test_half_overlap(self):
        p = np.array([[1, 1], [0, 0]], float)
        t = np.array([[1, 0], [1, 0]], float)
        assert dice(p, t).value == pytest.approx(1 - 3 / 5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice(np.zeros((2, 2)), np.zeros((2, 3)))


class TestTotal:
    def z(self):
        return LossValue(0.0, [0.0])

    def test_zero(self):
        assert total_loss(self.z(), self.z(), self.z(), self.z(), self.z()).value == 0.0

    def test_lambda(self):
        z = self.z()
        assert total_loss(z, z, LossValue(4.0, [1.0]), z, z, lam=0.25).value == 1.0

    def test_random(self, rng):
        parts = [LossValue(v, rng.normal(size=2)) for v in rng.uniform(0, 3, 5)]
        out = total_loss(*parts, lam=0.25)
        vals = [p.value for p in parts]
        assert out.value == pytest.approx(vals[0] + vals[1] + 0.25 * vals[2] + vals[3] + vals[4])
        assert np.allclose(out.grad[4:6], 0.25 * parts[2].grad)


@given(probs, st.integers(0, 2**31))
def test_losses_nonnegative(p, seed):
    rng = np.random.default_rng(seed)
    t = rng.integers(0, 2, p.size).astype(float)
    assert bce(p, t).value >= 0
    assert focal(p, t).value >= 0
    assert smooth_l1(p, t).value >= 0
    assert dice(p, t).value >= -1e-12


class TestGradcheck:
    def test_quadratic(self):
        r = gradcheck(lambda x: LossValue(float(x @ x), 2 * x), np.array([0.3, -1.2, 2.0]))
        assert r.max_rel_err < 1e-8 and r.passed

    def test_corrupted_fails(self):
        r = gradcheck(lambda x: LossValue(float(x @ x), 2.02 * x), np.array([0.3, -1.2]))
        assert not r.passed

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            gradcheck(lambda x: LossValue(0.0, [0.0]), np.zeros(2))

    def test_non_finite(self):
        with pytest.raises(FloatingPointError):
            gradcheck(lambda x: LossValue(float("nan"), x), np.zeros(2))
