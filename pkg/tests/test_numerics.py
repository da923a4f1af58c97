import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from e2bows.errors import DimensionError, NumericError
from e2bows.numerics import dot, finite_diff_check, l2_normalize


def test_dot_and_mismatch():
    assert dot([1, 2, 3], [4, 5, 6]) == 32.0
    with pytest.raises(DimensionError):
        dot([1, 2], [1, 2, 3])


def test_l2_normalize_zero_is_unchanged():
    z = np.zeros(4)
    assert np.array_equal(l2_normalize(z), z)
    assert np.allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
def test_l2_normalize_unit_or_zero(xs):
    v = l2_normalize(np.array(xs))
    n = np.linalg.norm(v)
    assert n == 0.0 or abs(n - 1.0) < 1e-9


def test_finite_diff_quadratic_and_restores_input():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3))
    x = rng.normal(size=3)
    x0 = x.copy()
    f = lambda z: float(z @ a @ z)
    rep = finite_diff_check(f, x, (a + a.T) @ x)
    assert rep.max_rel_error < 1e-6
    assert np.array_equal(x, x0)


def test_finite_diff_flags_wrong_gradient():
    x = np.array([1.0, 2.0])
    rep = finite_diff_check(lambda z: float(np.sum(z ** 2)), x, np.array([2.0, 0.0]))
    assert rep.max_rel_error > 0.5
    assert rep.worst_coordinate == (1,)


def test_finite_diff_nonfinite_raises():
    with pytest.raises(NumericError):
        finite_diff_check(lambda z: np.inf if z[0] > 0 else 0.0, np.array([0.0]), np.array([1.0]))
