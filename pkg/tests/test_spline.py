import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.interpolate import BSpline
from scipy.special import comb

from racesim.spline import SplineSpec, SplineSpecError, build_basis, eval_basis_row

B = build_basis()


def test_default_dimension():
    assert B.dimension == 9
    assert B(100.0).shape == (9,)


def test_bernstein_case():
    b = build_basis(SplineSpec(internal_knots=()))
    assert b.dimension == 4
    x = np.linspace(0, 1650, 37)
    u = x / 1650
    expected = np.column_stack([comb(3, k) * u**k * (1 - u) ** (3 - k) for k in range(4)])
    assert np.abs(b.rows(x) - expected).max() < 1e-12


@pytest.mark.parametrize("knots", [(90.0, 90.0, 800.0), (250.0, 90.0), (0.0, 500.0), (500.0, 1650.0)])
def test_bad_knots(knots):
    with pytest.raises(SplineSpecError):
        build_basis(SplineSpec(internal_knots=knots))


def test_left_endpoint():
    row = eval_basis_row(B, 0.0)
    assert row.tolist() == [1.0] + [0.0] * 8


def test_local_support_below_first_knot():
    row = eval_basis_row(B, 50.0)
    assert np.all(row[:4] > 0) and np.all(row[4:] == 0)


def test_clamp_above_upper_and_reject_negative():
    assert np.array_equal(B(1700.0), B(1650.0))
    assert B(1650.0)[-1] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        B(-0.1)


def test_matches_reference_design_matrix():
    x = np.random.default_rng(0).uniform(0, 1650, 500)
    x = np.append(x, [0.0, 90.0, 250.0, 800.0, 1207.0, 1375.0])
    ref = BSpline.design_matrix(x, B.knots, 3).toarray()
    assert np.abs(B.rows(x) - ref).max() < 1e-12


def test_partition_of_unity_random():
    x = np.random.default_rng(1).uniform(0, 1650, 1000)
    R = B.rows(x)
    assert np.abs(R.sum(axis=1) - 1).max() < 1e-10
    assert R.min() >= 0
    assert np.all((R > 0).sum(axis=1) <= 4)


@given(st.floats(0, 1650))
def test_row_properties(j):
    r = B(j)
    assert abs(r.sum() - 1) < 1e-12
    assert np.all(r >= 0)
    assert np.count_nonzero(r) <= 4


def test_second_derivative_continuous():
    coef = np.random.default_rng(2).normal(size=9)
    h = 0.01
    for k in B.spec.internal_knots:
        x = np.array([k - 2 * h, k - h, k, k + h, k + 2 * h])
        f = B.profile(coef, x)
        left = (f[0] - 2 * f[1] + f[2]) / h**2
        right = (f[2] - 2 * f[3] + f[4]) / h**2
        assert abs(left - right) < 1e-3 * max(1.0, abs(left))


def test_local_matches_rows():
    x = np.array([[0.0, 10.0], [900.0, 1650.0]])
    first, N = B.local(x)
    R = B.rows(x)
    for idx in np.ndindex(x.shape):
        assert np.allclose(R[idx][first[idx]:first[idx] + 4], N[idx])


def test_spec_round_trip():
    s = SplineSpec(internal_knots=(100.0, 700.0))
    assert SplineSpec.from_dict(s.to_dict()) == s
