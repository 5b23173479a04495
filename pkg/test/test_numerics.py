import math

from panelgp.numerics import (
    EULER,
    LN2,
    GapGrid,
    G_gap,
    default_b_grid,
    default_phi_grid,
    digamma,
    expected_log_square,
    g_half,
    g_half_derivative,
    g_m,
    h_gap,
    lower_bound_log_square,
    select_b,
)

import hypothesis.strategies as st
import numpy as np
import pytest
import scipy.special
from hypothesis import given, settings
from scipy.stats import poisson


def test_digamma_known_values():
    assert digamma(1.0) == pytest.approx(-EULER, abs=1e-13)
    assert digamma(0.5) == pytest.approx(-EULER - 2 * LN2, abs=1e-13)
    xs = np.array([1e-3, 0.7, 1.4616321449683623, 5.5, 37.0, 1e4])
    assert np.allclose(digamma(xs), scipy.special.digamma(xs), rtol=1e-12, atol=1e-11)


@given(st.floats(min_value=1e-3, max_value=1e3))
def test_digamma_matches_scipy(x):
    assert math.isclose(digamma(x), float(scipy.special.digamma(x)), rel_tol=1e-10, abs_tol=1e-10)


def test_digamma_rejects_nonpositive():
    for x in (0.0, -1.0, float("nan")):
        with pytest.raises(ValueError):
            digamma(x)


def test_g_m_at_zero_is_digamma():
    assert g_m(0.5, 0.0) == pytest.approx(digamma(0.5), abs=1e-14)
    assert g_m(2.0, 0.0) == pytest.approx(digamma(2.0), abs=1e-14)


def test_g_m_matches_direct_sum():
    for m, y in ((1.0, 3.7), (0.5, 12.0), (2.5, 0.01)):
        j = np.arange(400)
        reference = float(np.sum(poisson.pmf(j, y) * scipy.special.digamma(j + m)))
        assert g_m(m, y) == pytest.approx(reference, abs=1e-10)


def test_g_m_rejects_bad_arguments():
    with pytest.raises(ValueError):
        g_m(0.0, 1.0)
    with pytest.raises(ValueError):
        g_m(0.5, -1.0)


def test_g_m_asymptotic_switch_is_continuous():
    below = g_m(0.5, 700.0)
    above = g_m(0.5, 700.0 + 1e-9)
    assert above == pytest.approx(below, abs=1e-6)
    assert g_m(0.5, 2000.0) == pytest.approx(g_half(2000.0), abs=1e-8)


def test_g_half_matches_series():
    for y in (0.0, 1e-3, 0.5, 3.0, 20.0, 64.0, 100.0, 400.0):
        assert g_half(y) == pytest.approx(g_m(0.5, y), abs=1e-9)


def test_g_half_vectorized_shape():
    ys = np.linspace(0.0, 50.0, 12).reshape(3, 4)
    values = g_half(ys)
    assert values.shape == (3, 4)
    assert values[1, 2] == pytest.approx(g_half(float(ys[1, 2])), abs=1e-14)
    with pytest.raises(ValueError):
        g_half(-1.0)


def test_g_half_derivative_matches_finite_difference():
    for y in (1e-13, 0.1, 1.0, 10.0, 100.0):
        h = 1e-5 * max(1.0, y)
        lo = max(y - h, 0.0)
        numeric = (g_half(y + h) - g_half(lo)) / (y + h - lo)
        assert g_half_derivative(y) == pytest.approx(numeric, rel=1e-5)


def test_expected_log_square_at_zero_mean():
    sigma = 1.7
    assert expected_log_square(0.0, sigma) == pytest.approx(math.log(sigma**2) - EULER - LN2, abs=1e-12)


def test_lower_bound_holds_on_grid():
    mus = np.linspace(-10.0, 10.0, 41)
    sigmas = np.linspace(0.1, 10.0, 41)
    for mu in mus:
        for sigma in sigmas:
            truth = expected_log_square(mu, sigma)
            for b in (0.0, 0.3061, 1.0):
                if mu == 0.0 and b == 0.0:
                    continue
                assert lower_bound_log_square(mu, sigma, b) <= truth + 1e-9


def test_lower_bound_tight_at_zero_mean():
    for sigma in (0.1, 1.0, 7.5):
        assert lower_bound_log_square(0.0, sigma, 1.0) == pytest.approx(expected_log_square(0.0, sigma), abs=1e-9)


def test_lower_bound_rejects_bad_input():
    with pytest.raises(ValueError):
        lower_bound_log_square(1.0, 1.0, 1.5)
    with pytest.raises(ValueError):
        lower_bound_log_square(0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        lower_bound_log_square(1.0, 0.0, 0.3)


@settings(max_examples=50, deadline=None)
@given(st.floats(min_value=1e-6, max_value=1e4), st.floats(min_value=0.0, max_value=1.0))
def test_gap_is_nonpositive(phi, b):
    assert h_gap(phi, b) <= 1e-9


def test_gap_function_relation():
    phi = 2.5
    assert g_m(0.5, phi / 2) == pytest.approx(-G_gap(-phi / 2) - 2 * LN2 - EULER, abs=1e-14)
    with pytest.raises(ValueError):
        G_gap(1.0)
    with pytest.raises(ValueError):
        h_gap(0.0, 0.0)


def test_select_b_default_grids():
    b_star, grid = select_b(default_phi_grid(), default_b_grid())
    assert b_star == pytest.approx(15.0 / 49.0, abs=1e-12)
    assert grid.variances.shape == (50,)
    # U-shaped: exactly one local minimum along the b grid
    v = grid.variances
    interior = np.sum((v[1:-1] < v[:-2]) & (v[1:-1] < v[2:]))
    assert interior == 1


def test_select_b_small_grid():
    phi = np.array([0.1, 1.0, 10.0])
    bs = np.array([0.0, 0.5, 1.0])
    b_star, grid = select_b(phi, bs)
    G = np.array([G_gap(-p / 2) for p in phi])
    expected = [np.var(np.log(phi + b) + G) for b in bs]
    assert np.allclose(grid.variances, expected, rtol=1e-14)
    assert b_star == bs[int(np.argmin(expected))]


def test_gap_grid_validation():
    with pytest.raises(ValueError):
        GapGrid(np.array([1.0, 0.5]), np.array([0.1]), np.array([0.0]))
    with pytest.raises(ValueError):
        GapGrid(np.array([1.0]), np.array([0.1, 1.2]), np.array([0.0, 0.0]))
    with pytest.raises(ValueError):
        GapGrid(np.array([1.0]), np.array([0.1]), np.array([-1.0]))


def test_expected_log_square_matches_monte_carlo():
    rng = np.random.default_rng(11)
    for mu, sigma in zip(rng.uniform(-5.0, 5.0, 20), rng.uniform(0.2, 3.0, 20)):
        y = rng.normal(mu, sigma, 1_000_000)
        samples = np.log(y * y)
        std_error = samples.std() / math.sqrt(samples.size)
        assert abs(samples.mean() - expected_log_square(mu, sigma)) <= 4 * std_error


def test_expected_log_square_scale_equivariance():
    for mu, sigma in ((0.0, 2.0), (3.0, 0.5), (-1.2, 7.0), (40.0, 0.3)):
        assert expected_log_square(mu, sigma) == pytest.approx(2 * math.log(sigma) + expected_log_square(mu / sigma, 1.0), abs=1e-10)


def test_g_m_logarithmic_lower_bound():
    for m in (0.5, 1.0, 2.0):
        for y in np.linspace(0.0, 100.0, 201):
            assert g_m(m, y) >= math.log(y + m) + digamma(m) - math.log(m) - 1e-12


def test_lower_bound_is_monotone_in_b():
    bs = np.linspace(0.0, 1.0, 21)
    for mu, sigma in ((0.5, 1.0), (-3.0, 0.2), (2.0, 4.0)):
        values = [lower_bound_log_square(mu, sigma, b) for b in bs]
        assert np.all(np.diff(values) >= 0)


def test_select_b_sorts_and_deduplicates_b_grid():
    phi = np.array([0.1, 1.0, 10.0])
    b_star, grid = select_b(phi, [1.0, 0.5, 0.0, 0.5])
    expected_star, expected = select_b(phi, [0.0, 0.5, 1.0])
    assert np.array_equal(grid.b_values, [0.0, 0.5, 1.0])
    assert np.array_equal(grid.variances, expected.variances)
    assert b_star == expected_star


def test_select_b_ties_pick_smallest_b():
    b_star, grid = select_b([2.0], [0.7, 0.2, 0.9])
    assert np.all(grid.variances == 0)
    assert b_star == 0.2
