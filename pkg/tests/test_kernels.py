import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lpsactive.kernels import (GAUSSIAN, InvalidOrder, Kernel, asymptotic_bias,
                               asymptotic_isotropic_lob, asymptotic_variance,
                               bias_coefficient, check_order, kernel_constants,
                               monomial_vector, multi_indices, n_monomials,
                               n_stacked, scaled_derivatives, stacked_indices,
                               stacked_monomials)
from lpsactive.lps import Dataset, LpsModel, mse_oracle, unit_box


def normal_moment(a, var=1.0):
    """E[u^a] for u ~ N(0, var)."""
    if a % 2:
        return 0.0
    return math.prod(range(a - 1, 0, -2)) * var ** (a // 2)


def closed_form_moments(Q, d):
    """M_Q, Gamma_Q and B_Q of the standard Gaussian kernel from normal moments.

    The squared Gaussian density is (4 pi)^(-d/2) times the N(0, I/2) density.
    """
    base = stacked_indices(d, Q)
    top = multi_indices(d, Q + 1)

    def mom(ea, eb, var):
        return math.prod(normal_moment(a + b, var) for a, b in zip(ea, eb))

    M = np.array([[mom(a, b, 1.0) for b in base] for a in base])
    G = (4 * math.pi) ** (-d / 2) * np.array([[mom(a, b, 0.5) for b in base] for a in base])
    B = np.array([[mom(a, b, 1.0) for b in top] for a in base])
    return M, G, B


# monomials -----------------------------------------------------------------

def test_monomial_vector_examples():
    assert np.array_equal(monomial_vector((2, 3), 0), [1])
    assert np.array_equal(monomial_vector((2, 3), 1), [2, 3])
    assert np.array_equal(monomial_vector((2, 3), 2), [4, 6, 9])
    assert len(monomial_vector((1, 2, 3), 2)) == 6 == n_monomials(3, 2)


def test_stacked_monomials_examples():
    assert np.array_equal(stacked_monomials((2,), 1), [1, 2])
    assert np.array_equal(stacked_monomials((2, 3), 1), [1, 2, 3])
    assert np.array_equal(stacked_monomials((1, 1), 2), np.ones(6))


def test_graded_lex_order_is_pinned():
    assert multi_indices(2, 2) == ((2, 0), (1, 1), (0, 2))
    assert multi_indices(3, 1) == ((1, 0, 0), (0, 1, 0), (0, 0, 1))


@given(st.integers(1, 4), st.integers(0, 5))
def test_monomial_count_matches_binomial(d, j):
    idx = multi_indices(d, j)
    assert len(idx) == n_monomials(d, j) == math.comb(d - 1 + j, d - 1)
    assert len(set(idx)) == len(idx)
    assert all(sum(e) == j for e in idx)


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=3), st.integers(0, 4))
def test_stacked_first_entry_and_batch_shape(u, Q):
    v = stacked_monomials(u, Q)
    assert v[0] == 1.0
    assert len(v) == n_stacked(len(u), Q)
    batch = stacked_monomials(np.array([u, u]), Q)
    assert np.array_equal(batch[0], v)


def test_negative_degree_rejected():
    with pytest.raises(ValueError):
        monomial_vector((1.0,), -1)


# kernel constants ------------------------------------------------------------

@pytest.mark.parametrize("Q,d", [(1, 1), (3, 1), (1, 2), (3, 2)])
def test_moment_matrices_match_gaussian_closed_form(Q, d):
    c = kernel_constants(GAUSSIAN, Q, d)
    M, G, B = closed_form_moments(Q, d)
    np.testing.assert_allclose(c.M_Q, M, atol=1e-8)
    np.testing.assert_allclose(c.Gamma_Q, G, atol=1e-8)
    np.testing.assert_allclose(c.B_Q, B, atol=1e-8)


def test_local_linear_1d_constants():
    c = kernel_constants(GAUSSIAN, 1, 1)
    np.testing.assert_allclose(c.M_Q, np.eye(2), atol=1e-12)
    rp = 1 / (2 * math.sqrt(math.pi))
    np.testing.assert_allclose(c.Gamma_Q, np.diag([rp, rp / 2]), atol=1e-12)
    assert c.R_Q == pytest.approx(0.28209, abs=1e-5)
    assert c.C_Q == pytest.approx((0.28209479 / 4) ** 0.2, rel=1e-6)
    assert c.C_Q == pytest.approx(0.5884, abs=1e-4)
    assert c.mu2 == pytest.approx(1.0)
    assert c.rate == 5


def test_constants_independent_of_quadrature_scale():
    wide = Kernel("gaussian", GAUSSIAN.profile, quad_scale=1.3)
    a = kernel_constants(GAUSSIAN, 3, 2)
    b = kernel_constants(wide, 3, 2, quad_order=80)
    assert b.R_Q == pytest.approx(a.R_Q, rel=1e-9)
    assert b.C_Q == pytest.approx(a.C_Q, rel=1e-9)


def test_unnormalized_profile_gives_same_constants():
    scaled = Kernel("gaussian", lambda r: 5.0 * np.exp(-0.5 * r * r))
    a = kernel_constants(GAUSSIAN, 1, 2)
    b = kernel_constants(scaled, 1, 2)
    np.testing.assert_allclose(b.Gamma_Q, a.Gamma_Q, rtol=1e-10)


@pytest.mark.parametrize("Q", [0, 2, -1, 1.0])
def test_even_or_invalid_order_rejected(Q):
    with pytest.raises(InvalidOrder):
        kernel_constants(GAUSSIAN, Q, 1)
    with pytest.raises(InvalidOrder):
        check_order(Q)


def test_low_quadrature_order_rejected():
    with pytest.raises(ValueError):
        kernel_constants(GAUSSIAN, 1, 1, quad_order=10)


def test_singular_moment_matrix_detected():
    # a kernel concentrated at the origin has degenerate moments
    spike = Kernel("spike", lambda r: np.where(r < 1e-3, 1.0, 0.0))
    with pytest.raises(np.linalg.LinAlgError):
        kernel_constants(spike, 1, 1)


# asymptotic bias and variance --------------------------------------------------

def test_bias_of_parabola():
    c = kernel_constants(GAUSSIAN, 1, 1)
    D = scaled_derivatives({(2,): 2.0}, 1, 2)  # f = x^2
    assert D[0] == 1.0
    assert asymptotic_bias(D, 0.1, c) == pytest.approx(0.01, rel=1e-10)
    assert asymptotic_bias(np.zeros(1), 0.3, c) == 0.0
    assert asymptotic_bias(2 * D, 0.1, c) == pytest.approx(0.02, rel=1e-10)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(0.01, 1.0))
def test_local_linear_bias_is_half_trace_of_hessian(f11, f12, f22, h):
    c = kernel_constants(GAUSSIAN, 1, 2)
    D = scaled_derivatives({(2, 0): f11, (1, 1): f12, (0, 2): f22}, 2, 2)
    expected = 0.5 * c.mu2 * (f11 + f22) * h * h
    assert asymptotic_bias(D, h, c) == pytest.approx(expected, abs=1e-10)


def test_cubic_bias_row_values():
    np.testing.assert_allclose(kernel_constants(GAUSSIAN, 3, 1).bias_row, [-3], atol=1e-8)
    np.testing.assert_allclose(kernel_constants(GAUSSIAN, 3, 2).bias_row,
                               [-3, 0, -1, 0, -3], atol=1e-8)


def test_bias_dimension_mismatch():
    c = kernel_constants(GAUSSIAN, 1, 2)
    with pytest.raises(ValueError):
        bias_coefficient(np.ones(2), c)


def test_variance_examples():
    c1 = kernel_constants(GAUSSIAN, 1, 1)
    base = asymptotic_variance(1, 1, 100, 1.0, c1)
    assert base == pytest.approx(0.28209479e-2, rel=1e-6)
    assert asymptotic_variance(4, 1, 100, 1.0, c1) == pytest.approx(4 * base)
    c2 = kernel_constants(GAUSSIAN, 1, 2)
    assert asymptotic_variance(1, 1, 100, 0.4, c2) == pytest.approx(
        4 * asymptotic_variance(1, 1, 100, 0.8, c2))


@given(st.floats(1, 1e6), st.floats(1e-3, 1.0))
def test_variance_times_n_h_is_constant(n, h):
    c = kernel_constants(GAUSSIAN, 3, 2)
    assert asymptotic_variance(2.0, 0.5, n, h, c) * n * h ** 2 == pytest.approx(4 * c.R_Q)


@pytest.mark.parametrize("args", [(0, 1, 10, 1), (1, 0, 10, 1), (1, 1, 0.5, 1), (1, 1, 10, 0)])
def test_variance_rejects_nonpositive(args):
    with pytest.raises(ValueError):
        asymptotic_variance(*args, kernel_constants(GAUSSIAN, 1, 1))


# isotropic LOB -----------------------------------------------------------------

def test_lob_example_and_scaling():
    c = kernel_constants(GAUSSIAN, 1, 1)
    s = asymptotic_isotropic_lob(1, 1, 1024, 1.0, c)
    assert s == pytest.approx(c.C_Q * 0.25, rel=1e-12)
    assert s == pytest.approx(0.147, abs=1e-3)
    assert asymptotic_isotropic_lob(1, 1, 32 * 1024, 1.0, c) == pytest.approx(s / 2)


def test_lob_monotonicity():
    c = kernel_constants(GAUSSIAN, 3, 2)
    ref = asymptotic_isotropic_lob(1, 1, 1000, 1.0, c)
    assert asymptotic_isotropic_lob(1, 1, 2000, 1.0, c) < ref
    assert asymptotic_isotropic_lob(1, 2, 1000, 1.0, c) < ref
    assert asymptotic_isotropic_lob(1, 1, 1000, -2.0, c) < ref
    assert asymptotic_isotropic_lob(2, 1, 1000, 1.0, c) > ref


def test_lob_singular_bias():
    with pytest.raises(ZeroDivisionError):
        asymptotic_isotropic_lob(1, 1, 100, 0.0, kernel_constants(GAUSSIAN, 1, 1))


def test_lob_matches_exact_mse_grid_search():
    n, v = 4096, 0.01
    x = (np.arange(n) + 0.5) / n

    def f(t):
        return np.sin(2 * np.pi * np.asarray(t).reshape(-1))

    data = Dataset(x, f(x), unit_box(1))
    model = LpsModel(Q=1)
    c = kernel_constants(GAUSSIAN, 1, 1)
    grid = 0.005 * 2 ** (np.arange(64) / 8)
    for x0 in (0.2, 0.25, 0.7):
        mse = [mse_oracle(x0, s, data, f, v, model) for s in grid]
        best = grid[int(np.argmin(mse))]
        D = scaled_derivatives({(2,): -4 * np.pi ** 2 * math.sin(2 * np.pi * x0)}, 1, 2)
        closed = asymptotic_isotropic_lob(v, 1.0, n, bias_coefficient(D, c), c)
        assert abs(math.log2(closed / best)) <= 2 / 8 + 1e-12
