"""Kernels, monomial bases and the asymptotic constants of local polynomial smoothing.

All moment integrals are taken over R^d with a tensor-product Gauss-Hermite
rule. For the Gaussian kernel the rule is exact for every polynomial degree
that appears here, so the quadrature doubles as a closed-form evaluation.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from .errors import ValidationError

COND_LIMIT = 1e12


class InvalidOrder(ValidationError):
    """Raised for an even or negative polynomial order."""


@dataclass(frozen=True)
class Kernel:
    """Radial kernel ``k(u) = profile(|u|)``.

    The profile need not be normalized; :func:`kernel_constants` rescales it
    to a d-dimensional probability density. ``quad_scale`` sets the width of
    the Gauss-Hermite weight used to integrate it.
    """

    name: str
    profile: Callable[[np.ndarray], np.ndarray] = field(compare=False)
    quad_scale: float = 1.0
    # radius beyond which profile(r) < 1e-12 * profile(0)
    support_radius: float = math.sqrt(2.0 * math.log(1e12))

    def __call__(self, r):
        return self.profile(np.asarray(r, dtype=float))


def _gaussian_profile(r):
    return np.exp(-0.5 * r * r)


GAUSSIAN = Kernel("gaussian", _gaussian_profile)


@lru_cache(maxsize=None)
def multi_indices(d: int, j: int) -> tuple:
    """Exponent tuples of total degree ``j`` in graded-lex order.

    >>> multi_indices(2, 2)
    ((2, 0), (1, 1), (0, 2))
    """
    out = []
    for combo in itertools.combinations_with_replacement(range(d), j):
        e = [0] * d
        for axis in combo:
            e[axis] += 1
        out.append(tuple(e))
    return tuple(out)


@lru_cache(maxsize=None)
def stacked_indices(d: int, Q: int) -> tuple:
    """Exponents of all monomials of degree 0..Q, blockwise by degree."""
    return tuple(e for j in range(Q + 1) for e in multi_indices(d, j))


def n_monomials(d: int, j: int) -> int:
    return math.comb(d - 1 + j, d - 1)


def n_stacked(d: int, Q: int) -> int:
    return sum(n_monomials(d, j) for j in range(Q + 1))


def _powers(u, exps):
    u = np.asarray(u, dtype=float)
    e = np.asarray(exps, dtype=int).reshape(len(exps), -1)
    if u.ndim == 1:
        return np.prod(u[None, :] ** e, axis=1)
    return np.prod(u[:, None, :] ** e[None, :, :], axis=2)


def monomial_vector(u, j: int) -> np.ndarray:
    """Distinct degree-``j`` monomials of ``u`` (graded-lex order).

    ``u`` may also be an (m, d) array, giving an (m, N_j) result.
    """
    if j < 0:
        raise ValueError("monomial degree must be nonnegative")
    u = np.atleast_1d(np.asarray(u, dtype=float))
    d = u.shape[-1]
    return _powers(u, multi_indices(d, j))


def stacked_monomials(u, Q: int) -> np.ndarray:
    """Concatenation of ``monomial_vector(u, 0..Q)``; first entry is 1."""
    if Q < 0:
        raise ValueError("order must be nonnegative")
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return _powers(u, stacked_indices(u.shape[-1], Q))


def check_order(Q) -> int:
    if not isinstance(Q, (int, np.integer)) or Q < 1 or Q % 2 == 0:
        raise InvalidOrder(f"Q must be odd and positive, got {Q!r}")
    return int(Q)


@dataclass(frozen=True, eq=False)
class KernelConstants:
    """Moment matrices and derived scalars for one (kernel, Q, d) triple."""

    Q: int
    d: int
    M_Q: np.ndarray
    Gamma_Q: np.ndarray
    B_Q: np.ndarray
    R_Q: float
    C_Q: float
    mu2: float
    Rk: float
    kernel_name: str = "gaussian"

    @property
    def rate(self) -> int:
        """``2(Q+1) + d``, the exponent denominator of every rate."""
        return 2 * (self.Q + 1) + self.d

    @property
    def bias_row(self) -> np.ndarray:
        """``e1' M^-1 B``: maps scaled derivatives to the bias coefficient."""
        return np.linalg.solve(self.M_Q, self.B_Q)[0]


def _quadrature(kernel: Kernel, d: int, order: int):
    x, w = np.polynomial.hermite_e.hermegauss(order)
    s = kernel.quad_scale
    nodes = np.array(list(itertools.product(x * s, repeat=d)))
    base = np.prod(np.array(list(itertools.product(w * s, repeat=d))), axis=1)
    # hermegauss integrates against exp(-x^2/2); undo that weight
    r2 = np.sum(nodes**2, axis=1)
    k = kernel(np.sqrt(r2)) * np.exp(0.5 * r2 / s**2)
    return nodes, base * k


def kernel_constants(kernel: Kernel = GAUSSIAN, Q: int = 1, d: int = 1,
                     quad_order: int = 60) -> KernelConstants:
    """Compute M_Q, Gamma_Q, B_Q, R_Q and C_Q by tensor quadrature.

    Raises
    ------
    InvalidOrder
        If ``Q`` is even or nonpositive.
    numpy.linalg.LinAlgError
        If M_Q has condition number above 1e12.
    """
    # validate before the cache: 1.0 and 1 hash alike
    Q = check_order(Q)
    if quad_order < 40:
        raise ValueError("quad_order must be at least 40")
    return _kernel_constants(kernel, Q, int(d), int(quad_order))


@lru_cache(maxsize=32)
def _kernel_constants(kernel, Q, d, quad_order):
    nodes, wk = _quadrature(kernel, d, quad_order)
    mass = wk.sum()
    if not mass > 0:
        raise np.linalg.LinAlgError("kernel has no mass on the quadrature nodes")
    wk = wk / mass
    # squared kernel of the normalized density
    wk2 = wk * kernel(np.linalg.norm(nodes, axis=1)) / mass

    M = stacked_monomials(nodes, Q)
    top = monomial_vector(nodes, Q + 1)
    M_Q = (M * wk[:, None]).T @ M
    G_Q = (M * wk2[:, None]).T @ M
    B_Q = (M * wk[:, None]).T @ top
    M_Q = 0.5 * (M_Q + M_Q.T)
    G_Q = 0.5 * (G_Q + G_Q.T)
    if np.linalg.cond(M_Q) > COND_LIMIT:
        raise np.linalg.LinAlgError("moment matrix is numerically singular")

    e1 = np.linalg.solve(M_Q, np.eye(len(M_Q))[0])
    R_Q = float(e1 @ G_Q @ e1)
    C_Q = (d * R_Q / (2 * (Q + 1))) ** (1.0 / (2 * (Q + 1) + d))
    mu2 = float(np.sum(wk * nodes[:, 0] ** 2))
    Rk = float(np.sum(wk2))
    for a in (M_Q, G_Q, B_Q):
        a.setflags(write=False)
    return KernelConstants(Q, d, M_Q, G_Q, B_Q, R_Q, float(C_Q), mu2, Rk,
                           kernel.name)


def scaled_derivatives(derivs: dict, d: int, j: int) -> np.ndarray:
    """Build the order-``j`` derivative vector from partial derivatives.

    ``derivs`` maps exponent tuples to partial derivatives of f; each entry
    is divided by the multi-index factorial. Missing entries count as zero.
    """
    out = []
    for e in multi_indices(d, j):
        fact = math.prod(math.factorial(k) for k in e)
        out.append(derivs.get(tuple(e), 0.0) / fact)
    return np.array(out)


def bias_coefficient(derivs, constants: KernelConstants) -> float:
    """``e1' M^-1 B D``, the bandwidth-free leading bias term."""
    derivs = np.asarray(derivs, dtype=float)
    if derivs.shape != (constants.B_Q.shape[1],):
        raise ValueError(
            f"expected {constants.B_Q.shape[1]} derivatives, got {derivs.shape}")
    return float(constants.bias_row @ derivs)


def asymptotic_bias(derivs, h: float, constants: KernelConstants) -> float:
    """Leading bias ``h^(Q+1) e1' M^-1 B D``.

    ``derivs`` must already carry the inverse multi-index factorials (see
    :func:`scaled_derivatives`).
    """
    return h ** (constants.Q + 1) * bias_coefficient(derivs, constants)


def asymptotic_variance(v_x: float, p_x: float, n: float, h: float,
                        constants: KernelConstants) -> float:
    """Leading variance ``R_Q v / (p n h^d)``."""
    if v_x <= 0 or p_x <= 0 or n < 1 or h <= 0:
        raise ValueError("v, p and h must be positive and n >= 1")
    return constants.R_Q * v_x / (p_x * n * h**constants.d)


def asymptotic_isotropic_lob(v_x: float, p_x: float, n: float,
                             bias_coeff: float,
                             constants: KernelConstants) -> float:
    """Closed-form MSE-optimal isotropic scale.

    Raises
    ------
    ZeroDivisionError
        If ``bias_coeff`` is zero, where the optimal scale diverges.
    """
    if bias_coeff == 0:
        raise ZeroDivisionError("bias coefficient is zero; optimal scale undefined")
    if v_x <= 0 or p_x <= 0:
        raise ValueError("v and p must be positive")
    D = constants.rate
    return (constants.C_Q * (v_x / (p_x * n)) ** (1.0 / D)
            * abs(bias_coeff) ** (-2.0 / D))
