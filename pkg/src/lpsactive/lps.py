"""Finite-sample local polynomial smoothing.

The predictor at ``x`` is the intercept of a kernel-weighted least-squares
polynomial fit of order Q. It is linear in the labels, ``f_hat(x) = A @ y``,
which gives exact conditional bias and variance given the design.

Bandwidths are either a scalar (isotropic) or a per-axis vector, the
diagonal of a bandwidth matrix. Single-point functions work with any
:class:`~lpsactive.kernels.Kernel`; the batch functions route Gaussian
fits through the compiled core.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _backend
from .errors import EffectiveRankDeficient, ValidationError
from .kernels import (GAUSSIAN, COND_LIMIT, Kernel, KernelConstants,
                      check_order, kernel_constants, n_stacked,
                      stacked_monomials)

TRUNCATION = 1e-12
RIDGE = 1e-10


@dataclass(frozen=True, eq=False)
class Dataset:
    """Training inputs (n, d), labels (n,) and the input box (d, 2)."""

    inputs: np.ndarray
    labels: np.ndarray
    box: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.labels, dtype=float).reshape(-1)
        box = np.asarray(self.box, dtype=float).reshape(-1, 2)
        if len(y) != len(X):
            raise ValidationError("inputs and labels differ in length")
        if box.shape[0] != X.shape[1]:
            raise ValidationError("box dimension does not match inputs")
        if np.any(box[:, 0] >= box[:, 1]):
            raise ValidationError("box bounds must satisfy lo < hi")
        tol = 1e-12 * (box[:, 1] - box[:, 0])
        if np.any(X < box[:, 0] - tol) or np.any(X > box[:, 1] + tol):
            raise ValidationError("inputs outside the box")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "box", box)

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    def with_labels(self, labels) -> "Dataset":
        return Dataset(self.inputs, labels, self.box)


def unit_box(d: int) -> np.ndarray:
    return np.tile([0.0, 1.0], (d, 1))


@dataclass(frozen=True, eq=False)
class LpsModel:
    """Order-Q local polynomial smoother."""

    Q: int = 1
    kernel: Kernel = GAUSSIAN
    ridge: float = RIDGE
    backend: str | None = None

    def __post_init__(self):
        check_order(self.Q)
        if self.ridge < 0:
            raise ValidationError("ridge must be nonnegative")

    def constants(self, d: int) -> KernelConstants:
        return kernel_constants(self.kernel, self.Q, d)

    @property
    def compiled_ok(self) -> bool:
        return self.kernel.name == "gaussian"


def _scale_vector(sigma, d):
    s = np.asarray(sigma, dtype=float)
    if s.ndim == 2:
        if np.any(s != np.diag(np.diag(s))):
            raise ValidationError("only diagonal bandwidth matrices are supported")
        s = np.diag(s)
    s = np.broadcast_to(s, (d,)).astype(float)
    if np.any(s <= 0):
        raise ValidationError("bandwidth must be positive")
    return s


def _cholesky(G):
    """Lower Cholesky factor, or None if G is not numerically positive definite.

    The condition number is estimated from the squared pivot ratio.
    """
    try:
        Lc = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        return None
    dg = np.diag(Lc)
    if not np.all(dg > 0) or (dg.max() / dg.min()) ** 2 > COND_LIMIT:
        return None
    return Lc


def _local_solve(x, sigma, data, model):
    """Return (indices, A restricted to indices) for one query."""
    d = data.d
    x = np.asarray(x, dtype=float).reshape(d)
    s = _scale_vector(sigma, d)
    u = (data.inputs - x) / s
    k = model.kernel(np.sqrt(np.sum(u * u, axis=1)))
    keep = np.flatnonzero(k >= TRUNCATION * model.kernel(0.0))
    P = n_stacked(d, model.Q)
    if len(keep) < P:
        raise EffectiveRankDeficient(
            f"{len(keep)} points carry weight, need {P}")
    Xm = stacked_monomials(u[keep], model.Q)
    w = k[keep]
    G = (Xm * w[:, None]).T @ Xm
    Lc = _cholesky(G)
    if Lc is None:
        # ridge jitter only for degenerate systems, so regular fits stay exact
        G[np.diag_indices(P)] += model.ridge * np.trace(G) / P
        Lc = _cholesky(G)
        if Lc is None:
            raise EffectiveRankDeficient(
                "normal matrix singular or condition number above 1e12")
    e1 = np.zeros(P)
    e1[0] = 1.0
    a = np.linalg.solve(Lc.T, np.linalg.solve(Lc, e1))
    return keep, w * (Xm @ a)


def weight_vector(x, sigma, data: Dataset, model: LpsModel) -> np.ndarray:
    """Linear smoother weights ``A`` with ``f_hat(x) = A @ labels``.

    Raises
    ------
    EffectiveRankDeficient
        If fewer than the number of monomials carry non-negligible weight or
        the weighted normal matrix is numerically singular.
    """
    keep, a = _local_solve(x, sigma, data, model)
    A = np.zeros(data.n)
    A[keep] = a
    return A


def predict(x, sigma, data: Dataset, model: LpsModel) -> float:
    keep, a = _local_solve(x, sigma, data, model)
    return float(a @ data.labels[keep])


def finite_bias(x, sigma, data: Dataset, true_f, model: LpsModel) -> float:
    """Exact conditional bias ``f(x) - A f(X)`` given the design."""
    keep, a = _local_solve(x, sigma, data, model)
    x = np.asarray(x, dtype=float).reshape(1, data.d)
    fx = float(np.asarray(true_f(x)).reshape(-1)[0])
    return fx - float(a @ np.asarray(true_f(data.inputs[keep])).reshape(-1))


def finite_variance(x, sigma, data: Dataset, v, model: LpsModel) -> float:
    """Exact conditional variance ``sum_i A_i^2 v_i``.

    ``v`` is a scalar or a per-point array of noise variances.
    """
    keep, a = _local_solve(x, sigma, data, model)
    v = np.broadcast_to(np.asarray(v, dtype=float), (data.n,))
    if np.any(v < 0):
        raise ValidationError("noise variances must be nonnegative")
    return float((a * a) @ v[keep])


def mse_oracle(x, sigma, data: Dataset, true_f, v, model: LpsModel) -> float:
    return (finite_bias(x, sigma, data, true_f, model) ** 2
            + finite_variance(x, sigma, data, v, model))


# batch evaluation -----------------------------------------------------------

def _scales_for(queries, sigma, d):
    """Broadcast a bandwidth spec to (k, d).

    Accepts a scalar, a per-axis (d,) vector, a per-query (k,) vector or a
    full (k, d) array.
    """
    k = len(queries)
    s = np.asarray(sigma, dtype=float)
    if s.ndim == 0:
        out = np.full((k, d), float(s))
    elif s.ndim == 1 and len(s) == k and (d == 1 or k != d):
        out = np.repeat(s[:, None], d, axis=1)
    elif s.ndim == 1 and len(s) == d:
        out = np.tile(s, (k, 1))
    else:
        out = np.broadcast_to(s, (k, d)).copy()
    if np.any(out <= 0) or not np.all(np.isfinite(out)):
        raise ValidationError("bandwidth must be positive and finite")
    return out


def _as_queries(queries, d):
    q = np.asarray(queries, dtype=float)
    if q.ndim == 1:
        q = q[:, None] if d == 1 else q[None, :]
    return q


def fit_many(queries, sigma, data: Dataset, model: LpsModel, columns=None,
             v=None, strict=True):
    """Batch fits at many queries.

    Parameters
    ----------
    columns : array (n, m), optional
        Label columns to smooth; defaults to ``data.labels``.
    v : scalar or array (n,), optional
        Noise variances for the variance output; zero if omitted.
    strict : bool
        Raise on the first rank-deficient query instead of returning NaN.

    Returns
    -------
    est : (k, m) array
    var : (k,) array
    ok : (k,) bool array
    """
    q = _as_queries(queries, data.d)
    scales = _scales_for(q, sigma, data.d)
    cols = data.labels[:, None] if columns is None else np.asarray(columns, float)
    if cols.ndim == 1:
        cols = cols[:, None]
    if model.compiled_ok:
        design = _backend.SortedDesign(data.inputs, cols, v)
        est, var, ok = _backend.local_fit(design, q, scales, model.Q,
                                          model.backend)
        ok = ok.astype(bool)
    else:
        vv = np.zeros(data.n) if v is None else np.broadcast_to(
            np.asarray(v, float), (data.n,))
        est = np.full((len(q), cols.shape[1]), np.nan)
        var = np.full(len(q), np.nan)
        ok = np.zeros(len(q), dtype=bool)
        for j in range(len(q)):
            try:
                keep, a = _local_solve(q[j], scales[j], data, model)
            except EffectiveRankDeficient:
                continue
            est[j] = a @ cols[keep]
            var[j] = (a * a) @ vv[keep]
            ok[j] = True
    if strict and not ok.all():
        raise EffectiveRankDeficient(
            f"{int((~ok).sum())} of {len(q)} queries are rank deficient")
    return est, var, ok


def predict_many(queries, sigma, data: Dataset, model: LpsModel,
                 strict=True) -> np.ndarray:
    return fit_many(queries, sigma, data, model, strict=strict)[0][:, 0]


def mse_oracle_many(queries, sigma, data: Dataset, true_f, v,
                    model: LpsModel):
    """Exact conditional (bias, variance) at many queries."""
    q = _as_queries(queries, data.d)
    fX = np.asarray(true_f(data.inputs), dtype=float).reshape(-1)
    vv = np.broadcast_to(np.asarray(v, dtype=float), (data.n,))
    est, var, _ = fit_many(q, sigma, data, model, columns=fX, v=vv)
    bias = np.asarray(true_f(q), dtype=float).reshape(-1) - est[:, 0]
    return bias, var
