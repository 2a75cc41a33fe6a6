"""Local bandwidth selection by intersecting confidence intervals.

For an increasing scale grid, each feasible candidate gives a prediction
with a confidence interval. The selected index is the last one whose
interval still shares a point with all earlier ones. Afterwards the noise
and index fields can be stabilized by max/min filters over small balls.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _backend
from .errors import EffectiveRankDeficient, NoFeasibleBandwidth, ValidationError
from .grid import EvalGrid, ball_max, ball_min
from .lps import Dataset, LpsModel, _as_queries, _local_solve


def rate(Q: int, d: int) -> int:
    return 2 * (Q + 1) + d


@dataclass(frozen=True, eq=False)
class BandwidthGrid:
    """Scales ``sigma_floor * step**j`` for j = 0..L."""

    sigma_floor: float
    step: float
    L: int

    @property
    def values(self) -> np.ndarray:
        return self.sigma_floor * self.step ** np.arange(self.L + 1)

    def __len__(self):
        return self.L + 1


def adaptive_grid(n: int, Q: int, d: int, C_sigma: float, C_s: float,
                  box_diameter: float, ceiling: float = 1.0) -> BandwidthGrid:
    """Grid whose floor and step shrink with the training size.

    ``L`` is the smallest index with ``sigma_L >= ceiling * box_diameter``.
    """
    if C_sigma <= 0 or C_s <= 0:
        raise ValidationError("grid constants must be positive")
    D = rate(Q, d)
    floor = C_sigma * n ** (-2.0 / D)
    step = (1.0 + C_s * n ** (-(Q + 1.0) / D)) ** (2.0 / D)
    top = ceiling * box_diameter
    L = max(0, math.ceil(math.log(top / floor) / math.log(step) - 1e-12))
    return BandwidthGrid(floor, step, L)


def grid_constants(n0: int, Q: int, d: int, sigma_floor0: float,
                   step0: float) -> tuple:
    """Invert the floor and step laws so that they hit the given values at n0."""
    D = rate(Q, d)
    C_sigma = sigma_floor0 * n0 ** (2.0 / D)
    C_s = n0 ** ((Q + 1.0) / D) * (step0 ** (D / 2.0) - 1.0)
    return C_sigma, C_s


def ci_width_factor(kappa: float, step: float, Q: int, d: int) -> float:
    """Half-width multiplier ``kappa (1 + 2 / (s^(D/2) - 1))`` of the std."""
    return kappa * (1.0 + 2.0 / (step ** (rate(Q, d) / 2.0) - 1.0))


@dataclass(frozen=True, eq=False)
class LobSelection:
    """Selected index and the per-candidate record at one query.

    Candidates that were rank deficient, or not reached because the scan
    stopped early, hold NaN.
    """

    index: int
    sigma: float
    predictions: np.ndarray
    stds: np.ndarray
    halfwidth_factor: float

    @property
    def lower(self):
        return self.predictions - self.halfwidth_factor * self.stds

    @property
    def upper(self):
        return self.predictions + self.halfwidth_factor * self.stds

    @property
    def prediction(self) -> float:
        return float(self.predictions[self.index])


def _label_tol(labels):
    return 1e-10 * float(np.max(np.abs(labels))) if len(labels) else 0.0


def _training_variance(v_hat, data):
    v = np.broadcast_to(np.asarray(v_hat, dtype=float), (data.n,))
    if np.any(v < 0):
        raise ValidationError("noise variances must be nonnegative")
    return v


def lepski_select(x, data: Dataset, v_hat, grid: BandwidthGrid, kappa: float,
                  model: LpsModel, full: bool = False) -> LobSelection:
    """Select a bandwidth at one query.

    ``v_hat`` gives the noise variance at the training points (scalar or
    per point). With ``full`` every candidate is evaluated; otherwise the
    scan stops at the first empty intersection.

    Raises
    ------
    NoFeasibleBandwidth
        If every candidate is rank deficient.
    """
    x = np.asarray(x, dtype=float).reshape(1, data.d)
    v = _training_variance(v_hat, data)
    width = ci_width_factor(kappa, grid.step, model.Q, data.d)
    sig = grid.values
    if model.compiled_ok:
        design = _backend.SortedDesign(data.inputs, data.labels, v)
        idx, est, sd = _backend.lepski_path(design, x, sig, model.Q, width,
                                            _label_tol(data.labels), full,
                                            model.backend)
        j, est, sd = int(idx[0]), est[0], sd[0]
    else:
        j, est, sd = _python_scan(x[0], data, v, sig, width, model, full)
    if j < 0:
        raise NoFeasibleBandwidth("no feasible candidate bandwidth")
    return LobSelection(j, float(sig[j]), est, sd, width)


def _python_scan(x, data, v, sig, width, model, full):
    est = np.full(len(sig), np.nan)
    sd = np.full(len(sig), np.nan)
    lo, hi, last, open_ = -np.inf, np.inf, -1, True
    tol = _label_tol(data.labels)
    for l, s in enumerate(sig):
        try:
            keep, a = _local_solve(x, s, data, model)
        except EffectiveRankDeficient:
            continue
        est[l] = a @ data.labels[keep]
        sd[l] = math.sqrt((a * a) @ v[keep])
        if open_:
            lo = max(lo, est[l] - width * sd[l])
            hi = min(hi, est[l] + width * sd[l])
            if lo - hi > tol:
                open_ = False
                if not full:
                    break
            else:
                last = l
    return last, est, sd


def lepski_select_many(queries, data: Dataset, v_hat, grid: BandwidthGrid,
                       kappa: float, model: LpsModel, strict: bool = True):
    """Batch selection.

    Returns
    -------
    index : (k,) int array, -1 where no candidate was feasible
    prediction : (k,) predictions at the selected scale
    std : (k,) standard deviations at the selected scale
    """
    q = _as_queries(queries, data.d)
    v = _training_variance(v_hat, data)
    width = ci_width_factor(kappa, grid.step, model.Q, data.d)
    sig = grid.values
    if model.compiled_ok:
        design = _backend.SortedDesign(data.inputs, data.labels, v)
        idx, est, sd = _backend.lepski_path(design, q, sig, model.Q, width,
                                            _label_tol(data.labels), False,
                                            model.backend)
    else:
        idx = np.full(len(q), -1)
        est = np.full((len(q), len(sig)), np.nan)
        sd = np.full((len(q), len(sig)), np.nan)
        for r in range(len(q)):
            idx[r], est[r], sd[r] = _python_scan(q[r], data, v, sig, width,
                                                 model, False)
    bad = idx < 0
    if strict and bad.any():
        raise NoFeasibleBandwidth(f"{int(bad.sum())} queries have no feasible bandwidth")
    rows = np.arange(len(q))
    safe = np.where(bad, 0, idx)
    pred = np.where(bad, np.nan, est[rows, safe])
    std = np.where(bad, np.nan, sd[rows, safe])
    return idx, pred, std


def stabilization_radius(n: int, d: int, C_delta: float) -> float:
    """``C_delta n^(-1/(d(d+1)))``."""
    if C_delta <= 0:
        raise ValidationError("C_delta must be positive")
    return C_delta * n ** (-1.0 / (d * (d + 1)))


def stabilization_constant(n0: int, d: int, delta0: float) -> float:
    return delta0 * n0 ** (1.0 / (d * (d + 1)))


def stabilize_noise(grid: EvalGrid, v_hat_values, delta_n: float) -> np.ndarray:
    """Max of the noise field over the Euclidean ``delta_n`` ball of each node."""
    return ball_max(grid, v_hat_values, delta_n)


def stabilize_lob(grid: EvalGrid, selected_indices, delta_n: float,
                  bandwidths: BandwidthGrid | None = None):
    """Min of the selected index over the ``delta_n`` ball of each node.

    Negative (failed) indices are ignored. Returns the stabilized indices,
    and their scales as well when ``bandwidths`` is given.
    """
    idx = np.asarray(selected_indices, dtype=float)
    idx = np.where(idx < 0, np.nan, idx)
    out = ball_min(grid, idx, delta_n)
    out = np.where(np.isnan(out), -1, out).astype(np.int64)
    if bandwidths is None:
        return out
    sig = np.where(out >= 0, bandwidths.values[np.maximum(out, 0)], np.nan)
    return out, sig
