"""Robust noise-variance estimation from smoothing residuals.

Pipeline: pick a global bandwidth by K-fold cross-validation, take in-sample
residuals at that bandwidth, then estimate the local noise level from the
median absolute difference of residuals between nearby training points.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EffectiveRankDeficient, ValidationError
from .grid import knn_by_index
from .lps import Dataset, LpsModel, fit_many, predict_many

MAD_SCALE = math.sqrt(2.0) * 0.6745


def box_diameter(box) -> float:
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    return float(np.linalg.norm(box[:, 1] - box[:, 0]))


def cv_candidates(data: Dataset, count: int = 12) -> np.ndarray:
    """Geometric grid from diam / n^(1/d) up to the box diameter."""
    diam = box_diameter(data.box)
    return np.geomspace(diam / data.n ** (1.0 / data.d), diam, count)


def cv_global_bandwidth(data: Dataset, model: LpsModel, candidate_grid=None,
                        folds: int = 5, seed: int = 0) -> float:
    """Bandwidth with the smallest K-fold cross-validated squared error.

    Candidates for which any held-out prediction is rank deficient are
    dropped; ties go to the larger bandwidth.
    """
    from .kernels import n_stacked
    if data.n < 2 * n_stacked(data.d, model.Q):
        raise ValidationError("too few points for cross-validation")
    grid = cv_candidates(data) if candidate_grid is None else np.asarray(
        candidate_grid, dtype=float)
    perm = np.random.default_rng(seed).permutation(data.n)
    parts = np.array_split(perm, folds)
    errors = np.full(len(grid), np.inf)
    for c, sigma in enumerate(grid):
        sse = 0.0
        for k in range(folds):
            test = parts[k]
            train = np.setdiff1d(perm, test, assume_unique=True)
            sub = Dataset(data.inputs[train], data.labels[train], data.box)
            est, _, ok = fit_many(data.inputs[test], sigma, sub, model,
                                  strict=False)
            if not ok.all():
                sse = np.inf
                break
            sse += float(np.sum((est[:, 0] - data.labels[test]) ** 2))
        errors[c] = sse
    if not np.isfinite(errors).any():
        raise EffectiveRankDeficient("every cross-validation candidate failed")
    best = np.flatnonzero(errors == errors.min())
    return float(grid[best[-1]])


def residuals(data: Dataset, model: LpsModel, sigma_cv: float) -> np.ndarray:
    """In-sample residuals ``y_i - f_hat(x_i)`` at the global bandwidth."""
    return data.labels - predict_many(data.inputs, sigma_cv, data, model)


def noise_neighborhood_size(n: int, d: int, C_v: float,
                            homoscedastic: bool = False) -> int:
    """``ceil(C_v n^(2/(2+d)))`` capped at n, or n when homoscedastic."""
    if homoscedastic:
        return int(n)
    if C_v <= 0:
        raise ValidationError("C_v must be positive")
    return int(min(n, math.ceil(C_v * n ** (2.0 / (2 + d)) - 1e-9)))


@dataclass(eq=False)
class NoiseEstimate:
    """Median-absolute-difference noise estimate.

    ``diffs[i]`` holds ``|r_i - r_j|`` for the m nearest neighbours j of
    training point i. ``at(points)`` pools the rows of the l nearest
    training points of each query and returns the squared scaled median.
    """

    inputs: np.ndarray
    diffs: np.ndarray
    l_n: int
    m: int
    mode: str
    scale: float
    sigma_cv: float = math.nan
    _tree: cKDTree = None
    _global: float = None

    def __post_init__(self):
        if self.mode not in ("homoscedastic", "heteroscedastic"):
            raise ValidationError(f"unknown noise mode {self.mode!r}")
        self._tree = cKDTree(self.inputs)
        if self.mode == "homoscedastic" or self.l_n >= len(self.inputs):
            self._global = float((np.median(self.diffs) / MAD_SCALE) ** 2)

    def at(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, self.inputs.shape[1])
        if self._global is not None:
            return np.full(len(points), self._global)
        out = np.empty(len(points))
        step = max(1, 2_000_000 // (self.l_n * self.m))
        n = len(self.inputs)
        for s in range(0, len(points), step):
            nb = knn_by_index(self._tree, points[s:s + step], self.l_n, n,
                              scale=self.scale)
            pooled = self.diffs[nb].reshape(len(nb), -1)
            out[s:s + step] = (np.median(pooled, axis=1) / MAD_SCALE) ** 2
        return out


def residual_differences(inputs, r, m: int, scale: float = 1.0) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=float)
    n = len(inputs)
    if n < m + 1:
        raise ValidationError(f"need more than m={m} points, got {n}")
    tree = cKDTree(inputs)
    nb = knn_by_index(tree, inputs, m, n, exclude=np.arange(n), scale=scale)
    return np.abs(r[:, None] - r[nb])


def local_noise_mad(x, data: Dataset, r, l_n: int, m: int | None = None) -> float:
    """Noise variance at ``x`` from residuals ``r`` (single query)."""
    m = 2 * data.d if m is None else m
    if l_n < 1:
        raise ValidationError("l_n must be at least 1")
    est = NoiseEstimate(data.inputs, residual_differences(
        data.inputs, np.asarray(r, float), m, box_diameter(data.box)),
        min(l_n, data.n), m, "heteroscedastic", box_diameter(data.box))
    return float(est.at(np.asarray(x, dtype=float).reshape(1, -1))[0])


def estimate_noise(data: Dataset, model: LpsModel, mode: str = "heteroscedastic",
                   C_v: float = 1.0, m: int | None = None, seed: int = 0,
                   sigma_cv: float | None = None) -> NoiseEstimate:
    """Cross-validate, take residuals and build the MAD estimator."""
    m = 2 * data.d if m is None else m
    if sigma_cv is None:
        sigma_cv = cv_global_bandwidth(data, model, seed=seed)
    r = residuals(data, model, sigma_cv)
    homo = mode == "homoscedastic"
    l_n = noise_neighborhood_size(data.n, data.d, C_v, homo)
    diam = box_diameter(data.box)
    return NoiseEstimate(data.inputs, residual_differences(data.inputs, r, m, diam),
                         l_n, m, mode, diam, sigma_cv)
