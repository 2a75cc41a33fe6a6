"""The active-learning loop: estimate local properties on a grid, derive the
optimal training density, mix it with the current one and double the
training set.
"""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .density import (DensityField, batch_sampling_density, boundary_correct,
                      effective_interior, field_csv, lfc_estimate,
                      mixing_gammas, optimal_density, write_text_atomic)
from .errors import AlAborted, TooManyFailures, ValidationError
from .grid import EvalGrid, knn_by_index
from .kernels import check_order, n_stacked
from .lepski import (adaptive_grid, grid_constants, lepski_select_many,
                     stabilization_constant, stabilization_radius,
                     stabilize_lob, stabilize_noise)
from .lps import Dataset, LpsModel
from .noise import box_diameter, estimate_noise


@dataclass(frozen=True)
class AlConfig:
    """Constants and schedule of one active-learning run."""

    Q: int = 1
    d: int = 1
    C_v: float = 1.0
    C_s: float = 1.0
    C_sigma: float = 1.0
    C_delta: float = 0.1
    kappa: float = 1.96
    s_factor: float = 2.0
    homoscedastic: bool = False
    n0: int = 512
    K: int = 4
    grid_shape: tuple | None = None
    seed: int = 0
    equidistant: bool = True
    ceiling: float = 1.0
    cv_folds: int = 5
    max_failure_fraction: float = 0.1

    def __post_init__(self):
        if self.grid_shape is not None:
            object.__setattr__(self, "grid_shape", tuple(int(s) for s in self.grid_shape))
        self.validate()

    def validate(self):
        check_order(self.Q)
        if self.d < 1:
            raise ValidationError("d must be positive")
        for name in ("C_v", "C_s", "C_sigma", "C_delta", "kappa", "ceiling"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.s_factor < 0:
            raise ValidationError("s_factor must be nonnegative")
        if self.K < 0:
            raise ValidationError("K must be nonnegative")
        if self.n0 < 4 * n_stacked(self.d, self.Q):
            raise ValidationError(
                f"n0 must be at least {4 * n_stacked(self.d, self.Q)} for Q={self.Q}, d={self.d}")
        if self.grid_shape is not None and len(self.grid_shape) != self.d:
            raise ValidationError("grid_shape must have d entries")

    @classmethod
    def from_reference(cls, Q, d, n0, step0, sigma_floor0, delta0, **kw):
        """Back-solve C_s, C_sigma and C_delta from their values at n0."""
        C_sigma, C_s = grid_constants(n0, Q, d, sigma_floor0, step0)
        C_delta = stabilization_constant(n0, d, delta0)
        return cls(Q=Q, d=d, n0=n0, C_s=C_s, C_sigma=C_sigma, C_delta=C_delta, **kw)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["grid_shape"] = None if self.grid_shape is None else list(self.grid_shape)
        return out

    @classmethod
    def field_names(cls):
        return {f.name for f in fields(cls)}


@dataclass(frozen=True, eq=False)
class LabelOracle:
    """Ground truth: ``y = f(x) + sqrt(v(x)) * N(0, 1)``.

    ``f`` and ``v`` take (m, d) arrays. ``q`` is the test density (uniform
    over the box if omitted).
    """

    f: Callable
    v: Callable
    box: np.ndarray
    q: Callable | None = None
    name: str = "custom"

    @property
    def d(self) -> int:
        return len(np.asarray(self.box).reshape(-1, 2))

    def label(self, points, rng) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, self.d)
        var = np.asarray(self.v(points), dtype=float).reshape(-1)
        if np.any(var < 0):
            raise ValidationError("noise variance must be nonnegative")
        mean = np.asarray(self.f(points), dtype=float).reshape(-1)
        return mean + np.sqrt(var) * rng.standard_normal(len(points))

    def q_field(self, grid: EvalGrid) -> DensityField:
        if self.q is None:
            return DensityField.uniform(grid)
        return DensityField(grid, np.asarray(self.q(grid.nodes), float)).normalize()


@dataclass(eq=False)
class LocalEstimates:
    """Per-node fields of one iteration."""

    v_hat: np.ndarray
    v_tilde: np.ndarray
    index: np.ndarray
    index_tilde: np.ndarray
    sigma_tilde: np.ndarray
    lfc: np.ndarray
    p_opt: DensityField
    p_corrected: DensityField
    interior: np.ndarray
    failed: np.ndarray
    sigma_cv: float = math.nan


@dataclass(eq=False)
class AlRecord:
    iteration: int
    n: int
    density: DensityField
    gamma1: float = math.nan
    gamma2: float = math.nan
    estimates: LocalEstimates | None = None
    wall_time: float = 0.0


@dataclass(eq=False)
class AlTrace:
    config: AlConfig
    records: list = field(default_factory=list)
    data: Dataset | None = None
    sizes: list = field(default_factory=list)

    def metrics_rows(self):
        for r in self.records:
            est = r.estimates
            yield {
                "iteration": r.iteration,
                "n": r.n,
                "gamma1": r.gamma1,
                "gamma2": r.gamma2,
                "failed_nodes": int(est.failed.sum()) if est is not None else 0,
                "interior_fraction": float(est.interior.mean()) if est is not None else math.nan,
                "sigma_cv": est.sigma_cv if est is not None else math.nan,
            }


def _stream(seed, *tags):
    return np.random.default_rng([int(seed), *tags])


def eval_grid(config: AlConfig, box) -> EvalGrid:
    if config.grid_shape is None:
        return EvalGrid.default(box)
    return EvalGrid(box, config.grid_shape)


def initial_design(config: AlConfig, box) -> np.ndarray:
    """Cell-centred lattice with n0 points, or i.i.d. uniform points."""
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    if not config.equidistant:
        rng = _stream(config.seed, 0, 0)
        return box[:, 0] + rng.random((config.n0, config.d)) * (box[:, 1] - box[:, 0])
    m = round(config.n0 ** (1.0 / config.d))
    if m ** config.d != config.n0:
        raise ValidationError(f"n0={config.n0} is not a perfect power for a {config.d}-d lattice")
    return EvalGrid(box, (m,) * config.d).nodes


def _patch_failures(grid, idx_tilde):
    """Fill nodes left without an index from the nearest node that has one."""
    bad = idx_tilde < 0
    if not bad.any():
        return idx_tilde
    good = np.flatnonzero(~bad)
    nodes = grid.nodes
    tree = cKDTree(nodes[good])
    scale = float(np.linalg.norm(grid.box[:, 1] - grid.box[:, 0]))
    near = knn_by_index(tree, nodes[bad], 1, len(good), scale=scale)[:, 0]
    out = idx_tilde.copy()
    out[bad] = idx_tilde[good[near]]
    return out


def estimate_optimal_density(data: Dataset, p_k: DensityField, config: AlConfig,
                             q: DensityField | None = None, iteration: int = 0,
                             noise_override: Callable | None = None,
                             lob_override: Callable | None = None,
                             model: LpsModel | None = None) -> LocalEstimates:
    """Noise, bandwidth, complexity and boundary-corrected optimal density.

    ``noise_override(nodes)`` replaces the stabilized noise field and
    ``lob_override(nodes, v, p, n)`` replaces the stabilized isotropic
    bandwidth field; both exist to isolate parts of the pipeline.
    """
    model = model or LpsModel(Q=config.Q)
    grid = p_k.grid
    nodes = grid.nodes
    n, d = data.n, data.d
    diam = box_diameter(data.box)
    delta = stabilization_radius(n, d, config.C_delta)
    bw = adaptive_grid(n, config.Q, d, config.C_sigma, config.C_s, diam, config.ceiling)
    sigma_cv = math.nan

    if noise_override is None:
        mode = "homoscedastic" if config.homoscedastic else "heteroscedastic"
        est = estimate_noise(data, model, mode, config.C_v,
                             seed=int(_stream(config.seed, iteration, 1).integers(2**31)))
        sigma_cv = est.sigma_cv
        v_hat = est.at(nodes)
        v_tilde = stabilize_noise(grid, v_hat, delta)
    else:
        v_hat = np.broadcast_to(np.asarray(noise_override(nodes), float), (grid.size,)).copy()
        v_tilde = v_hat.copy()
    # a vanishing noise estimate would make the density degenerate
    floor = 1e-12 * max(float(np.var(data.labels)), 1e-300)
    v_tilde = np.maximum(v_tilde, floor)

    p_nodes = p_k.values
    if lob_override is None:
        v_train = v_tilde[grid.cell_index(data.inputs)]
        idx, _, _ = lepski_select_many(nodes, data, v_train, bw, config.kappa,
                                       model, strict=False)
        failed = idx < 0
        if failed.mean() > config.max_failure_fraction:
            raise TooManyFailures(
                f"{int(failed.sum())} of {grid.size} nodes have no feasible bandwidth at n={n}")
        idx_tilde = _patch_failures(grid, stabilize_lob(grid, idx, delta))
        sigma_tilde = bw.values[idx_tilde]
    else:
        idx = idx_tilde = np.full(grid.size, -1)
        failed = np.zeros(grid.size, dtype=bool)
        sigma_tilde = np.broadcast_to(
            np.asarray(lob_override(nodes, v_tilde, p_nodes, n), float), (grid.size,)).copy()

    qv = (q if q is not None else DensityField.uniform(grid)).values
    lfc = lfc_estimate(v_tilde, p_nodes, n, sigma_tilde, config.Q, d)
    p_opt = optimal_density(grid, lfc, v_tilde, qv, config.Q, d)
    try:
        interior = effective_interior(grid, sigma_tilde, config.s_factor)
        p_corr = boundary_correct(p_opt, interior)
    except ValidationError:
        # correcting a constant density is the identity whatever the interior
        if np.ptp(p_opt.values) > 1e-12 * p_opt.values.max():
            raise
        interior = np.zeros(grid.size, dtype=bool)
        p_corr = p_opt
    return LocalEstimates(v_hat, v_tilde, idx, idx_tilde, sigma_tilde, lfc,
                          p_opt, p_corr, interior, failed, sigma_cv)


def al_step(data: Dataset, p_k: DensityField, config: AlConfig,
            oracle: LabelOracle, iteration: int = 0,
            noise_override: Callable | None = None,
            lob_override: Callable | None = None, model: LpsModel | None = None):
    """One doubling step: estimate, mix, sample n new points and label them.

    Returns
    -------
    (Dataset, p_next, LocalEstimates, gamma1, gamma2)
    """
    local = estimate_optimal_density(data, p_k, config, oracle.q_field(p_k.grid),
                                     iteration, noise_override, lob_override, model)
    g1, g2 = mixing_gammas(p_k, local.p_corrected)
    p_next, p_tilde = batch_sampling_density(p_k, local.p_corrected, g2)
    rng = _stream(config.seed, iteration, 2)
    new_x = p_tilde.sample(data.n, rng)
    new_y = oracle.label(new_x, rng)
    out = Dataset(np.vstack([data.inputs, new_x]),
                  np.concatenate([data.labels, new_y]), data.box)
    return out, p_next, local, g1, g2


def run_active_learning(config: AlConfig, oracle: LabelOracle, trace_dir=None,
                        noise_override=None, lob_override=None) -> AlTrace:
    """Initial design followed by ``config.K`` doubling steps.

    On failure the completed part of the trace is persisted and attached to
    the raised :class:`~lpsactive.errors.AlAborted`.
    """
    if oracle.d != config.d:
        raise ValidationError("oracle dimension does not match the config")
    box = np.asarray(oracle.box, dtype=float).reshape(-1, 2)
    grid = eval_grid(config, box)
    x0 = initial_design(config, box)
    y0 = oracle.label(x0, _stream(config.seed, 0, 3))
    data = Dataset(x0, y0, box)
    p = DensityField.uniform(grid)
    trace = AlTrace(config, data=data, sizes=[data.n])
    model = LpsModel(Q=config.Q)
    for k in range(config.K):
        t0 = time.perf_counter()
        try:
            data_next, p_next, est, g1, g2 = al_step(
                data, p, config, oracle, k, noise_override, lob_override, model)
        except (ArithmeticError, RuntimeError, ValidationError) as exc:
            if trace_dir is not None:
                write_trace(trace, trace_dir)
            raise AlAborted(f"iteration {k} at n={data.n} failed: {exc}", trace) from exc
        trace.records.append(AlRecord(k, data.n, p, g1, g2, est,
                                      time.perf_counter() - t0))
        data, p = data_next, p_next
        trace.data = data
        trace.sizes.append(data.n)
    trace.records.append(AlRecord(config.K, data.n, p))
    if trace_dir is not None:
        write_trace(trace, trace_dir)
    return trace


def _rows_csv(header, rows) -> str:
    import csv
    import io
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


def write_trace(trace: AlTrace, path) -> None:
    """Persist config, per-iteration densities, dataset and metrics."""
    os.makedirs(path, exist_ok=True)
    write_text_atomic(os.path.join(path, "config.json"),
                      json.dumps(trace.config.to_dict(), indent=2, sort_keys=True) + "\n")
    for r in trace.records:
        extra = None
        if r.estimates is not None:
            e = r.estimates
            extra = {"v_tilde": e.v_tilde, "sigma_tilde": e.sigma_tilde,
                     "lfc": e.lfc, "p_opt": e.p_corrected.values}
        write_text_atomic(os.path.join(path, f"density_{r.iteration:02d}.csv"),
                          field_csv(r.density, extra))
    if trace.data is not None:
        d = trace.data.d
        rows = [list(map(float, x)) + [float(y)]
                for x, y in zip(trace.data.inputs, trace.data.labels)]
        write_text_atomic(os.path.join(path, "dataset.csv"),
                          _rows_csv([f"x{k + 1}" for k in range(d)] + ["y"], rows))
    metrics = list(trace.metrics_rows())
    header = ["iteration", "n", "gamma1", "gamma2", "failed_nodes",
              "interior_fraction", "sigma_cv"]
    write_text_atomic(os.path.join(path, "metrics.csv"),
                      _rows_csv(header, [[m[h] for h in header] for m in metrics]))
    write_text_atomic(os.path.join(path, "timing.csv"),
                      _rows_csv(["iteration", "seconds"],
                                [[r.iteration, r.wall_time] for r in trace.records]))
