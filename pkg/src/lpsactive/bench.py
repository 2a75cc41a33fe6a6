"""Benchmark generators, error metrics, the relative required sample size
and the experiment runner comparing sampling schemes.

Also hosts the anisotropic bias-cancelling demonstration: three bandwidth
constructions for ``f(x) = exp(2 x1) + log(0.1 + 3 x2)`` whose exact
conditional MSE should decay at increasing rates.
"""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.integrate import quad

from .active import AlConfig, LabelOracle, eval_grid, run_active_learning
from .baselines import (forest_fit, goetz_al_run, mondrian_fit,
                        mondrian_lifetime, random_test_sampling)
from .density import DensityField, write_text_atomic
from .errors import ValidationError
from .grid import EvalGrid
from .lepski import (adaptive_grid, lepski_select_many, stabilization_radius,
                     stabilize_noise)
from .lps import Dataset, LpsModel, fit_many, predict_many, unit_box
from .noise import box_diameter, estimate_noise

GENERATORS = ("heteroscedastic2d", "doppler")
SCHEMES = ("optimal", "random_test", "goetz_tree", "goetz_forest")
MODELS = ("lps_opt", "mondrian_tree", "mondrian_forest")

DOPPLER_EPS = 0.05
DOPPLER_NORM = 7.0
HETERO_AMPLITUDE = 100.0
TREE_LAMBDA = 2.5
FOREST_LAMBDA = 7.0
FOREST_TREES = 100
# the model whose partition the scheme's density is optimal for
GOETZ_MODEL = {"goetz_tree": "mondrian_tree", "goetz_forest": "mondrian_forest"}


# generators -----------------------------------------------------------------

def gen_heteroscedastic(d: int = 2) -> LabelOracle:
    """``100 sin(2 pi |x| / sqrt d)`` on the unit cube; variance 25 where
    every coordinate exceeds 1/d, else 1."""
    def f(x):
        x = np.asarray(x, dtype=float).reshape(-1, d)
        return HETERO_AMPLITUDE * np.sin(2 * np.pi * np.linalg.norm(x, axis=1) / math.sqrt(d))

    def v(x):
        x = np.asarray(x, dtype=float).reshape(-1, d)
        return np.where(np.all(x > 1.0 / d, axis=1), 25.0, 1.0)

    return LabelOracle(f, v, unit_box(d), name="heteroscedastic2d")


def _doppler_shape(x):
    e = DOPPLER_EPS
    return np.sqrt(x * (1 - x)) * np.sin(2 * np.pi * (1 + e) / (x + e))


@lru_cache(maxsize=None)
def doppler_constant() -> float:
    """Amplitude giving the Doppler function an L2 norm of 7 on [0, 1]."""
    val, _ = quad(lambda x: _doppler_shape(x) ** 2, 0.0, 1.0, limit=2000,
                  epsabs=1e-14, epsrel=1e-13)
    return DOPPLER_NORM / math.sqrt(val)


def gen_doppler() -> LabelOracle:
    C = doppler_constant()

    def f(x):
        x = np.clip(np.asarray(x, dtype=float).reshape(-1), 0.0, 1.0)
        return C * _doppler_shape(x)

    def v(x):
        return np.ones(np.asarray(x).reshape(-1).shape[0])

    return LabelOracle(f, v, unit_box(1), name="doppler")


def make_oracle(generator: str) -> LabelOracle:
    if generator == "heteroscedastic2d":
        return gen_heteroscedastic(2)
    if generator == "doppler":
        return gen_doppler()
    raise ValidationError(f"unknown generator {generator!r}")


def default_config(generator: str, Q: int = 1, seed: int = 0, **overrides) -> AlConfig:
    """Experiment settings, constants back-solved from their values at n0."""
    if generator == "heteroscedastic2d":
        base = dict(Q=Q, d=2, n0=1024, step0=2 ** (2 / 3), sigma_floor0=0.05,
                    delta0=0.1, C_v=2.0, kappa=2.58, s_factor=1.0,
                    homoscedastic=False, seed=seed, K=3)
    elif generator == "doppler":
        base = dict(Q=Q, d=1, n0=512, step0=2 ** (2 / 3), sigma_floor0=1.5e-3,
                    delta0=0.1, C_v=1.0, kappa=1.96, s_factor=2.0,
                    homoscedastic=True, seed=seed, K=4)
    else:
        raise ValidationError(f"unknown generator {generator!r}")
    base.update(overrides)
    ref = {k: base.pop(k) for k in ("step0", "sigma_floor0", "delta0")}
    return AlConfig.from_reference(base.pop("Q"), base.pop("d"), base.pop("n0"),
                                   ref["step0"], ref["sigma_floor0"], ref["delta0"],
                                   **base)


# metrics --------------------------------------------------------------------

def eval_rmse(predictions, truth) -> float:
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(truth, dtype=float)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def rrss_exponent(Q: int | None, d: int) -> float:
    """``(2(Q+1)+d) / (2(Q+1))``; ``Q=None`` means a locally constant model."""
    q1 = 0 if Q is None else Q + 1
    if q1 == 0:
        return (2 + d) / 2
    return (2 * q1 + d) / (2 * q1)


def rrss(mise_scheme, mise_random, Q: int | None, d: int) -> float:
    """Relative required sample size from a MISE ratio at equal n."""
    a = np.asarray(mise_scheme, dtype=float)
    b = np.asarray(mise_random, dtype=float)
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValidationError("MISE values must be positive")
    return float(np.mean(a / b) ** rrss_exponent(Q, d))


@dataclass(frozen=True)
class DecayFit:
    slope: float
    intercept: float
    r2: float


def fit_decay(sizes, mise) -> DecayFit:
    x = np.log(np.asarray(sizes, dtype=float))
    y = np.log(np.asarray(mise, dtype=float))
    if len(x) < 4:
        raise ValidationError("need at least four sizes for a decay fit")
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    r2 = 1.0 - float(resid @ resid) / float(((y - y.mean()) ** 2).sum())
    return DecayFit(float(slope), float(icpt), r2)


# model evaluation -------------------------------------------------------------

def stabilized_training_noise(data: Dataset, config: AlConfig, grid: EvalGrid,
                              model: LpsModel, seed: int):
    """Noise estimate on the grid, max-filtered, read off at the training points."""
    mode = "homoscedastic" if config.homoscedastic else "heteroscedastic"
    est = estimate_noise(data, model, mode, config.C_v, seed=seed)
    v = stabilize_noise(grid, est.at(grid.nodes),
                        stabilization_radius(data.n, data.d, config.C_delta))
    floor = 1e-12 * max(float(np.var(data.labels)), 1e-300)
    return np.maximum(v, floor)[grid.cell_index(data.inputs)], est.sigma_cv


def lps_opt_predict(data: Dataset, test_x, config: AlConfig, seed: int = 0,
                    v_train=None) -> np.ndarray:
    """LPS at the Lepski-selected bandwidth of every test point.

    Points without a feasible bandwidth get the prediction at the
    cross-validated global bandwidth.
    """
    model = LpsModel(Q=config.Q)
    grid = eval_grid(config, data.box)
    sigma_cv = None
    if v_train is None:
        v_train, sigma_cv = stabilized_training_noise(data, config, grid, model, seed)
    bw = adaptive_grid(data.n, config.Q, data.d, config.C_sigma, config.C_s,
                       box_diameter(data.box), config.ceiling)
    idx, pred, _ = lepski_select_many(test_x, data, v_train, bw, config.kappa,
                                      model, strict=False)
    bad = idx < 0
    if bad.any():
        if sigma_cv is None:
            from .noise import cv_global_bandwidth
            sigma_cv = cv_global_bandwidth(data, model, seed=seed)
        alt = predict_many(np.asarray(test_x)[bad], sigma_cv, data, model, strict=False)
        pred[bad] = np.where(np.isnan(alt), np.mean(data.labels), alt)
    return pred


def mondrian_predict(data: Dataset, test_x, model: str, seed) -> np.ndarray:
    if model == "mondrian_tree":
        life = mondrian_lifetime(data.n, data.d, TREE_LAMBDA)
        return mondrian_fit(data, life, seed).predict(test_x)
    life = mondrian_lifetime(data.n, data.d, FOREST_LAMBDA)
    return forest_fit(data, life, FOREST_TREES, seed).predict(test_x)


# experiments ------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentSpec:
    """One scheme compared against random test sampling under one model."""

    generator: str = "doppler"
    scheme: str = "optimal"
    model: str = "lps_opt"
    Q: int = 1
    sizes: tuple = (512, 1024, 2048, 4096, 8192)
    repetitions: int = 10
    seed: int = 0
    n_test: int = 10_000
    config_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if self.generator not in GENERATORS:
            raise ValidationError(f"unknown generator {self.generator!r}")
        if self.scheme not in SCHEMES or self.scheme == "random_test":
            raise ValidationError(f"scheme must be one of optimal, goetz_tree, goetz_forest")
        if self.model not in MODELS:
            raise ValidationError(f"unknown model {self.model!r}")
        if self.repetitions < 1:
            raise ValidationError("repetitions must be at least 1")
        if len(self.sizes) < 2 or any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ValidationError("sizes must be strictly increasing with at least two entries")
        if self.scheme == "optimal":
            ratios = [b / a for a, b in zip(self.sizes, self.sizes[1:])]
            if any(r != 2 for r in ratios):
                raise ValidationError("the optimal scheme needs a doubling size schedule")
        if self.scheme.startswith("goetz") and self.model == "lps_opt":
            raise ValidationError("goetz schemes are evaluated with a Mondrian model")

    def al_config(self, seed: int) -> AlConfig:
        cfg = default_config(self.generator, self.Q, seed=seed, **self.config_overrides)
        return AlConfig(**{**cfg.to_dict(), "n0": self.sizes[0],
                           "K": len(self.sizes) - 1, "seed": seed})


@dataclass(eq=False)
class ExperimentResult:
    spec: ExperimentSpec
    rows: list
    rho: float
    rho_halfwidth: float
    rho_per_rep: np.ndarray

    def results_csv(self) -> str:
        return rows_to_csv(RESULT_HEADER, self.rows)

    def summary_csv(self) -> str:
        return rows_to_csv(SUMMARY_HEADER, [self.summary_row()])

    def summary_row(self):
        return [self.spec.scheme, self.spec.model, self.spec.generator, self.spec.Q,
                self.rho, self.rho_halfwidth, self.spec.repetitions]


RESULT_HEADER = ["scheme", "model", "n", "repetition", "rmse", "mise", "seed"]
SUMMARY_HEADER = ["scheme", "model", "generator", "Q", "rho", "ci_halfwidth", "repetitions"]


def rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


def _rep_seeds(seed, rep):
    ss = np.random.SeedSequence([int(seed), int(rep)])
    return [int(s.generate_state(1)[0]) for s in ss.spawn(5)]


def _predict(model, data, test_x, cfg, seed, v_train=None):
    if model == "lps_opt":
        return lps_opt_predict(data, test_x, cfg, seed, v_train)
    return mondrian_predict(data, test_x, model, seed)


def run_repetition(spec: ExperimentSpec, rep: int, oracle: LabelOracle):
    """MISE of the scheme and of random test sampling at every size."""
    s_test, s_rand, s_run, s_fit, s_lab = _rep_seeds(spec.seed, rep)
    cfg = spec.al_config(s_run)
    grid = eval_grid(cfg, oracle.box)
    q = oracle.q_field(grid)
    test_x = random_test_sampling(q, spec.n_test, s_test)
    truth = oracle.f(test_x)
    out = {"random_test": [], spec.scheme: []}

    # random test sampling: nested prefixes of one i.i.d. stream
    rng = np.random.default_rng(s_rand)
    xr = random_test_sampling(q, spec.sizes[-1], rng)
    yr = oracle.label(xr, rng)
    for n in spec.sizes:
        data = Dataset(xr[:n], yr[:n], oracle.box)
        pred = _predict(spec.model, data, test_x, cfg, s_fit)
        out["random_test"].append(float(np.mean((pred - truth) ** 2)))

    if spec.scheme == "optimal":
        trace = run_active_learning(cfg, oracle)
        for k, n in enumerate(spec.sizes):
            data = Dataset(trace.data.inputs[:n], trace.data.labels[:n], oracle.box)
            v_train = None
            if k < len(trace.records) and trace.records[k].estimates is not None \
                    and spec.model == "lps_opt":
                v_tilde = trace.records[k].estimates.v_tilde
                v_train = v_tilde[grid.cell_index(data.inputs)]
            pred = _predict(spec.model, data, test_x, cfg, s_fit, v_train)
            out[spec.scheme].append(float(np.mean((pred - truth) ** 2)))
    else:
        trees = None if spec.scheme == "goetz_tree" else FOREST_TREES
        lam = TREE_LAMBDA if spec.scheme == "goetz_tree" else FOREST_LAMBDA
        for n in spec.sizes:
            # same cuboids as the random-sampling fit at this size
            run = goetz_al_run(n, oracle, q, lam, trees, [s_lab, n], partition_seed=s_fit)
            if spec.model == GOETZ_MODEL[spec.scheme]:
                pred = run.model.predict(test_x)
            else:
                pred = _predict(spec.model, run.data, test_x, cfg, s_fit)
            out[spec.scheme].append(float(np.mean((pred - truth) ** 2)))
    return out


def _repetition_job(args):
    spec, rep = args
    return run_repetition(spec, rep, make_oracle(spec.generator))


def run_experiment(spec: ExperimentSpec, out_dir=None, progress=None,
                   workers: int = 1) -> ExperimentResult:
    """Run all repetitions; optionally write results.csv and summary.csv.

    Repetitions are seeded independently, so running them in ``workers``
    processes gives the same output as running them in sequence.
    """
    oracle = make_oracle(spec.generator)
    jobs = [(spec, rep) for rep in range(spec.repetitions)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_repetition_job, jobs))
    else:
        outputs = map(_repetition_job, jobs)
    rows, rhos = [], []
    Qm = spec.Q if spec.model == "lps_opt" else None
    for rep, mise in enumerate(outputs):
        for scheme in ("random_test", spec.scheme):
            for n, m in zip(spec.sizes, mise[scheme]):
                rows.append([scheme, spec.model, n, rep, math.sqrt(m), m, spec.seed])
        top = slice(-2, None)
        rhos.append(rrss(mise[spec.scheme][top], mise["random_test"][top], Qm, oracle.d))
        if progress is not None:
            progress(rep, rhos[-1])
    rhos = np.array(rhos)
    half = 1.96 * rhos.std(ddof=1) / math.sqrt(len(rhos)) if len(rhos) > 1 else math.nan
    res = ExperimentResult(spec, rows, float(rhos.mean()), float(half), rhos)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_text_atomic(os.path.join(out_dir, "results.csv"), res.results_csv())
        write_text_atomic(os.path.join(out_dir, "summary.csv"), res.summary_csv())
    return res


def median_rmse_curve(rows, scheme: str) -> list:
    """(n, median RMSE over repetitions) pairs for one scheme."""
    by_n = {}
    for r in rows:
        if r[0] == scheme:
            by_n.setdefault(r[2], []).append(r[4])
    return [(n, float(np.median(v))) for n, v in sorted(by_n.items())]


# anisotropic bias-cancelling demonstration ------------------------------------

APPENDIX_A = 2.0
APPENDIX_B = 3.0
APPENDIX_V = 1e-4
APPENDIX_SLOPES = {"isotropic": -4 / 6, "naive": -8 / 10, "improved": -12 / 14}


def appendix_f(x):
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    return np.exp(APPENDIX_A * x[:, 0]) + np.log(0.1 + APPENDIX_B * x[:, 1])


def appendix_derivatives(x):
    """Pure second and fourth partial derivatives along each axis."""
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    a, b = APPENDIX_A, APPENDIX_B
    e = np.exp(a * x[:, 0])
    t = 0.1 + b * x[:, 1]
    return a * a * e, -b * b / t ** 2, a ** 4 * e, -6 * b ** 4 / t ** 4


def axis_ratio(x):
    """Second-order cancelling ratio ``sqrt(-f_11 / f_22)``."""
    d2_1, d2_2, _, _ = appendix_derivatives(x)
    return np.sqrt(-d2_1 / d2_2)


def appendix_scales(construction: str, x, n: int):
    """Per-axis bandwidths (k, 2) of one construction at points ``x``.

    Returns the scales and a boolean mask of points where the improved
    ratio was not positive and the naive ratio was used instead.
    """
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    d = 2
    R = 1.0 / (4 * np.pi)  # squared-kernel integral of the 2-d Gaussian
    mu2, mu4 = 1.0, 3.0
    v = APPENDIX_V
    fallback = np.zeros(len(x), dtype=bool)
    if construction == "isotropic":
        sig = (R * v * d / 4) ** (1 / 6) * n ** (-1 / (4 + d))
        return np.full((len(x), 2), sig), fallback
    s4 = axis_ratio(x)
    norm = np.maximum(1.0, s4)
    if construction == "naive":
        sig = (R * v * d / (8 * s4 * norm ** 8)) ** (1 / 10) * n ** (-1 / (8 + d))
        return np.column_stack([sig, sig * s4]), fallback
    if construction != "improved":
        raise ValidationError(f"unknown construction {construction!r}")
    sig = (R * v * d / (12 * s4 * norm ** 12)) ** (1 / 14) * n ** (-1 / (12 + d))
    d2_1, _, d4_1, d4_2 = appendix_derivatives(x)
    b4 = mu4 / 24 * (d4_1 + s4 ** 4 * d4_2)
    s6 = s4 * (1 - 2 * sig ** 2 * b4 / (d2_1 * (mu2 ** 2 - mu4)))
    fallback = s6 <= 0
    s6 = np.where(fallback, s4, s6)
    return np.column_stack([sig, sig * s6]), fallback


@dataclass(eq=False)
class AppendixResult:
    sizes: np.ndarray
    mise: dict
    fits: dict
    fallback_points: dict
    failed_points: dict


def appendix_demo(n_schedule=tuple(2 ** k for k in range(10, 16)), seed: int = 0,
                  repetitions: int = 2, eval_points: int = 25,
                  mode: str = "oracle") -> AppendixResult:
    """Exact conditional MISE over ``[0.1, 0.9]^2`` for the three constructions.

    ``mode="labels"`` replaces the exact MSE by squared errors of one noisy
    label draw per repetition.
    """
    if mode not in ("oracle", "labels"):
        raise ValidationError("mode must be 'oracle' or 'labels'")
    g = np.linspace(0.1, 0.9, eval_points)
    pts = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    model = LpsModel(Q=1)
    sizes = np.asarray(n_schedule, dtype=int)
    mise = {c: [] for c in APPENDIX_SLOPES}
    fallback = {c: 0 for c in APPENDIX_SLOPES}
    failed = {c: 0 for c in APPENDIX_SLOPES}
    truth = appendix_f(pts)
    for n in sizes:
        acc = {c: [] for c in APPENDIX_SLOPES}
        for rep in range(repetitions):
            rng = np.random.default_rng([seed, int(n), rep])
            X = rng.random((n, 2))
            fX = appendix_f(X)
            data = Dataset(X, fX, unit_box(2))
            noisy = fX + math.sqrt(APPENDIX_V) * rng.standard_normal(n)
            for c in APPENDIX_SLOPES:
                S, fb = appendix_scales(c, pts, int(n))
                fallback[c] += int(fb.sum())
                if mode == "oracle":
                    est, var, ok = fit_many(pts, S, data, model, v=APPENDIX_V, strict=False)
                    err = (truth - est[:, 0]) ** 2 + var
                else:
                    est, _, ok = fit_many(pts, S, data, model, columns=noisy, strict=False)
                    err = (truth - est[:, 0]) ** 2
                failed[c] += int((~ok).sum())
                acc[c].append(float(np.mean(err[ok])))
        for c in APPENDIX_SLOPES:
            mise[c].append(float(np.mean(acc[c])))
    fits = {c: fit_decay(sizes, mise[c]) for c in APPENDIX_SLOPES}
    return AppendixResult(sizes, {c: np.array(m) for c, m in mise.items()}, fits,
                          fallback, failed)
