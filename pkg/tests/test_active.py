import json
import math

import numpy as np
import pytest

from lpsactive.active import (AlConfig, LabelOracle, _patch_failures, al_step,
                              estimate_optimal_density, eval_grid,
                              initial_design, run_active_learning, write_trace)
from lpsactive.bench import default_config, make_oracle
from lpsactive.density import (DensityField, batch_sampling_density,
                               optimal_density, optimal_exponents)
from lpsactive.errors import AlAborted, ValidationError
from lpsactive.grid import EvalGrid
from lpsactive.kernels import (GAUSSIAN, InvalidOrder, asymptotic_isotropic_lob,
                               kernel_constants)
from lpsactive.lepski import adaptive_grid, stabilization_radius
from lpsactive.lps import Dataset, unit_box


def const_oracle(d=1):
    return LabelOracle(lambda x: np.full(len(np.reshape(x, (-1, d))), 3.0),
                       lambda x: np.ones(len(np.reshape(x, (-1, d)))), unit_box(d))


def small_config(**kw):
    base = dict(Q=1, d=1, n0=64, K=2, C_sigma=0.05, C_s=4.0, C_delta=0.05,
                grid_shape=(64,), kappa=1.96, s_factor=0.0)
    base.update(kw)
    return AlConfig(**base)


# config ------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(InvalidOrder, match="Q must be odd"):
        AlConfig(Q=2)
    with pytest.raises(ValidationError):
        AlConfig(n0=4)
    with pytest.raises(ValidationError):
        AlConfig(K=-1)
    with pytest.raises(ValidationError):
        AlConfig(kappa=0)
    with pytest.raises(ValidationError):
        AlConfig(d=2, n0=1024, grid_shape=(10,))


def test_reference_constants_reproduce_reference_values():
    cfg = AlConfig.from_reference(1, 1, 512, 2 ** (2 / 3), 1.5e-3, 0.1)
    bw = adaptive_grid(512, 1, 1, cfg.C_sigma, cfg.C_s, 1.0)
    assert bw.sigma_floor == pytest.approx(1.5e-3, rel=1e-12)
    assert bw.step == pytest.approx(2 ** (2 / 3), rel=1e-12)
    assert stabilization_radius(512, 1, cfg.C_delta) == pytest.approx(0.1, rel=1e-12)


def test_config_dict_round_trip():
    cfg = default_config("heteroscedastic2d", Q=3, grid_shape=(20, 20))
    assert AlConfig(**json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_initial_design():
    lat = initial_design(AlConfig(d=2, n0=1024), unit_box(2))
    assert lat.shape == (1024, 2)
    assert len(np.unique(lat[:, 0])) == 32
    with pytest.raises(ValidationError):
        initial_design(AlConfig(d=2, n0=1000), unit_box(2))
    iid = initial_design(AlConfig(d=2, n0=1000, equidistant=False), unit_box(2))
    assert iid.shape == (1000, 2) and len(np.unique(iid[:, 0])) == 1000


def test_oracle_rejects_negative_variance():
    bad = LabelOracle(lambda x: np.zeros(len(x)), lambda x: -np.ones(len(x)), unit_box(1))
    with pytest.raises(ValidationError):
        bad.label(np.zeros((3, 1)), np.random.default_rng(0))


# single step -----------------------------------------------------------------------

def test_constant_function_gives_uniform_density():
    cfg = small_config(homoscedastic=True)
    oracle = const_oracle()
    grid = eval_grid(cfg, oracle.box)
    x = initial_design(cfg, oracle.box)
    data = Dataset(x, oracle.label(x, np.random.default_rng(0)), oracle.box)
    p0 = DensityField.uniform(grid)
    new, p1, est, g1, g2 = al_step(data, p0, cfg, oracle)
    np.testing.assert_allclose(est.p_corrected.values, 1.0, rtol=1e-12)
    assert g1 == pytest.approx(1.0) and g2 == 0.0
    np.testing.assert_allclose(p1.values, 1.0, rtol=1e-12)


def test_constant_function_with_boundary_margin():
    # every node selects the widest scale, so no node is interior; the
    # density is constant and needs no correction
    cfg = small_config(homoscedastic=True, s_factor=2.0, K=1)
    trace = run_active_learning(cfg, const_oracle())
    est = trace.records[0].estimates
    assert not est.interior.any()
    np.testing.assert_allclose(est.p_corrected.values, 1.0, rtol=1e-12)


def test_step_doubles_and_stays_in_box():
    oracle = make_oracle("doppler")
    cfg = default_config("doppler", K=1)
    grid = eval_grid(cfg, oracle.box)
    x = initial_design(cfg, oracle.box)
    data = Dataset(x, oracle.label(x, np.random.default_rng(0)), oracle.box)
    new, *_ = al_step(data, DensityField.uniform(grid), cfg, oracle)
    assert new.n == 2 * data.n
    np.testing.assert_array_equal(new.inputs[: data.n], data.inputs)
    assert np.all((new.inputs >= 0) & (new.inputs <= 1))


def test_heteroscedastic_step_favours_the_noisy_quadrant():
    oracle = make_oracle("heteroscedastic2d")
    cfg = default_config("heteroscedastic2d", Q=1)
    grid = eval_grid(cfg, oracle.box)
    x = initial_design(cfg, oracle.box)
    data = Dataset(x, oracle.label(x, np.random.default_rng(0)), oracle.box)
    est = estimate_optimal_density(data, DensityField.uniform(grid), cfg, oracle.q_field(grid))
    radius = np.linalg.norm(grid.nodes, axis=1)
    noisy = np.all(grid.nodes > 0.5, axis=1)
    vals = est.p_corrected.values
    ratios = []
    for lo in np.arange(0.75, 1.35, 0.1):
        band = (radius >= lo) & (radius < lo + 0.1)
        if not (band & noisy).any() or not (band & ~noisy).any():
            continue
        ratios.append(vals[band & noisy].mean() / vals[band & ~noisy].mean())
    ratio = math.exp(np.mean(np.log(ratios)))
    print(f"matched-radius density ratio {ratio:.3f} (analytic {25 ** 0.4:.3f})")
    assert 2.0 <= ratio <= 5.5


# plumbing isolation -----------------------------------------------------------------

def exp_oracle():
    return LabelOracle(lambda x: np.exp(2 * np.reshape(x, -1)),
                       lambda x: 1.0 + np.reshape(x, -1), unit_box(1))


def exp_bias(nodes):
    # Gaussian LLS in 1-d: leading bias coefficient is half the second derivative
    return 0.5 * 4 * np.exp(2 * nodes[:, 0])


def true_lob(constants):
    def lob(nodes, v, p, n):
        b = exp_bias(nodes)
        return np.array([asymptotic_isotropic_lob(vi, pi, n, bi, constants)
                         for vi, pi, bi in zip(v, p, b)])
    return lob


def analytic_density(grid, oracle, Q, d):
    c = kernel_constants(GAUSSIAN, Q, d)
    D = c.rate
    lfc = c.C_Q ** (-d) * np.abs(exp_bias(grid.nodes)) ** (2 * d / D)
    return optimal_density(grid, lfc, oracle.v(grid.nodes), 1.0, Q, d)


def test_plumbing_isolation_matches_analytic_density():
    oracle = exp_oracle()
    cfg = small_config(K=3)
    c = kernel_constants(GAUSSIAN, 1, 1)
    trace = run_active_learning(cfg, oracle, noise_override=oracle.v,
                                lob_override=true_lob(c))
    expected = analytic_density(eval_grid(cfg, oracle.box), oracle, 1, 1)
    # the complexity is free of p and n, so every iteration lands on the same density
    for rec in trace.records[:-1]:
        np.testing.assert_allclose(rec.estimates.p_corrected.values, expected.values,
                                   rtol=1e-8, atol=0)
        assert rec.estimates.interior.all()


def test_mixture_bookkeeping():
    oracle = make_oracle("doppler")
    cfg = default_config("doppler", K=3)
    trace = run_active_learning(cfg, oracle)
    assert trace.sizes == [512 * 2 ** k for k in range(4)]
    for a, b in zip(trace.records, trace.records[1:]):
        nxt, tilde = batch_sampling_density(a.density, a.estimates.p_corrected, a.gamma2)
        np.testing.assert_allclose(b.density.values, nxt.values, atol=1e-12, rtol=0)
        np.testing.assert_allclose(b.density.values,
                                   0.5 * a.density.values + 0.5 * tilde.values,
                                   atol=1e-12, rtol=0)
        assert a.gamma1 >= 1.0 - 1e-12 and 0.0 <= a.gamma2 < 0.5
    for r in trace.records:
        assert r.density.mass == pytest.approx(1.0, abs=1e-9)
        assert r.density.values.min() >= 0


# runs ------------------------------------------------------------------------------------

def test_zero_iterations():
    cfg = small_config(K=0)
    trace = run_active_learning(cfg, exp_oracle())
    assert trace.sizes == [64]
    assert len(trace.records) == 1 and trace.records[0].estimates is None
    assert trace.data.n == 64


def test_dimension_mismatch():
    with pytest.raises(ValidationError):
        run_active_learning(small_config(), const_oracle(2))


def test_run_is_deterministic(tmp_path):
    oracle = make_oracle("doppler")
    cfg = default_config("doppler", K=2, seed=5)
    a = run_active_learning(cfg, oracle, trace_dir=tmp_path / "a")
    b = run_active_learning(cfg, oracle, trace_dir=tmp_path / "b")
    np.testing.assert_array_equal(a.data.inputs, b.data.inputs)
    np.testing.assert_array_equal(a.data.labels, b.data.labels)
    for name in ("config.json", "dataset.csv", "metrics.csv", "density_00.csv", "density_02.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    other = run_active_learning(default_config("doppler", K=2, seed=6), oracle)
    assert not np.array_equal(a.data.inputs, other.data.inputs)


def test_trace_files(tmp_path):
    cfg = small_config()
    trace = run_active_learning(cfg, exp_oracle(), trace_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["config.json", "dataset.csv", "density_00.csv", "density_01.csv",
                     "density_02.csv", "metrics.csv", "timing.csv"]
    assert AlConfig(**json.loads((tmp_path / "config.json").read_text())) == cfg
    back = DensityField.from_csv(tmp_path / "density_02.csv")
    np.testing.assert_array_equal(back.values, trace.records[-1].density.values)
    header = (tmp_path / "density_00.csv").read_text().splitlines()[1]
    assert header == "x1,v_tilde,sigma_tilde,lfc,p_opt,density"
    rows = (tmp_path / "metrics.csv").read_text().splitlines()
    assert rows[0] == "iteration,n,gamma1,gamma2,failed_nodes,interior_fraction,sigma_cv"
    assert len(rows) == 4
    assert len((tmp_path / "dataset.csv").read_text().splitlines()) == 1 + 256


def test_abort_keeps_partial_trace(tmp_path):
    c = kernel_constants(GAUSSIAN, 1, 1)
    lob = true_lob(c)

    def failing_lob(nodes, v, p, n):
        if n > 64:
            raise RuntimeError("boom")
        return lob(nodes, v, p, n)

    oracle = exp_oracle()
    with pytest.raises(AlAborted) as info:
        run_active_learning(small_config(K=3), oracle, trace_dir=tmp_path,
                            noise_override=oracle.v, lob_override=failing_lob)
    trace = info.value.trace
    assert trace.sizes == [64, 128]
    assert len(trace.records) == 1
    assert "n=128" in str(info.value)
    assert (tmp_path / "density_00.csv").exists()
    assert not (tmp_path / "density_01.csv").exists()


def test_empty_interior_aborts():
    oracle = exp_oracle()
    with pytest.raises(AlAborted, match="interior"):
        run_active_learning(small_config(K=1, s_factor=2.0), oracle,
                            noise_override=oracle.v,
                            lob_override=lambda nodes, v, p, n: np.full(len(nodes), 0.6))


def test_failed_nodes_are_patched_from_neighbours():
    g = EvalGrid(unit_box(1), (6,))
    idx = np.array([-1, 2, 3, -1, 5, -1])
    np.testing.assert_array_equal(_patch_failures(g, idx), [2, 2, 3, 3, 5, 5])
    np.testing.assert_array_equal(_patch_failures(g, np.arange(6)), np.arange(6))


@pytest.fixture(scope="module")
def doppler_terminal_windows():
    oracle = make_oracle("doppler")
    out = []
    for seed in range(10):
        trace = run_active_learning(default_config("doppler", seed=seed), oracle)
        final = trace.records[-1]
        assert final.n == 2 ** 13
        xs = final.density.grid.nodes[:, 0]
        smooth = np.convolve(final.density.values, np.ones(5) / 5, mode="same")
        out.append(smooth[(xs >= 0.05) & (xs <= 0.9)])
    return out


@pytest.mark.xfail(strict=True, reason=(
    "the complexity divides by the current density, so each step of an earlier "
    "bandwidth staircase leaves an upward kink of about 0.4% after smoothing"))
def test_doppler_terminal_density_strictly_monotone(doppler_terminal_windows):
    wins = sum(bool(np.all(np.diff(w) <= 0)) for w in doppler_terminal_windows)
    assert wins >= 8


def test_doppler_terminal_density_decreases(doppler_terminal_windows):
    wins = 0
    for window in doppler_terminal_windows:
        rises = np.diff(window) / window[:-1]
        # the bandwidth grid is discrete, so the density is a staircase whose
        # steps leave small upward kinks of well under one percent
        if rises.max() < 0.01 and window[0] > 4 * window[-1]:
            wins += 1
    assert wins >= 8
