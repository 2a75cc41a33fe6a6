"""Command-line front end.

Subcommands::

    lpsactive run --config cfg.json [--out DIR] [--seed N] [--threads N]
    lpsactive density DATASET.csv --config cfg.json [--out FILE]
    lpsactive report TRACE_DIR [--out DIR]

Exit codes: 0 success, 2 invalid input or configuration, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

import numpy as np

from .active import AlConfig, estimate_optimal_density, eval_grid, run_active_learning
from .density import DensityField, field_csv, write_text_atomic
from .errors import ValidationError

MODES = ("al", "experiment", "appendix")
RUN_KEYS = {"mode", "generator", "scheme", "model", "sizes", "repetitions",
            "n_test", "out", "box"}
AL_KEYS = AlConfig.field_names()
ALLOWED = RUN_KEYS | AL_KEYS


class CorruptTrace(RuntimeError):
    pass


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ValidationError("config must be a JSON object")
    unknown = sorted(set(cfg) - ALLOWED)
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
    mode = cfg.get("mode", "al")
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {', '.join(MODES)}")
    return cfg


def _al_config(cfg: dict, seed: int) -> AlConfig:
    from .bench import default_config
    Q = cfg.get("Q", 1)
    if not isinstance(Q, int) or Q < 1 or Q % 2 == 0:
        raise ValidationError("Q must be odd and positive")
    overrides = {k: v for k, v in cfg.items() if k in AL_KEYS and k not in ("Q", "seed")}
    gen = cfg.get("generator")
    if gen is None:
        return AlConfig(Q=Q, seed=seed, **overrides)
    base = default_config(gen, Q, seed=seed)
    d = base.to_dict()
    d.update(overrides)
    return AlConfig(**d)


def _experiment_spec(cfg: dict, seed: int):
    from .bench import ExperimentSpec
    kw = {k: cfg[k] for k in ("generator", "scheme", "model", "sizes",
                              "repetitions", "n_test") if k in cfg}
    if "Q" in cfg:
        kw["Q"] = cfg["Q"]
    overrides = {k: v for k, v in cfg.items()
                 if k in AL_KEYS and k not in ("Q", "seed", "n0", "K", "d")}
    return ExperimentSpec(seed=seed, config_overrides=overrides, **kw)


def _normalized_echo(cfg: dict, seed: int, threads: int) -> str:
    echo = dict(cfg)
    echo["seed"] = seed
    echo["threads"] = threads
    return json.dumps(echo, indent=2, sort_keys=True) + "\n"


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    out = args.out or cfg.get("out")
    if not out:
        raise ValidationError("no output directory given (--out or 'out' in the config)")
    if args.threads < 1:
        raise ValidationError("--threads must be at least 1")
    mode = cfg.get("mode", "al")
    if mode == "al":
        from .bench import make_oracle
        if "generator" not in cfg:
            raise ValidationError("mode 'al' needs a generator")
        config = _al_config(cfg, seed)
        oracle = make_oracle(cfg["generator"])
        if oracle.d != config.d:
            raise ValidationError("generator dimension does not match d")
        os.makedirs(out, exist_ok=True)
        run_active_learning(config, oracle, trace_dir=out)
    elif mode == "experiment":
        from .bench import run_experiment
        spec = _experiment_spec(cfg, seed)
        os.makedirs(out, exist_ok=True)
        run_experiment(spec, out_dir=out, workers=args.threads)
    else:
        from .bench import appendix_demo, rows_to_csv
        sizes = cfg.get("sizes", [2 ** k for k in range(10, 16)])
        reps = int(cfg.get("repetitions", 2))
        res = appendix_demo(tuple(sizes), seed=seed, repetitions=reps)
        os.makedirs(out, exist_ok=True)
        rows = [[c, int(n), float(m)] for c in res.mise for n, m in zip(res.sizes, res.mise[c])]
        write_text_atomic(os.path.join(out, "appendix_mise.csv"),
                          rows_to_csv(["construction", "n", "mise"], rows))
        fits = [[c, f.slope, f.intercept, f.r2, res.fallback_points[c], res.failed_points[c]]
                for c, f in res.fits.items()]
        write_text_atomic(os.path.join(out, "appendix_fits.csv"),
                          rows_to_csv(["construction", "slope", "intercept", "r2",
                                       "fallback_points", "failed_points"], fits))
    write_text_atomic(os.path.join(out, "run_config.json"),
                      _normalized_echo(cfg, seed, args.threads))
    return 0


def read_dataset(path, d: int):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ValidationError(f"cannot read dataset {path}: {exc}") from None
    if not rows:
        raise ValidationError(f"{path}: empty dataset")
    head = rows[0]
    try:
        vals = np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=float)
    except ValueError:
        raise ValidationError(f"{path}: non-numeric entries") from None
    if vals.ndim != 2 or vals.shape[1] != d + 1 or len(head) != d + 1:
        raise ValidationError(
            f"{path}: expected {d} input columns and one label column, got {len(head)} columns")
    return vals[:, :d], vals[:, d]


def cmd_density(args) -> int:
    from .lps import Dataset
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    config = _al_config(cfg, seed)
    X, y = read_dataset(args.dataset, config.d)
    if "box" in cfg:
        box = np.asarray(cfg["box"], dtype=float).reshape(-1, 2)
    elif "generator" in cfg:
        from .bench import make_oracle
        box = make_oracle(cfg["generator"]).box
    else:
        box = np.tile([0.0, 1.0], (config.d, 1))
    if box.shape[0] != config.d:
        raise ValidationError("box dimension does not match d")
    data = Dataset(X, y, box)
    grid = eval_grid(config, box)
    est = estimate_optimal_density(data, DensityField.uniform(grid), config)
    text = field_csv(est.p_corrected, {"v_tilde": est.v_tilde,
                                       "sigma_tilde": est.sigma_tilde, "lfc": est.lfc})
    out = args.out or "density.csv"
    parent = os.path.dirname(os.path.abspath(out))
    os.makedirs(parent, exist_ok=True)
    write_text_atomic(out, text)
    return 0


def _read_csv(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise CorruptTrace(f"cannot read {path}: {exc}") from None
    if not rows:
        raise CorruptTrace(f"corrupt file {path}: empty")
    return rows[0], rows[1:]


def _report_experiment(path, out):
    from .bench import rows_to_csv, rrss_exponent
    res_path = os.path.join(path, "results.csv")
    head, rows = _read_csv(res_path)
    need = ["scheme", "model", "n", "repetition", "rmse", "mise", "seed"]
    if head != need:
        raise CorruptTrace(f"corrupt file {res_path}: unexpected header")
    try:
        recs = [(r[0], r[1], int(r[2]), int(r[3]), float(r[4]), float(r[5])) for r in rows]
    except (ValueError, IndexError):
        raise CorruptTrace(f"corrupt file {res_path}: malformed row") from None
    cfg_path = os.path.join(path, "run_config.json")
    Q, d = None, None
    if os.path.exists(cfg_path):
        try:
            with open(cfg_path) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError):
            raise CorruptTrace(f"corrupt file {cfg_path}") from None
        Q = cfg.get("Q", 1)
        d = 2 if cfg.get("generator") == "heteroscedastic2d" else 1
    curves = {}
    for s, m, n, rep, rmse, mise in recs:
        curves.setdefault((s, m, n), []).append((rep, rmse, mise))
    curve_rows = [[s, m, n, float(np.median([c[1] for c in v])), len(v)]
                  for (s, m, n), v in sorted(curves.items())]
    write_text_atomic(os.path.join(out, "curves.csv"),
                      rows_to_csv(["scheme", "model", "n", "median_rmse", "repetitions"],
                                  curve_rows))
    rho_rows = []
    schemes = sorted({(s, m) for s, m, *_ in recs if s != "random_test"})
    for s, m in schemes:
        ns = sorted({n for (ss, mm, n) in curves if ss == s and mm == m
                     and (("random_test", m, n) in curves)})
        rho = math.nan
        if ns and d is not None:
            top = ns[-2:]
            expo = rrss_exponent(Q if m == "lps_opt" else None, d)
            per_rep = {}
            for n in top:
                a = {rep: mise for rep, _, mise in curves[(s, m, n)]}
                b = {rep: mise for rep, _, mise in curves[("random_test", m, n)]}
                for rep in sorted(set(a) & set(b)):
                    per_rep.setdefault(rep, []).append(a[rep] / b[rep])
            vals = [np.mean(v) ** expo for v in per_rep.values()]
            rho = float(np.mean(vals)) if vals else math.nan
        rho_rows.append([s, m, rho])
    write_text_atomic(os.path.join(out, "rho.csv"),
                      rows_to_csv(["scheme", "model", "rho"], rho_rows))


def _report_trace(path, out):
    from .bench import rows_to_csv
    met = os.path.join(path, "metrics.csv")
    head, rows = _read_csv(met)
    if head[:2] != ["iteration", "n"]:
        raise CorruptTrace(f"corrupt file {met}: unexpected header")
    try:
        out_rows = [[int(r[0]), int(r[1]), float(r[2]), float(r[3])] for r in rows]
    except (ValueError, IndexError):
        raise CorruptTrace(f"corrupt file {met}: malformed row") from None
    for k, *_ in out_rows:
        dpath = os.path.join(path, f"density_{k:02d}.csv")
        try:
            DensityField.from_csv(dpath)
        except (OSError, ValueError, IndexError, ValidationError):
            raise CorruptTrace(f"corrupt file {dpath}") from None
    write_text_atomic(os.path.join(out, "curve.csv"),
                      rows_to_csv(["iteration", "n", "gamma1", "gamma2"], out_rows))


def cmd_report(args) -> int:
    path = args.trace_dir
    if not os.path.isdir(path):
        raise ValidationError(f"{path} is not a directory")
    out = args.out or path
    os.makedirs(out, exist_ok=True)
    if os.path.exists(os.path.join(path, "results.csv")):
        _report_experiment(path, out)
    elif os.path.exists(os.path.join(path, "metrics.csv")):
        _report_trace(path, out)
    else:
        raise CorruptTrace(f"{path}: neither results.csv nor metrics.csv found")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="lpsactive",
                                description="Active learning with local polynomial smoothing.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an active-learning trace or an experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.add_argument("--seed", type=int)
    r.add_argument("--threads", type=int, default=1)
    r.set_defaults(func=cmd_run)
    d = sub.add_parser("density", help="estimate the optimal density from a dataset")
    d.add_argument("dataset")
    d.add_argument("--config", required=True)
    d.add_argument("--out")
    d.add_argument("--seed", type=int)
    d.add_argument("--threads", type=int, default=1)
    d.set_defaults(func=cmd_density)
    s = sub.add_parser("report", help="summarize a trace or experiment directory")
    s.add_argument("trace_dir")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
