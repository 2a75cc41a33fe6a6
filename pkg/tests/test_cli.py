import json
import subprocess
import sys

import numpy as np
import pytest

from lpsactive.bench import gen_doppler
from lpsactive.cli import main
from lpsactive.density import DensityField


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def write_dataset(path, x, y):
    np.savetxt(path, np.column_stack([x, y]), delimiter=",", header="x1,y", comments="")
    return str(path)


@pytest.fixture(scope="module")
def al_trace(tmp_path_factory):
    root = tmp_path_factory.mktemp("al")
    cfg = write_json(root / "cfg.json", {"generator": "doppler", "K": 1})
    out = root / "nested" / "trace"
    assert main(["run", "--config", cfg, "--out", str(out), "--seed", "3"]) == 0
    return root, cfg, out


def test_run_writes_trace(al_trace):
    _, _, out = al_trace
    names = {p.name for p in out.iterdir()}
    assert {"config.json", "run_config.json", "metrics.csv", "dataset.csv",
            "density_00.csv", "density_01.csv", "timing.csv"} <= names
    echo = json.loads((out / "run_config.json").read_text())
    assert echo == {"generator": "doppler", "K": 1, "seed": 3, "threads": 1}
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["seed"] == 3 and cfg["K"] == 1 and cfg["n0"] == 512


def test_run_is_reproducible(al_trace, tmp_path):
    _, cfg, out = al_trace
    assert main(["run", "--config", cfg, "--out", str(tmp_path), "--seed", "3"]) == 0
    for name in ("metrics.csv", "dataset.csv", "density_01.csv", "config.json"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_validation_exit_codes(tmp_path, capsys):
    bad_q = write_json(tmp_path / "q.json", {"generator": "doppler", "Q": 2})
    assert main(["run", "--config", bad_q, "--out", str(tmp_path / "o")]) == 2
    assert "Q must be odd" in capsys.readouterr().err
    unknown = write_json(tmp_path / "u.json", {"generator": "doppler", "colour": 1})
    assert main(["run", "--config", unknown, "--out", str(tmp_path / "o")]) == 2
    assert "colour" in capsys.readouterr().err
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["run", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2
    no_gen = write_json(tmp_path / "g.json", {"K": 1})
    assert main(["run", "--config", no_gen, "--out", str(tmp_path / "o")]) == 2
    mismatch = write_json(tmp_path / "d.json", {"generator": "doppler", "d": 2, "n0": 1024})
    assert main(["run", "--config", mismatch, "--out", str(tmp_path / "o")]) == 2
    assert main(["bogus"]) == 2
    assert main(["run"]) == 2


def test_runtime_failure_exit_code(tmp_path, capsys):
    # no node keeps its kernel support inside the box
    cfg = write_json(tmp_path / "c.json", {"generator": "doppler", "K": 1, "s_factor": 1e4})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    assert "iteration 0" in capsys.readouterr().err


def test_experiment_and_report(tmp_path):
    cfg = write_json(tmp_path / "e.json", {
        "mode": "experiment", "generator": "heteroscedastic2d", "scheme": "goetz_tree",
        "model": "mondrian_tree", "sizes": [256, 512], "repetitions": 2, "n_test": 400})
    out = tmp_path / "exp"
    assert main(["run", "--config", cfg, "--out", str(out), "--seed", "1"]) == 0
    assert main(["report", str(out), "--out", str(tmp_path / "r1")]) == 0
    assert main(["report", str(out), "--out", str(tmp_path / "r2")]) == 0
    for name in ("curves.csv", "rho.csv"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()
    rho = (tmp_path / "r1" / "rho.csv").read_text().splitlines()
    assert rho[0] == "scheme,model,rho"
    scheme, model, value = rho[1].split(",")
    assert (scheme, model) == ("goetz_tree", "mondrian_tree")
    assert np.isfinite(float(value))
    summary = (out / "summary.csv").read_text().splitlines()[1].split(",")
    assert float(value) == pytest.approx(float(summary[4]))
    curves = (tmp_path / "r1" / "curves.csv").read_text().splitlines()
    assert len(curves) == 1 + 2 * 2


def test_report_single_iteration_trace(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"generator": "doppler", "K": 0})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "t")]) == 0
    assert main(["report", str(tmp_path / "t")]) == 0
    lines = (tmp_path / "t" / "curve.csv").read_text().splitlines()
    assert lines[0] == "iteration,n,gamma1,gamma2"
    assert len(lines) == 2


def test_report_names_corrupt_file(al_trace, tmp_path, capsys):
    _, cfg, _ = al_trace
    out = tmp_path / "t"
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    (out / "density_01.csv").write_text("garbage\n")
    assert main(["report", str(out)]) == 1
    assert "density_01.csv" in capsys.readouterr().err
    (tmp_path / "empty").mkdir()
    assert main(["report", str(tmp_path / "empty")]) == 1
    assert main(["report", str(tmp_path / "nope")]) == 2


def test_appendix_mode(tmp_path):
    cfg = write_json(tmp_path / "a.json", {"mode": "appendix", "sizes": [256, 512, 1024, 2048],
                                            "repetitions": 1})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    fits = (tmp_path / "a" / "appendix_fits.csv").read_text().splitlines()
    assert fits[0].startswith("construction,slope")
    assert len(fits) == 4


# density ---------------------------------------------------------------------------------

@pytest.fixture
def doppler_cfg(tmp_path):
    return write_json(tmp_path / "cfg.json", {"generator": "doppler"})


def test_density_of_constant_labels_is_uniform(tmp_path, doppler_cfg):
    x = (np.arange(4096) + 0.5) / 4096
    data = write_dataset(tmp_path / "c.csv", x, np.full_like(x, 2.0))
    assert main(["density", data, "--config", doppler_cfg, "--out", str(tmp_path / "o.csv")]) == 0
    np.testing.assert_allclose(DensityField.from_csv(tmp_path / "o.csv").values, 1.0, rtol=1e-9)


def test_density_of_doppler_data(tmp_path, doppler_cfg):
    rng = np.random.default_rng(0)
    oracle = gen_doppler()
    x = rng.random(2 ** 12)
    data = write_dataset(tmp_path / "d.csv", x, oracle.label(x, rng))
    out = tmp_path / "sub" / "p.csv"
    assert main(["density", data, "--config", doppler_cfg, "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[1] == "x1,v_tilde,sigma_tilde,lfc,density"
    vals = DensityField.from_csv(out).values
    blocks = vals.reshape(8, -1).mean(axis=1)
    assert np.all(np.diff(blocks) < 0)
    again = tmp_path / "p2.csv"
    assert main(["density", data, "--config", doppler_cfg, "--out", str(again)]) == 0
    assert again.read_bytes() == out.read_bytes()


def test_density_dimension_mismatch(tmp_path, capsys):
    cfg = write_json(tmp_path / "h.json", {"generator": "heteroscedastic2d"})
    data = write_dataset(tmp_path / "d.csv", np.linspace(0, 1, 50), np.zeros(50))
    assert main(["density", data, "--config", cfg, "--out", str(tmp_path / "o.csv")]) == 2
    assert "column" in capsys.readouterr().err


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "lpsactive.cli", "run", "--config",
                           str(tmp_path / "absent.json"), "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "cannot read config" in proc.stderr
