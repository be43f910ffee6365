"""Exercise the ebcbf command line end to end on small configurations"""
import json
import os
from glob import glob
from unittest import mock

import numpy as np
import pytest
from traitlets.config import Config

from ebcbf import app
from ebcbf.app import CONFIGURABLES, EbcbfApp, RunFilter, config_echo, run_command
from ebcbf.gp import Dataset, read_commented_csv
from ebcbf.sim import MassSpring, Simulation

from .conftest import testing_dir

SMALL_CONFIG = {
    "Simulation": {"t_stop": 3.0, "dt": 0.05, "keep_probability": 0.7, "seed": 1},
    "HyperparameterOptimizer": {"iterations": 5, "initial_noise_std": 0.05},
    "StateGrid": {"points": [9, 9]},
    "RunFilter": {"horizon": 1.0},
    "MonteCarlo": {"n_samples": 4, "horizon": 0.5, "dt": 0.05},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "ebcbf_config.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return str(path)


def run(config_file, out, *args):
    return run_command([args[0], f"--config={config_file}", f"--output-dir={out}", *args[1:]])


@pytest.fixture
def fitted(tmp_path, config_file):
    out = str(tmp_path / "out")
    assert run(config_file, out, "gen-data") == 0
    assert run(config_file, out, "fit") == 0
    return out


def test_help():
    assert run_command(["--help"]) == 0


def test_subcommand_required():
    assert run_command([]) == 1


def test_gen_data(tmp_path, config_file):
    out = tmp_path / "out"
    assert run(config_file, str(out), "gen-data") == 0
    comments, header, rows = read_commented_csv(out / "dataset.csv")
    assert header == ["t", "q", "p", "u"]
    assert comments[0].startswith("config: ")
    assert comments[1].startswith("input-hash: ")
    assert 0 < len(rows) <= 61
    echo = json.loads((out / "config.json").read_text())
    assert echo["Simulation"]["t_stop"] == 3.0


def test_command_line_overrides_config_file(tmp_path, config_file):
    out = tmp_path / "out"
    assert run(config_file, str(out), "gen-data", "--Simulation.t_stop=1.0") == 0
    data = Dataset.from_csv(out / "dataset.csv")
    assert data.times[-1] <= 1.0


def test_config_echo_reproduces_run(tmp_path, config_file):
    first, second = tmp_path / "first", tmp_path / "second"
    assert run(config_file, str(first), "gen-data") == 0
    assert run(str(first / "config.json"), str(second), "gen-data") == 0
    assert (first / "dataset.csv").read_text() == (second / "dataset.csv").read_text()


def test_fit(fitted):
    doc = json.loads(open(os.path.join(fitted, "model.json")).read())
    assert doc["dataset"]["path"] == "dataset.csv"
    assert doc["order"] == 2
    assert doc["system"] == {"stiffness": 1.0, "mass": 1.0, "damping": 0.0}
    _, header, rows = read_commented_csv(os.path.join(fitted, "nlml_trace.csv"))
    assert header == ["iteration", "nlml"]
    assert [int(r[0]) for r in rows] == list(range(6))


def test_fit_event(tmp_path, config_file):
    out = str(tmp_path / "out")
    events = tmp_path / "events.jsonl"
    assert run(config_file, out, "gen-data") == 0
    assert run(config_file, out, "fit", f"--EventLog.events_file={events}") == 0
    capsule = json.loads(events.read_text())
    assert capsule["schema"] == "ebcbf/fit"
    assert capsule["iterations"] == 5
    assert capsule["order"] == 2
    assert len(capsule["lengthscales"]) == 2


def test_fit_empty_dataset(tmp_path, config_file):
    out = tmp_path / "out"
    out.mkdir()
    (out / "dataset.csv").write_text("t,q,p,u\n")
    assert run(config_file, str(out), "fit") == 1
    assert not (out / "model.json").exists()


def test_fit_missing_dataset(tmp_path, config_file):
    assert run(config_file, str(tmp_path / "nothing"), "fit") == 1


def test_eval_posterior_needs_model(tmp_path, config_file):
    assert run(config_file, str(tmp_path / "nothing"), "eval-posterior") == 1


def test_invalid_config_value(tmp_path, config_file):
    assert run(config_file, str(tmp_path), "gen-data", "--Simulation.dt=-1") == 1


def test_linear_algebra_failure_is_numerical(tmp_path, config_file):
    failure = np.linalg.LinAlgError("Matrix is not positive definite")
    with mock.patch.object(app, "generate_dataset", side_effect=failure):
        assert run(config_file, str(tmp_path), "gen-data") == 2


def test_eval_posterior(fitted, config_file):
    assert run(config_file, fitted, "eval-posterior") == 0
    _, header, rows = read_commented_csv(os.path.join(fitted, "posterior_grid.csv"))
    assert header == [
        "q", "p", "mu_f1", "mu_f2", "sd_f1", "sd_f2", "mu_H", "sd_H",
        "mu_T", "sd_T", "mu_V", "sd_V", "h_eb", "true_margin",
    ]
    assert len(rows) == 81
    grid = np.array(rows)
    assert np.all(grid[:, 4:6] >= 0)
    np.testing.assert_allclose(grid[:, 8] + grid[:, 10], grid[:, 6], atol=1e-9)


def test_run_filter(fitted, config_file):
    assert run(config_file, fitted, "run-filter") == 0
    for name in ("trajectory_filtered.csv", "trajectory_nominal.csv"):
        path = os.path.join(fitted, name)
        with open(path) as f:
            lines = [line for line in f if not line.startswith("#")]
        assert lines[0].strip() == "t,q,p,u,h_eb,event"
        assert len(lines) == 1 + 21


def test_mc_verify_is_deterministic(fitted, config_file, tmp_path):
    metrics_file = str(tmp_path / "metrics.prom")
    assert run(config_file, fitted, "mc-verify", f"--metrics-file={metrics_file}") == 0
    with open(os.path.join(fitted, "mc_summary.json")) as f:
        first = json.load(f)
    assert run(config_file, fitted, "mc-verify", "--MonteCarlo.workers=2") == 0
    with open(os.path.join(fitted, "mc_summary.json")) as f:
        second = json.load(f)
    for key in ("safe_fraction", "wilson_lo", "wilson_hi", "safe_count", "credible_fraction"):
        assert first[key] == second[key]
    assert first["n_samples"] == 4
    assert first["wilson_lo"] <= first["safe_fraction"] <= first["wilson_hi"]
    with open(metrics_file) as f:
        assert "ebcbf_filter_steps_total" in f.read()


def test_config_echo_skips_callables():
    echo = config_echo([Simulation(t_stop=2.0), MassSpring()])
    assert echo["Simulation"]["t_stop"] == 2.0
    assert set(echo) == {"Simulation", "MassSpring"}
    assert all(not callable(v) for values in echo.values() for v in values.values())


def test_subcommands_listed():
    assert set(EbcbfApp.subcommands) == {
        "gen-data", "fit", "eval-posterior", "run-filter", "mc-verify"
    }


@pytest.mark.parametrize(
    "config_path", sorted(glob(os.path.join(testing_dir, "*", "ebcbf_config.json")))
)
def test_scenario_configs(config_path):
    """Every shipped scenario only sets known traits to valid values"""
    with open(config_path) as f:
        doc = json.load(f)
    classes = {cls.__name__: cls for cls in CONFIGURABLES + [RunFilter]}
    assert set(doc) <= set(classes)
    for section, values in doc.items():
        cls = classes[section]
        assert set(values) <= set(cls.class_trait_names(config=True))
        if cls is not RunFilter:
            # raises TraitError on an invalid value
            cls(config=Config(doc))
