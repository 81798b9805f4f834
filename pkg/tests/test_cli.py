import json
import os
import subprocess
import sys

import numpy as np
import pytest

from abmcal import cli
from abmcal.abm import generate_ground_truth, read_config, read_observation
from abmcal.errors import NumericalError
from abmcal.serialization import read_csv, read_json

FAST = {"c_dyn": 1, "c_het": 3, "max_cycles": 1, "n_particles": 6, "n_replications": 4, "n_regimes": 2,
        "n_clusters": 2}


def tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["generate", "tiny", "4", "--out", str(root / "obs")]) == 0
    cfg = root / "cal.json"
    cfg.write_text(json.dumps({"observation": "obs", "framework": FAST, "random_search": {"match_run": "combined"}}))
    runs = {}
    for mode in ("combined", "dynamic", "heterogeneous", "random"):
        assert cli.main(["calibrate", "--config", str(cfg), "--mode", mode, "--out", str(root / mode)]) == 0
        runs[mode] = root / mode
    return root, cfg, runs


def test_generate_round_trip(tmp_path):
    assert cli.main(["generate", "tiny", "2", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["generate", "tiny", "2", "--out", str(tmp_path / "b")]) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
    config, obs = generate_ground_truth("tiny", 2)
    back = read_observation(tmp_path / "a")
    assert np.array_equal(back.price_index, obs.price_index)
    assert read_config(tmp_path / "a" / "ground_truth.json").seed == config.seed
    manifest = read_json(tmp_path / "a" / "manifest.json")
    assert set(manifest["artifacts"]) >= {"config", "observation", "ground_truth"}


def test_generate_unknown_scenario(tmp_path, capsys):
    assert cli.main(["generate", "nope", "1", "--out", str(tmp_path)]) == cli.EXIT_USER
    assert "unknown scenario" in capsys.readouterr().err


def test_calibrate_modes(workspace):
    _, _, runs = workspace
    reports = {m: read_json(p / "report.json") for m, p in runs.items()}
    baselines = {reports[m]["baseline_mape"] for m in ("combined", "dynamic", "heterogeneous")}
    assert len(baselines) == 1
    _, dyn_hist = read_csv(runs["dynamic"] / "history.csv")
    assert {r[1] for r in dyn_hist} == {"dynamic"}
    _, het_hist = read_csv(runs["heterogeneous"] / "history.csv")
    assert {r[1] for r in het_hist} == {"heterogeneous"}
    _, bo = read_csv(runs["dynamic"] / "bo_evals.csv")
    assert bo == []
    for m in ("combined", "dynamic", "heterogeneous"):
        assert reports[m]["final_mape"] <= reports[m]["baseline_mape"]
    combined_budget = reports["combined"]["budget"]["total_simulations"]
    assert reports["random"]["budget"]["random_search_simulations"] == combined_budget


def test_calibrate_flag_overrides_config(workspace, tmp_path):
    root, cfg, _ = workspace
    out = tmp_path / "run"
    assert cli.main(["calibrate", "--config", str(cfg), "--mode", "dynamic", "--out", str(out), "--seed", "9",
                     "--c-dyn", "2"]) == 0
    fw = read_json(out / "config.json")["framework"]
    assert fw["master_seed"] == 9 and fw["c_dyn"] == 2 and fw["c_het"] == 0


def test_calibrate_missing_observation(tmp_path, capsys):
    cfg = tmp_path / "cal.json"
    cfg.write_text(json.dumps({"observation": "missing"}))
    assert cli.main(["calibrate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_USER
    assert "missing observation" in capsys.readouterr().err
    cfg.write_text(json.dumps({}))
    assert cli.main(["calibrate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_USER


def test_calibrate_random_needs_budget(workspace, tmp_path):
    root, _, _ = workspace
    cfg = root / "nobudget.json"
    cfg.write_text(json.dumps({"observation": "obs", "framework": FAST}))
    assert cli.main(["calibrate", "--config", str(cfg), "--mode", "random", "--out", str(tmp_path / "r")]) == 2
    assert cli.main(["calibrate", "--config", str(cfg), "--mode", "random", "--budget", "9",
                     "--out", str(tmp_path / "r")]) == 0
    assert read_json(tmp_path / "r" / "report.json")["budget"]["random_search_simulations"] == 9


def test_invalid_framework_value(workspace, tmp_path):
    _, cfg, _ = workspace
    assert cli.main(["calibrate", "--config", str(cfg), "--c-dyn", "-1", "--out", str(tmp_path / "x")]) == 2


def test_numerical_error_exit_code(workspace, tmp_path, monkeypatch, capsys):
    _, cfg, _ = workspace

    def boom(*a, **k):
        raise NumericalError("singular covariance")

    monkeypatch.setattr(cli.Calibrator, "run", boom)
    assert cli.main(["calibrate", "--config", str(cfg), "--out", str(tmp_path / "x")]) == cli.EXIT_NUMERICAL
    err = capsys.readouterr().err
    assert err.startswith("numerical error in ") and "singular covariance" in err


def test_io_error_exit_code(workspace, tmp_path):
    _, cfg, _ = workspace
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["calibrate", "--config", str(cfg), "--mode", "dynamic",
                     "--out", str(blocker / "sub")]) == cli.EXIT_IO


def test_report(workspace, tmp_path):
    root, _, runs = workspace
    order = [runs[m] for m in ("combined", "dynamic", "heterogeneous")]
    args = ["report", *map(str, order)]
    assert cli.main([*args, "--out", str(tmp_path / "a")]) == 0
    assert cli.main([*args, "--out", str(tmp_path / "b")]) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")

    _, it = read_csv(tmp_path / "a" / "error_by_iteration.csv")
    n_hist = sum(len(read_csv(r / "history.csv")[1]) for r in order)
    assert len(it) == n_hist
    _, k = read_csv(tmp_path / "a" / "error_by_clusters.csv")
    assert len(k) == 3 and all(int(r[0]) == 2 for r in k)
    _, micro = read_csv(tmp_path / "a" / "micro_distribution.csv")
    assert len(micro) == 3 * cli.N_BINS
    for idx in range(3):
        rows = [r for r in micro if int(r[0]) == idx]
        assert sum(int(r[5]) for r in rows) == 100
        assert sum(int(r[6]) for r in rows) == 100
    _, scatter = read_csv(tmp_path / "a" / "cluster_scatter.csv")
    assert len(scatter) == 3 * 100


def test_report_incomplete_run(workspace, tmp_path):
    root, _, _ = workspace
    assert cli.main(["report", str(root / "obs"), "--out", str(tmp_path)]) == cli.EXIT_USER
    assert cli.main(["report", str(tmp_path / "none"), "--out", str(tmp_path)]) == cli.EXIT_USER


def test_run_directory_reproducible(workspace, tmp_path):
    _, cfg, runs = workspace
    assert cli.main(["calibrate", "--config", str(cfg), "--mode", "combined", "--out", str(tmp_path / "c")]) == 0
    assert tree(tmp_path / "c") == tree(runs["combined"])


def test_run_directory_independent_of_threads(workspace, tmp_path):
    _, cfg, runs = workspace
    for threads in ("1", "2"):
        env = dict(os.environ, ABM_CAL_THREADS=threads, NUMBA_NUM_THREADS="2")
        out = tmp_path / threads
        proc = subprocess.run([sys.executable, "-m", "abmcal.cli", "calibrate", "--config", str(cfg),
                               "--mode", "dynamic", "--out", str(out)], env=env, capture_output=True, timeout=600)
        assert proc.returncode == 0, proc.stderr
        assert tree(out) == tree(runs["dynamic"])
