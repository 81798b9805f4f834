"""Command-line entry point: ``abm-cal generate|calibrate|report|experiment``.

Exit codes: 0 success, 2 user or configuration error, 3 I/O error, 4
numerical error. Flags override values from the ``--config`` file.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import experiments
from .abm import SCENARIOS, generate_ground_truth, read_agents_csv, read_observation, write_config, write_observation
from .errors import CalibrationError, ConfigurationError, DomainError, NumericalError
from .framework import (Calibrator, FrameworkConfig, save_calibration_run, save_random_run, write_manifest)
from .serialization import digest, read_csv, read_json, write_csv, write_json

EXIT_OK = 0
EXIT_USER = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4
MODES = ("combined", "dynamic", "heterogeneous", "random")
N_BINS = 20


class UserError(Exception):
    pass


def _module_of(exc: BaseException) -> str:
    tb = traceback.extract_tb(exc.__traceback__)
    return Path(tb[-1].filename).stem if tb else "abmcal"


# --------------------------------------------------------------------------
# generate
# --------------------------------------------------------------------------


def cmd_generate(scenario: str, seed: int, out_dir) -> int:
    if scenario not in SCENARIOS:
        raise UserError(f"unknown scenario {scenario!r}; choose from {', '.join(sorted(SCENARIOS))}")
    config, obs = generate_ground_truth(scenario, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", {"command": "generate", "scenario": scenario, "seed": int(seed)})
    files = {"config": "config.json"}
    files.update(write_observation(out, obs))
    write_config(out / "ground_truth.json", config)
    files["ground_truth"] = "ground_truth.json"
    write_manifest(out, f"generate {scenario} {seed}", files, seed)
    return EXIT_OK


# --------------------------------------------------------------------------
# calibrate
# --------------------------------------------------------------------------


def load_calibration_config(path) -> tuple[dict, Path]:
    p = Path(path)
    if not p.is_file():
        raise UserError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UserError(f"config file is not valid JSON: {e}") from None
    if "observation" not in doc:
        raise UserError("config must name an 'observation' run directory")
    return doc, p.parent


def resolve_framework(doc: dict, args, base: Path = Path(".")) -> tuple[FrameworkConfig, int | None]:
    """Merge config-file values and flags (flags win).

    The random-search budget comes from ``--budget``, else
    ``random_search.budget``, else the total simulation count recorded in the
    report of the run named by ``random_search.match_run``.
    """
    fw_doc = dict(doc.get("framework", {}))
    overrides = {"master_seed": args.seed, "c_dyn": args.c_dyn, "c_het": args.c_het,
                 "n_clusters": args.clusters, "n_regimes": args.regimes}
    for k, v in overrides.items():
        if v is not None:
            fw_doc[k] = v
    mode = args.mode
    fw = FrameworkConfig.from_json(fw_doc)
    if mode == "dynamic":
        fw.c_het = 0
    elif mode == "heterogeneous":
        fw.c_dyn = 0
    fw.validate()
    if mode != "random":
        return fw, None
    rs = doc.get("random_search", {})
    budget = args.budget if args.budget is not None else rs.get("budget")
    if budget is None and rs.get("match_run"):
        rpath = base / rs["match_run"] / "report.json"
        if not rpath.is_file():
            raise UserError(f"match_run has no report: {rpath}")
        budget = int(read_json(rpath)["budget"]["total_simulations"])
    if budget is not None and int(budget) < 1:
        raise UserError("budget must be a positive number of simulations")
    return fw, budget


def cmd_calibrate(config_path, mode: str, out_dir, args=None) -> int:
    if mode not in MODES:
        raise UserError(f"unknown mode {mode!r}")
    if args is None:
        args = argparse.Namespace(seed=None, c_dyn=None, c_het=None, clusters=None, regimes=None, budget=None)
    args.mode = mode
    doc, base = load_calibration_config(config_path)
    obs_dir = (base / doc["observation"]).resolve()
    if not (obs_dir / "observation.csv").is_file():
        raise UserError(f"missing observation: {obs_dir / 'observation.csv'}")
    obs = read_observation(obs_dir)
    fw, budget = resolve_framework(doc, args, base)
    config_doc = {"command": "calibrate", "mode": mode, "observation": doc["observation"],
                  "observation_digest": digest(obs_dir / "observation.csv"),
                  "agents_digest": digest(obs_dir / "agents.csv"), "framework": fw.to_json(),
                  "random_search": {"budget": budget}}
    cal = Calibrator(obs, fw)
    if mode == "random":
        if budget is None:
            raise UserError("random mode needs --budget, random_search.budget or random_search.match_run")
        state0 = cal.initial_state()
        n_evals = max(1, int(budget) // fw.bo_replications)
        result = cal.random_search(n_evals)
        save_random_run(out_dir, cal, result, state0.baseline_mape, config_doc)
    else:
        state = cal.run()
        save_calibration_run(out_dir, cal, state, config_doc, mode)
    return EXIT_OK


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


def _load_run(path: Path) -> dict:
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise UserError(f"incomplete run directory (no manifest): {path}")
    manifest = read_json(mpath)
    for name, rel in manifest.get("artifacts", {}).items():
        if not (path / rel).is_file():
            raise UserError(f"incomplete run directory: {path} lacks {rel}")
    needed = ("history", "report", "simulated_agents", "latents")
    for name in needed:
        if name not in manifest.get("artifacts", {}):
            raise UserError(f"run directory {path} has no {name} artifact")
    return manifest


def cmd_report(run_dirs, out_path) -> int:
    runs = [Path(r) for r in run_dirs]
    if not runs:
        raise UserError("no run directories given")
    manifests = [_load_run(r) for r in runs]
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)

    rows_iter, rows_k, rows_micro, rows_scatter = [], [], [], []
    for idx, (run, man) in enumerate(zip(runs, manifests)):
        rid = man["run_id"]
        art = man["artifacts"]
        _, hist = read_csv(run / art["history"])
        for h in hist:
            rows_iter.append([idx, rid, h[0], h[1], h[2], int(h[4]), float(h[3])])
        report = read_json(run / art["report"])
        rows_k.append([report["n_clusters"], idx, rid, report["mode"], report["final_mape"]])

        sim = np.array([a.wealth for a in read_agents_csv(run / art["simulated_agents"])])
        obs_key = "observed_agents" if "observed_agents" in art else None
        if obs_key is not None:
            obs_w = np.array([a.wealth for a in read_agents_csv(run / art[obs_key])])
        else:
            obs_w = sim
        lo = float(min(obs_w.min(), sim.min()))
        hi = float(max(obs_w.max(), sim.max()))
        if hi <= lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, N_BINS + 1)
        oc, _ = np.histogram(obs_w, edges)
        sc, _ = np.histogram(sim, edges)
        for b in range(N_BINS):
            rows_micro.append([idx, rid, b, edges[b], edges[b + 1], int(oc[b]), int(sc[b])])

        header, lat = read_csv(run / art["latents"])
        for r in lat:
            rows_scatter.append([idx, rid, int(r[0]), float(r[1]), float(r[2]) if len(r) > 3 else 0.0, int(r[-1])])

    write_csv(out / "error_by_iteration.csv",
              ("run_index", "run_id", "cycle", "phase", "iteration", "cumulative_simulations", "best_mape"), rows_iter)
    rows_k.sort(key=lambda r: (r[0], r[1]))
    write_csv(out / "error_by_clusters.csv", ("n_clusters", "run_index", "run_id", "mode", "final_mape"), rows_k)
    write_csv(out / "micro_distribution.csv",
              ("run_index", "run_id", "bin", "bin_lo", "bin_hi", "observed_count", "simulated_count"), rows_micro)
    write_csv(out / "cluster_scatter.csv", ("run_index", "run_id", "agent_id", "latent_x", "latent_y", "label"),
              rows_scatter)
    return EXIT_OK


# --------------------------------------------------------------------------
# experiment
# --------------------------------------------------------------------------


def cmd_experiment(out_dir, seeds=None, quick: bool = False) -> int:
    """Run the shipped experiments and write their raw results as JSON."""
    settings = experiments.QUICK if quick else experiments.ExperimentSettings()
    seeds = tuple(settings.seeds if seeds is None else seeds)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for name, fn in (("ordering", experiments.ordering), ("recovery", experiments.heterogeneous_recovery),
                     ("regimes", experiments.regime_detection), ("clusters", experiments.cluster_recovery),
                     ("cluster_sweep", experiments.cluster_sweep)):
        results[name] = [fn(s, settings) for s in seeds]
        print(f"{name}: done", flush=True)
    write_json(out / "experiments.json", results)
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="abm-cal", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a ground-truth observation run")
    g.add_argument("scenario")
    g.add_argument("seed", type=int)
    g.add_argument("--out", required=True)

    c = sub.add_parser("calibrate", help="calibrate against an observation run")
    c.add_argument("--config", required=True)
    c.add_argument("--mode", default="combined", choices=MODES)
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int)
    c.add_argument("--c-dyn", type=int)
    c.add_argument("--c-het", type=int)
    c.add_argument("--budget", type=int, help="random mode: number of simulations")
    c.add_argument("--clusters", type=int)
    c.add_argument("--regimes", type=int)

    r = sub.add_parser("report", help="emit plot-ready CSVs from run directories")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out", required=True)

    e = sub.add_parser("experiment", help="run the shipped experiments")
    e.add_argument("--out", required=True)
    e.add_argument("--seeds", type=int, nargs="*")
    e.add_argument("--quick", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            return cmd_generate(args.scenario, args.seed, args.out)
        if args.command == "calibrate":
            return cmd_calibrate(args.config, args.mode, args.out, args)
        if args.command == "report":
            return cmd_report(args.runs, args.out)
        return cmd_experiment(args.out, args.seeds, args.quick)
    except (UserError, ConfigurationError, DomainError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER
    except (NumericalError, CalibrationError, FloatingPointError) as e:
        print(f"numerical error in {_module_of(e)}: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
