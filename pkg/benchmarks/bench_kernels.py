"""Time the numba kernels against their pure-numpy fallbacks.

The backend is fixed at import time, so each backend runs in its own
subprocess (``ABM_CAL_DISABLE_JIT`` set or unset). Both must produce the
same output digest.

    python3 benchmarks/bench_kernels.py [--scenario tiny] [--sims 8] [--repeat 3]
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import subprocess
import sys
import time

import numpy as np


def worker(scenario: str, n_sims: int, repeat: int) -> dict:
    from abmcal._backend import USE_NUMBA
    from abmcal.abm import scenario_config, simulate_many
    from abmcal.regimes import HmmModel, log_likelihood

    cfg = scenario_config(scenario, 0)
    pop = cfg.resolved_population()
    dyn = np.repeat(cfg.dynamic_array()[None], n_sims, axis=0)
    het = np.repeat(cfg.het_array()[None], n_sims, axis=0)
    seeds = np.arange(1, n_sims + 1, dtype=np.uint64)

    def run_sim():
        return simulate_many(cfg.regime_schedule.labels, pop, cfg.initial_price, dyn, het, seeds)

    rng = np.random.default_rng(0)
    x = rng.normal(0.0, 0.01, 2000)
    model = HmmModel(np.full(3, 1 / 3), np.full((3, 3), 1 / 3), np.array([-0.01, 0.0, 0.01]),
                     np.array([0.01, 0.02, 0.03]))

    def run_hmm():
        return log_likelihood(model, x)

    out = {"backend": "numba" if USE_NUMBA else "numpy"}
    h = hashlib.sha256()
    for name, fn in (("simulate_many", run_sim), ("hmm_forward", run_hmm)):
        t0 = time.perf_counter()
        res = fn()
        out[f"{name}_first_s"] = time.perf_counter() - t0
        times = []
        for _ in range(repeat):
            t0 = time.perf_counter()
            res = fn()
            times.append(time.perf_counter() - t0)
        out[f"{name}_s"] = min(times)
        for a in (res if isinstance(res, tuple) else (res,)):
            h.update(np.ascontiguousarray(a).tobytes())
    out["digest"] = h.hexdigest()
    return out


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--scenario", default="tiny")
    p.add_argument("--sims", type=int, default=8)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = p.parse_args(argv)
    if args.worker:
        print(json.dumps(worker(args.scenario, args.sims, args.repeat)))
        return 0

    results = []
    for disable in ("0", "1"):
        env = dict(os.environ, ABM_CAL_DISABLE_JIT=disable)
        cmd = [sys.executable, __file__, "--worker", "--scenario", args.scenario, "--sims", str(args.sims),
               "--repeat", str(args.repeat)]
        proc = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
        results.append(json.loads(proc.stdout.strip().splitlines()[-1]))
    jit, ref = results
    print(f"{'kernel':<16}{'numba (s)':>12}{'numpy (s)':>12}{'speedup':>10}")
    for name in ("simulate_many", "hmm_forward"):
        a, b = jit[f"{name}_s"], ref[f"{name}_s"]
        print(f"{name:<16}{a:>12.4f}{b:>12.4f}{b / a:>10.1f}")
    same = jit["digest"] == ref["digest"]
    print(f"outputs identical: {same}")
    return 0 if same else 1


if __name__ == "__main__":
    sys.exit(main())
