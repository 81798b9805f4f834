import os
import subprocess
import sys

import numpy as np
import pytest

from abmcal.abm import MarketParams, Population, SimulationConfig
from abmcal.regimes import RegimeSchedule


def make_config(n_agents=20, n_ticks=30, segments=None, dyn=None, het=((0.8, 0.6),), seed=11,
                wealth=None, owns=None, cluster=None, initial_price=40.0, pop_seed=3):
    g = np.random.default_rng(pop_seed)
    wealth = g.lognormal(np.log(100), 0.5, n_agents) if wealth is None else np.asarray(wealth, dtype=float)
    owns = g.random(n_agents) < 0.5 if owns is None else np.asarray(owns, dtype=bool)
    income = g.uniform(1, 5, n_agents)
    cluster = np.zeros(n_agents, dtype=int) if cluster is None else np.asarray(cluster)
    segments = segments or [(0, n_ticks, 0)]
    sched = RegimeSchedule.from_segments(segments)
    dyn = dyn or [MarketParams(0.6, 0.2, 0.2)] * sched.n_regimes
    return SimulationConfig(n_agents=n_agents, n_ticks=n_ticks, initial_price=initial_price, regime_schedule=sched,
                            dynamic_params_per_regime=list(dyn), het_params_per_cluster=list(het), seed=seed,
                            population=Population(wealth, income, owns, cluster))


def run_python(code, **env):
    """Run ``code`` in a fresh interpreter with extra environment variables; return stdout."""
    full = dict(os.environ)
    full.update({k: str(v) for k, v in env.items()})
    proc = subprocess.run([sys.executable, "-c", code], env=full, capture_output=True, text=True, timeout=600)
    if proc.returncode != 0:
        raise AssertionError(proc.stderr)
    return proc.stdout.strip().splitlines()[-1]


@pytest.fixture
def tiny_config():
    return make_config()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.LINES):
            terminalreporter.write_line(line)
