import json
import math
from dataclasses import replace
from importlib import resources

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abmcal.abm import (MarketParams, ObservationSeries, Population, SimulationConfig, generate_ground_truth,
                        read_agents_csv, read_config, read_observation, read_series_csv, scenario_config, simulate,
                        simulate_many, write_agents_csv, write_config, write_observation, write_output_csv)
from abmcal.errors import ConfigurationError
from abmcal.serialization import dumps
from conftest import make_config, run_python


def test_zero_participation_freezes_market():
    cfg = make_config(dyn=[MarketParams(0.0, 0.5, 0.5)])
    out = simulate(cfg)
    assert np.all(out.price_index == cfg.initial_price)
    assert np.all(out.transaction_volume == 0)


def test_same_seed_bit_identical(tiny_config):
    assert simulate(tiny_config) == simulate(tiny_config)


def test_different_seed_differs(tiny_config):
    other = replace(tiny_config, seed=tiny_config.seed + 1)
    assert not np.array_equal(simulate(tiny_config).price_index, simulate(other).price_index)


def test_single_buyer_price_update():
    # one renter who always participates and always bids; nobody can sell
    cfg = make_config(n_agents=1, n_ticks=3, dyn=[MarketParams(1.0, 0.1, 0.1)], het=((1.0, 1.0),),
                      wealth=[1e6], owns=[False])
    out = simulate(cfg)
    expected = 40.0 * (1 + 0.1 * math.tanh(1.0))
    assert out.price_index[0] == 40.0
    assert out.price_index[1] == pytest.approx(expected, rel=1e-15)
    assert out.price_index[1] == pytest.approx(43.0463766238231, abs=1e-9)
    assert np.all(out.transaction_volume == 0)


def test_single_seller_price_update():
    cfg = make_config(n_agents=1, n_ticks=2, dyn=[MarketParams(1.0, 0.1, 0.3)], het=((1.0, 0.0),),
                      wealth=[1.0], owns=[True])
    out = simulate(cfg)
    assert out.price_index[1] == pytest.approx(40.0 * (1 - 0.3 * math.tanh(1.0)), rel=1e-15)


def _random_config(seed, n_agents, n_ticks, n_regimes, rich=False):
    g = np.random.default_rng(seed)
    cuts = np.sort(g.choice(np.arange(1, n_ticks), n_regimes - 1, replace=False)) if n_regimes > 1 else []
    bounds = [0, *cuts, n_ticks]
    segs = [(int(bounds[i]), int(bounds[i + 1]), i) for i in range(n_regimes)]
    dyn = [MarketParams(*g.uniform(0, 1, 3)) for _ in range(n_regimes)]
    het = [tuple(g.uniform(0, 1, 2)) for _ in range(2)]
    wealth = np.full(n_agents, 1e9) if rich else None
    return make_config(n_agents=n_agents, n_ticks=n_ticks, segments=segs, dyn=dyn, het=het, seed=seed,
                       wealth=wealth, cluster=g.integers(0, 2, n_agents), pop_seed=seed)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32), n_agents=st.integers(1, 40), n_ticks=st.integers(2, 40), n_regimes=st.integers(1, 3))
def test_conservation_and_nonnegative_wealth(seed, n_agents, n_ticks, n_regimes):
    n_regimes = min(n_regimes, n_ticks)
    cfg = _random_config(seed, n_agents, n_ticks, n_regimes)
    out = simulate(cfg)
    owned0 = int(cfg.population.owns_house.sum())
    assert sum(a.owns_house for a in out.final_agents) == owned0
    assert all(a.wealth >= 0 for a in out.final_agents)
    assert np.all(out.price_index > 0)
    assert np.all(out.transaction_volume <= min(owned0, n_agents - owned0))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32), n_ticks=st.integers(4, 40))
def test_regime_locality(seed, n_ticks):
    cfg = _random_config(seed, 15, n_ticks, 2)
    start = cfg.regime_schedule.segments[1][0]
    changed = list(cfg.dynamic_params_per_regime)
    changed[1] = MarketParams(0.99, 0.01, 0.77)
    a = simulate(cfg).price_index
    b = simulate(replace(cfg, dynamic_params_per_regime=changed)).price_index
    assert np.array_equal(a[:start + 1], b[:start + 1])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32), bump=st.floats(0.0, 0.5))
def test_monotone_in_price_increase_rate(seed, bump):
    # affordability never binds here, so order flow does not depend on the price path
    cfg = _random_config(seed, 25, 30, 1, rich=True)
    m = cfg.dynamic_params_per_regime[0]
    hi = MarketParams(m.participation_rate, min(1.0, m.price_increase_rate + bump), m.price_decrease_rate)
    a = simulate(cfg).price_index
    b = simulate(replace(cfg, dynamic_params_per_regime=[hi])).price_index
    assert np.all(b >= a)


def test_simulate_many_matches_simulate():
    cfg = make_config(n_agents=30, n_ticks=25, segments=[(0, 10, 0), (10, 25, 1)],
                      dyn=[MarketParams(0.5, 0.2, 0.1), MarketParams(0.7, 0.1, 0.3)],
                      het=((0.7, 0.4), (0.3, 0.9)), cluster=np.arange(30) % 2)
    seeds = np.array([5, 6, 7], dtype=np.uint64)
    dyn = np.repeat(cfg.dynamic_array()[None], 3, axis=0)
    het = np.repeat(cfg.het_array()[None], 3, axis=0)
    prices, vols = simulate_many(cfg.regime_schedule.labels, cfg.population, cfg.initial_price, dyn, het, seeds)
    for i, s in enumerate(seeds):
        out = simulate(replace(cfg, seed=int(s)))
        assert np.array_equal(prices[i], out.price_index)
        assert np.array_equal(vols[i], out.transaction_volume)


@pytest.mark.parametrize("field,kw", [
    ("n_agents", dict(n_agents=0)),
    ("n_ticks", dict(n_ticks=0)),
    ("initial_price", dict(initial_price=-1.0)),
    ("seed", dict(seed=-1)),
])
def test_validate_names_field(tiny_config, field, kw):
    with pytest.raises(ConfigurationError) as e:
        replace(tiny_config, **kw).validate()
    assert e.value.field.startswith(field)


def test_validate_parameter_range(tiny_config):
    with pytest.raises(ConfigurationError, match="price_increase_rate"):
        replace(tiny_config, dynamic_params_per_regime=[MarketParams(0.5, 1.5, 0.5)]).validate()
    with pytest.raises(ConfigurationError, match="willing_to_pay"):
        replace(tiny_config, het_params_per_cluster=[(1.2, 0.5)]).validate()


def test_validate_schedule_mismatch(tiny_config):
    with pytest.raises(ConfigurationError) as e:
        replace(tiny_config, n_ticks=tiny_config.n_ticks + 1).validate()
    assert e.value.field == "regime_schedule"


def test_ground_truth_deterministic():
    a_cfg, a = generate_ground_truth("default", 7)
    b_cfg, b = generate_ground_truth("default", 7)
    assert np.array_equal(a.price_index, b.price_index)
    assert a.agent_snapshot == b.agent_snapshot
    assert a.n_ticks == 300
    assert a_cfg.regime_schedule.n_regimes == 3
    assert a_cfg.n_agents == 500


def test_default_scenario_cluster_willing_to_pay():
    # published cluster-wise optimum 0.9 / 0.3
    cfg = scenario_config("default", 0)
    assert sorted(w for w, _ in cfg.het_params_per_cluster) == [0.3, 0.9]
    pop = cfg.population
    assert set(np.unique(pop.cluster_id)) == {0, 1}


def test_ground_truth_reproduces_itself():
    cfg, obs = generate_ground_truth("tiny", 2)
    assert np.array_equal(simulate(cfg).price_index, obs.price_index)
    # the snapshot hides cluster identity
    assert all(a.cluster_id is None for a in obs.agent_snapshot)


def test_io_round_trip(tmp_path):
    cfg, obs = generate_ground_truth("tiny", 4)
    write_config(tmp_path / "cfg.json", cfg)
    back = read_config(tmp_path / "cfg.json")
    assert simulate(back) == simulate(cfg)
    write_observation(tmp_path, obs)
    o2 = read_observation(tmp_path)
    assert np.array_equal(o2.price_index, obs.price_index)
    assert np.array_equal(o2.transaction_volume, obs.transaction_volume)
    assert o2.agent_snapshot == obs.agent_snapshot
    assert o2.final_agents == obs.final_agents
    out = simulate(cfg)
    write_output_csv(tmp_path / "s.csv", out.price_index, out.transaction_volume)
    p, v = read_series_csv(tmp_path / "s.csv")
    assert np.array_equal(p, out.price_index) and np.array_equal(v, out.transaction_volume)
    write_agents_csv(tmp_path / "a.csv", out.final_agents)
    assert read_agents_csv(tmp_path / "a.csv") == [replace(a, willing_to_pay=0.5, purchase_rate=0.5)
                                                   for a in out.final_agents]


def test_config_matches_schema():
    schema = json.loads(resources.files("abmcal").joinpath("schemas/simulation_config.schema.json").read_text())
    doc = json.loads(dumps(scenario_config("default", 1).to_json()))
    jsonschema.validate(doc, schema)
    bad = dict(doc, n_agents=0)
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(bad, schema)


def test_shipped_schema_copy_in_docs():
    from pathlib import Path
    docs = Path(__file__).resolve().parents[1] / "docs" / "simulation_config.schema.json"
    pkg = resources.files("abmcal").joinpath("schemas/simulation_config.schema.json").read_text()
    assert docs.read_text() == pkg


_SIM_DIGEST = """
import hashlib, numpy as np
from abmcal.abm import generate_ground_truth, simulate_many
cfg, obs = generate_ground_truth("tiny", 3)
dyn = np.repeat(cfg.dynamic_array()[None], 6, axis=0)
het = np.repeat(cfg.het_array()[None], 6, axis=0)
p, v = simulate_many(cfg.regime_schedule.labels, cfg.population, cfg.initial_price, dyn, het,
                     np.arange(6, dtype=np.uint64))
h = hashlib.sha256(obs.price_index.tobytes() + p.tobytes() + v.tobytes()).hexdigest()
print(h)
"""


def test_numpy_fallback_bit_identical():
    jit = run_python(_SIM_DIGEST, ABM_CAL_DISABLE_JIT="0")
    ref = run_python(_SIM_DIGEST, ABM_CAL_DISABLE_JIT="1")
    assert jit == ref


def test_thread_count_does_not_change_results():
    one = run_python(_SIM_DIGEST, NUMBA_NUM_THREADS=2, ABM_CAL_THREADS=1)
    two = run_python(_SIM_DIGEST, NUMBA_NUM_THREADS=2, ABM_CAL_THREADS=2)
    assert one == two
