"""A small, seedable housing-market agent-based model.

Agents hold wealth and may own one house. Each tick every agent participates
with the regime's participation rate; participating renters who can afford
the current price bid with their purchase rate, participating owners ask with
the complementary probability. Normalized excess demand moves the price
through a saturating ``tanh`` response, and matched orders change hands at the
pre-update price.

The model exposes five calibration parameters: three regime-wise market
parameters and two cluster-wise agent parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import ConfigurationError
from .regimes import RegimeSchedule
from .seeding import derive_seed, rng as make_rng
from .serialization import read_csv, read_json, write_csv, write_json

DYNAMIC_PARAMETERS = ("participation_rate", "price_increase_rate", "price_decrease_rate")
HETEROGENEOUS_PARAMETERS = ("willing_to_pay", "purchase_rate")
MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class MarketParams:
    participation_rate: float = 0.5
    price_increase_rate: float = 0.5
    price_decrease_rate: float = 0.5

    def as_array(self) -> np.ndarray:
        return np.array([self.participation_rate, self.price_increase_rate, self.price_decrease_rate])

    @classmethod
    def from_array(cls, a) -> "MarketParams":
        return cls(*(float(v) for v in a))


@dataclass
class AgentState:
    id: int
    wealth: float
    income: float
    owns_house: bool
    cluster_id: int | None = None
    willing_to_pay: float = 0.5
    purchase_rate: float = 0.5


@dataclass(eq=False)
class Population:
    """Column-oriented agent table used by the simulator."""

    wealth: np.ndarray
    income: np.ndarray
    owns_house: np.ndarray
    cluster_id: np.ndarray | None = None

    def __post_init__(self):
        self.wealth = np.asarray(self.wealth, dtype=np.float64)
        self.income = np.asarray(self.income, dtype=np.float64)
        self.owns_house = np.asarray(self.owns_house, dtype=np.bool_)
        if self.cluster_id is not None:
            self.cluster_id = np.asarray(self.cluster_id, dtype=np.int64)

    @property
    def n_agents(self) -> int:
        return int(self.wealth.size)

    def with_clusters(self, labels) -> "Population":
        return Population(self.wealth, self.income, self.owns_house, np.asarray(labels, dtype=np.int64))

    def to_agents(self, wtp=None, q=None) -> list[AgentState]:
        out = []
        for i in range(self.n_agents):
            out.append(AgentState(
                id=i,
                wealth=float(self.wealth[i]),
                income=float(self.income[i]),
                owns_house=bool(self.owns_house[i]),
                cluster_id=None if self.cluster_id is None else int(self.cluster_id[i]),
                willing_to_pay=0.5 if wtp is None else float(wtp[i]),
                purchase_rate=0.5 if q is None else float(q[i]),
            ))
        return out

    @classmethod
    def from_agents(cls, agents: Sequence[AgentState]) -> "Population":
        cids = [a.cluster_id for a in agents]
        return cls(
            [a.wealth for a in agents],
            [a.income for a in agents],
            [a.owns_house for a in agents],
            None if any(c is None for c in cids) else cids,
        )

    def to_json(self) -> dict:
        d = {"wealth": self.wealth, "income": self.income, "owns_house": self.owns_house}
        if self.cluster_id is not None:
            d["cluster_id"] = self.cluster_id
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Population":
        return cls(d["wealth"], d["income"], d["owns_house"], d.get("cluster_id"))


@dataclass(frozen=True)
class PopulationSpec:
    """Recipe for a synthetic population with latent agent clusters.

    Wealth is log-normal around ``wealth_median`` scaled per cluster; income
    is uniform; ownership is Bernoulli per cluster.
    """

    n_agents: int = 500
    cluster_shares: tuple[float, ...] = (0.5, 0.5)
    wealth_median: float = 100.0
    wealth_sigma: float = 0.5
    wealth_scales: tuple[float, ...] = (0.35, 2.8)
    ownership_probs: tuple[float, ...] = (0.1, 0.9)
    income_range: tuple[float, float] = (1.0, 5.0)

    def generate(self, seed: int) -> Population:
        g = make_rng(seed, "population")
        k = len(self.cluster_shares)
        counts = np.floor(np.asarray(self.cluster_shares) * self.n_agents).astype(int)
        counts[-1] = self.n_agents - counts[:-1].sum()
        cid = np.repeat(np.arange(k), counts)
        cid = cid[g.permutation(self.n_agents)]
        scale = np.asarray(self.wealth_scales)[cid]
        wealth = np.exp(g.normal(math.log(self.wealth_median), self.wealth_sigma, self.n_agents)) * scale
        income = g.uniform(*self.income_range, self.n_agents)
        owns = g.random(self.n_agents) < np.asarray(self.ownership_probs)[cid]
        return Population(wealth, income, owns, cid)


@dataclass(eq=False)
class SimulationConfig:
    n_agents: int
    n_ticks: int
    initial_price: float
    regime_schedule: RegimeSchedule
    dynamic_params_per_regime: list[MarketParams]
    het_params_per_cluster: list[tuple[float, float]]
    seed: int
    population: Population | None = None
    population_seed: int = 0
    population_spec: PopulationSpec = field(default_factory=PopulationSpec)

    def resolved_population(self) -> Population:
        if self.population is not None:
            return self.population
        spec = replace(self.population_spec, n_agents=self.n_agents)
        return spec.generate(self.population_seed)

    def validate(self) -> None:
        if not isinstance(self.n_agents, (int, np.integer)) or self.n_agents < 1:
            raise ConfigurationError("n_agents", "must be a positive integer")
        if not isinstance(self.n_ticks, (int, np.integer)) or self.n_ticks < 1:
            raise ConfigurationError("n_ticks", "must be a positive integer")
        if not (math.isfinite(self.initial_price) and self.initial_price > 0):
            raise ConfigurationError("initial_price", "must be a positive real")
        if not (0 <= int(self.seed) <= MASK64):
            raise ConfigurationError("seed", "must be a 64-bit unsigned integer")
        if self.regime_schedule.n_ticks != self.n_ticks:
            raise ConfigurationError("regime_schedule", f"covers {self.regime_schedule.n_ticks} ticks, expected {self.n_ticks}")
        if len(self.dynamic_params_per_regime) != self.regime_schedule.n_regimes:
            raise ConfigurationError(
                "dynamic_params_per_regime",
                f"length {len(self.dynamic_params_per_regime)} != regime count {self.regime_schedule.n_regimes}")
        for r, m in enumerate(self.dynamic_params_per_regime):
            for name in DYNAMIC_PARAMETERS:
                v = getattr(m, name)
                if not (0.0 <= v <= 1.0):
                    raise ConfigurationError(f"dynamic_params_per_regime[{r}].{name}", f"{v} outside [0, 1]")
        if not self.het_params_per_cluster:
            raise ConfigurationError("het_params_per_cluster", "needs at least one cluster")
        for k, pair in enumerate(self.het_params_per_cluster):
            if len(pair) != 2:
                raise ConfigurationError(f"het_params_per_cluster[{k}]", "expected (willing_to_pay, purchase_rate)")
            for name, v in zip(HETEROGENEOUS_PARAMETERS, pair):
                if not (0.0 <= v <= 1.0):
                    raise ConfigurationError(f"het_params_per_cluster[{k}].{name}", f"{v} outside [0, 1]")
        pop = self.resolved_population()
        if pop.n_agents != self.n_agents:
            raise ConfigurationError("population", f"has {pop.n_agents} agents, expected {self.n_agents}")
        if np.any(pop.wealth < 0) or not np.all(np.isfinite(pop.wealth)):
            raise ConfigurationError("population.wealth", "must be finite and non-negative")
        if np.any(pop.income <= 0):
            raise ConfigurationError("population.income", "must be positive")
        cid = pop.cluster_id if pop.cluster_id is not None else np.zeros(pop.n_agents, dtype=np.int64)
        if cid.min() < 0 or cid.max() >= len(self.het_params_per_cluster):
            raise ConfigurationError("population.cluster_id", "references a cluster without parameters")

    def dynamic_array(self) -> np.ndarray:
        return np.array([m.as_array() for m in self.dynamic_params_per_regime])

    def het_array(self) -> np.ndarray:
        return np.array(self.het_params_per_cluster, dtype=np.float64).reshape(-1, 2)

    def to_json(self) -> dict:
        d = {
            "n_agents": int(self.n_agents),
            "n_ticks": int(self.n_ticks),
            "initial_price": float(self.initial_price),
            "regime_schedule": self.regime_schedule.to_json(),
            "dynamic_params_per_regime": [
                {name: getattr(m, name) for name in DYNAMIC_PARAMETERS} for m in self.dynamic_params_per_regime
            ],
            "het_params_per_cluster": [
                {"willing_to_pay": float(w), "purchase_rate": float(q)} for w, q in self.het_params_per_cluster
            ],
            "seed": int(self.seed),
            "population_seed": int(self.population_seed),
        }
        if self.population is not None:
            d["population"] = self.population.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SimulationConfig":
        try:
            het = [(float(h["willing_to_pay"]), float(h["purchase_rate"])) if isinstance(h, dict)
                   else (float(h[0]), float(h[1])) for h in d["het_params_per_cluster"]]
            cfg = cls(
                n_agents=int(d["n_agents"]),
                n_ticks=int(d["n_ticks"]),
                initial_price=float(d["initial_price"]),
                regime_schedule=RegimeSchedule.from_json(d["regime_schedule"]),
                dynamic_params_per_regime=[
                    MarketParams(**{k: float(m[k]) for k in DYNAMIC_PARAMETERS}) for m in d["dynamic_params_per_regime"]
                ],
                het_params_per_cluster=het,
                seed=int(d["seed"]),
                population=Population.from_json(d["population"]) if "population" in d else None,
                population_seed=int(d.get("population_seed", 0)),
            )
        except KeyError as exc:
            raise ConfigurationError(str(exc.args[0]), "missing field") from None
        return cfg


@dataclass(eq=False)
class SimulationOutput:
    price_index: np.ndarray
    transaction_volume: np.ndarray
    final_agents: list[AgentState]

    def __eq__(self, other):
        if not isinstance(other, SimulationOutput):
            return NotImplemented
        return (np.array_equal(self.price_index, other.price_index)
                and np.array_equal(self.transaction_volume, other.transaction_volume)
                and self.final_agents == other.final_agents)


@dataclass(eq=False)
class ObservationSeries:
    """The single observed run: macro series plus the micro agent snapshot.

    ``agent_snapshot`` is the agents' state at the start of the observation
    window; ``final_agents`` (optional) is the end-of-window state used for
    micro-level distribution comparisons.
    """

    price_index: np.ndarray
    transaction_volume: np.ndarray
    agent_snapshot: list[AgentState]
    final_agents: list[AgentState] | None = None

    def __post_init__(self):
        self.price_index = np.asarray(self.price_index, dtype=np.float64)
        self.transaction_volume = np.asarray(self.transaction_volume, dtype=np.int64)
        if self.price_index.shape != self.transaction_volume.shape:
            raise ConfigurationError("observation", "series lengths differ")

    @property
    def n_ticks(self) -> int:
        return int(self.price_index.size)

    def population(self) -> Population:
        return Population.from_agents(self.agent_snapshot)


def agent_parameter_arrays(cluster_id, het) -> tuple[np.ndarray, np.ndarray]:
    """Per-agent (willing_to_pay, purchase_rate) from cluster-wise values."""
    het = np.asarray(het, dtype=np.float64).reshape(-1, 2)
    return het[cluster_id, 0], het[cluster_id, 1]


def simulate(config: SimulationConfig) -> SimulationOutput:
    """Run the model once. Deterministic in ``config.seed``."""
    config.validate()
    pop = config.resolved_population()
    cid = pop.cluster_id if pop.cluster_id is not None else np.zeros(pop.n_agents, dtype=np.int64)
    wtp, q = agent_parameter_arrays(cid, config.het_array())
    prices, vols, wealth, owns = _kernels.simulate_single(
        config.regime_schedule.labels, config.dynamic_array(), wtp, q,
        pop.wealth, pop.income, pop.owns_house, config.initial_price, int(config.seed))
    final = Population(wealth, pop.income, owns, pop.cluster_id).to_agents(wtp, q)
    return SimulationOutput(prices, vols, final)


def simulate_many(labels, population: Population, initial_price: float, dyn, het, seeds):
    """Batch of runs sharing a population and schedule.

    ``dyn`` is (S, R, 3) and ``het`` (S, K, 2). Returns prices and volumes,
    each (S, T).
    """
    dyn = np.asarray(dyn, dtype=np.float64)
    het = np.asarray(het, dtype=np.float64)
    seeds = np.asarray(seeds, dtype=np.uint64)
    if dyn.ndim != 3 or het.ndim != 3 or dyn.shape[0] != seeds.size or het.shape[0] != seeds.size:
        raise ConfigurationError("batch", "dyn, het and seeds disagree on batch size")
    if np.any((dyn < 0) | (dyn > 1)):
        raise ConfigurationError("dynamic_params", "outside [0, 1]")
    if np.any((het < 0) | (het > 1)):
        raise ConfigurationError("het_params", "outside [0, 1]")
    cid = population.cluster_id if population.cluster_id is not None else np.zeros(population.n_agents, dtype=np.int64)
    if cid.max() >= het.shape[1]:
        raise ConfigurationError("het_params", "fewer clusters than the population's labels")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.max() >= dyn.shape[1]:
        raise ConfigurationError("dynamic_params", "fewer regimes than the schedule's labels")
    wtp = het[:, cid, 0]
    q = het[:, cid, 1]
    return _kernels.simulate_batch(labels, dyn, wtp, q, population.wealth, population.income,
                                   population.owns_house, initial_price, seeds)


# --------------------------------------------------------------------------
# scenarios
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    n_ticks: int
    initial_price: float
    segments: tuple[tuple[int, int, int], ...]
    dynamic: tuple[MarketParams, ...]
    het: tuple[tuple[float, float], ...]
    population: PopulationSpec


SCENARIOS: dict[str, Scenario] = {
    # boom, calm, active: regimes differ in volatility and turnover
    "default": Scenario(
        n_ticks=300,
        initial_price=40.0,
        segments=((0, 100, 0), (100, 200, 1), (200, 300, 2)),
        dynamic=(
            MarketParams(0.6, 0.45, 0.25),
            MarketParams(0.3, 0.03, 0.03),
            MarketParams(0.8, 0.08, 0.16),
        ),
        het=((0.9, 0.8), (0.3, 0.7)),
        population=PopulationSpec(),
    ),
    # small and fast, for smoke tests
    "tiny": Scenario(
        n_ticks=60,
        initial_price=40.0,
        segments=((0, 30, 0), (30, 60, 1)),
        dynamic=(MarketParams(0.6, 0.45, 0.25), MarketParams(0.3, 0.03, 0.03)),
        het=((0.9, 0.8), (0.3, 0.7)),
        population=PopulationSpec(n_agents=100),
    ),
}


def scenario_config(name: str, seed: int) -> SimulationConfig:
    if name not in SCENARIOS:
        raise ConfigurationError("scenario", f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    sc = SCENARIOS[name]
    pop_seed = derive_seed(seed, "population")
    population = sc.population.generate(pop_seed)
    return SimulationConfig(
        n_agents=sc.population.n_agents,
        n_ticks=sc.n_ticks,
        initial_price=sc.initial_price,
        regime_schedule=RegimeSchedule.from_segments(sc.segments),
        dynamic_params_per_regime=list(sc.dynamic),
        het_params_per_cluster=list(sc.het),
        seed=int(seed) & MASK64,
        population=population,
        population_seed=pop_seed,
        population_spec=sc.population,
    )


def generate_ground_truth(scenario_name: str, seed: int) -> tuple[SimulationConfig, ObservationSeries]:
    """Ground-truth config and the observation it produces.

    The observation's agent snapshot is the initial population with cluster
    identities hidden; the config keeps them for scoring.
    """
    config = scenario_config(scenario_name, seed)
    out = simulate(config)
    pop = config.population
    snapshot = Population(pop.wealth, pop.income, pop.owns_house).to_agents()
    final = [replace(a, cluster_id=None, willing_to_pay=0.5, purchase_rate=0.5) for a in out.final_agents]
    obs = ObservationSeries(out.price_index, out.transaction_volume, snapshot, final)
    return config, obs


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------

AGENT_COLUMNS = ("id", "wealth", "income", "owns_house", "cluster_id")


def write_output_csv(path, price_index, volume) -> None:
    write_csv(path, ("tick", "price_index", "transaction_volume"),
              ((t, price_index[t], volume[t]) for t in range(len(price_index))))


def read_series_csv(path) -> tuple[np.ndarray, np.ndarray]:
    _, rows = read_csv(path)
    return (np.array([float(r[1]) for r in rows]), np.array([int(r[2]) for r in rows], dtype=np.int64))


def write_agents_csv(path, agents: Sequence[AgentState]) -> None:
    write_csv(path, AGENT_COLUMNS,
              ((a.id, a.wealth, a.income, a.owns_house, a.cluster_id) for a in agents))


def read_agents_csv(path) -> list[AgentState]:
    _, rows = read_csv(path)
    return [AgentState(int(r[0]), float(r[1]), float(r[2]), r[3] == "1", int(r[4]) if r[4] != "" else None)
            for r in rows]


def write_observation(directory, observation: ObservationSeries) -> dict[str, str]:
    d = Path(directory)
    write_output_csv(d / "observation.csv", observation.price_index, observation.transaction_volume)
    write_agents_csv(d / "agents.csv", observation.agent_snapshot)
    files = {"observation": "observation.csv", "agents": "agents.csv"}
    if observation.final_agents is not None:
        write_agents_csv(d / "final_agents.csv", observation.final_agents)
        files["final_agents"] = "final_agents.csv"
    return files


def read_observation(directory) -> ObservationSeries:
    d = Path(directory)
    prices, vols = read_series_csv(d / "observation.csv")
    agents = read_agents_csv(d / "agents.csv")
    final = read_agents_csv(d / "final_agents.csv") if (d / "final_agents.csv").exists() else None
    return ObservationSeries(prices, vols, agents, final)


def write_config(path, config: SimulationConfig) -> None:
    write_json(path, config.to_json())


def read_config(path) -> SimulationConfig:
    return SimulationConfig.from_json(read_json(path))
