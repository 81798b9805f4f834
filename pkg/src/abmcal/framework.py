"""Joint calibration loop.

The calibrator clusters the observed agents once, then alternates a dynamic
phase (regime detection plus particle updates of the regime-wise market
parameters) with a heterogeneous phase (Bayesian optimization of the
cluster-wise agent parameters) until the best MAPE stops improving.
Every simulation is counted in a budget ledger so competing methods can be
compared at equal cost.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import regimes as hmm
from .abm import (DYNAMIC_PARAMETERS, HETEROGENEOUS_PARAMETERS, ObservationSeries, Population,
                  SimulationConfig, simulate_many, write_agents_csv, write_output_csv)
from .clustering import ClusterResult, cluster_agents
from .dynamic import BetaProposal, DynamicContext, run_dynamic_phase
from .errors import ConfigurationError
from .metrics import mape_rows
from .regimes import RegimeSchedule
from .seeding import derive_seed, derive_seeds, rng as make_rng
from .serialization import digest, dumps, write_csv, write_json
from .surrogate import STRATEGIES, SurrogateState, run_het_phase

DEFAULT_VALUE = 0.5
PHASE_ORDER = {"dynamic": 0, "heterogeneous": 1}


@dataclass
class FrameworkConfig:
    c_dyn: int = 5
    c_het: int = 10
    max_cycles: int = 10
    convergence_epsilon: float = 0.005
    n_particles: int = 64
    n_replications: int = 10
    bo_init: int = 8
    bo_replications: int = 3
    master_seed: int = 0
    ei_weight: float = 0.5
    strategy_probabilities: tuple = (0.25, 0.25, 0.25, 0.25)
    n_regimes: int | None = None
    n_clusters: int | None = None
    k_range: tuple = (1, 2, 3, 4)
    hmm_starts: int = 3
    latent_dim: int = 2
    vae_epochs: int = 200
    vae_learning_rate: float = 1e-2

    def validate(self) -> None:
        for name in ("c_dyn", "c_het", "max_cycles"):
            if int(getattr(self, name)) < 0:
                raise ConfigurationError(name, "must be non-negative")
        if self.max_cycles > 0 and self.c_dyn + self.c_het < 1:
            raise ConfigurationError("c_dyn", "c_dyn + c_het must be at least 1 unless max_cycles = 0")
        if self.convergence_epsilon < 0:
            raise ConfigurationError("convergence_epsilon", "must be non-negative")
        if self.n_particles < 2:
            raise ConfigurationError("n_particles", "must be at least 2")
        if self.n_replications < 2:
            raise ConfigurationError("n_replications", "must be at least 2")
        if self.bo_init < 1:
            raise ConfigurationError("bo_init", "must be positive")
        if not 1 <= self.bo_replications <= self.n_replications:
            raise ConfigurationError("bo_replications", "must lie in [1, n_replications]")
        if not 0 <= self.ei_weight <= 1:
            raise ConfigurationError("ei_weight", "must lie in [0, 1]")
        if len(self.strategy_probabilities) != len(STRATEGIES) or not math.isclose(
                sum(self.strategy_probabilities), 1.0, abs_tol=1e-9):
            raise ConfigurationError("strategy_probabilities", "need four weights summing to 1")
        if self.n_regimes is not None and not 1 <= self.n_regimes:
            raise ConfigurationError("n_regimes", "must be positive")
        if self.n_clusters is not None and not 1 <= self.n_clusters:
            raise ConfigurationError("n_clusters", "must be positive")
        if not 0 <= self.master_seed < 2 ** 64:
            raise ConfigurationError("master_seed", "must be a 64-bit unsigned integer")

    def to_json(self) -> dict:
        d = asdict(self)
        d["strategy_probabilities"] = list(self.strategy_probabilities)
        d["k_range"] = list(self.k_range)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "FrameworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(sorted(unknown)[0], "unknown framework option")
        kw = dict(d)
        for k in ("strategy_probabilities", "k_range"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)


@dataclass(frozen=True)
class HistoryEntry:
    cycle: int
    phase: str
    iteration: int
    best_mape: float
    cumulative_simulations: int

    def order_key(self):
        return (self.cycle, PHASE_ORDER.get(self.phase, 2), self.iteration)


@dataclass(eq=False)
class CalibrationState:
    regime_schedule: RegimeSchedule
    cluster_assignment: object
    proposal: BetaProposal
    surrogate: SurrogateState | None
    best_dynamic: np.ndarray
    best_het: np.ndarray
    best_mape: float
    best_schedule: RegimeSchedule
    baseline_mape: float
    history: list = field(default_factory=list)
    cycle: int = 0
    n_dynamic_iterations: int = 0
    n_bo_iterations: int = 0
    n_surrogate_resets: int = 0
    converged: bool = False
    budget_exhausted: bool = False

    @property
    def n_clusters(self) -> int:
        return self.best_het.size // len(HETEROGENEOUS_PARAMETERS)

    def set_schedule(self, schedule: RegimeSchedule) -> None:
        """Adopt a new regime schedule for the next dynamic iterations."""
        if schedule.n_regimes != self.proposal.shape[0]:
            self.proposal = BetaProposal.uniform(schedule.n_regimes)
        self.regime_schedule = schedule

    def offer(self, dyn, het, mape: float, schedule: RegimeSchedule | None = None) -> bool:
        """Keep (dyn, het) if it beats the incumbent; returns whether it did."""
        if mape < self.best_mape:
            self.best_dynamic = np.array(dyn, dtype=np.float64)
            self.best_het = np.array(het, dtype=np.float64)
            self.best_mape = float(mape)
            if schedule is not None:
                self.best_schedule = schedule
            return True
        return False

    def summary(self) -> dict:
        return {
            "best_mape": self.best_mape,
            "baseline_mape": self.baseline_mape,
            "best_dynamic": self.best_dynamic,
            "best_het": self.best_het,
            "n_regimes": self.best_schedule.n_regimes,
            "n_clusters": self.n_clusters,
            "cycles": self.cycle,
            "converged": self.converged,
            "budget_exhausted": self.budget_exhausted,
        }


# --------------------------------------------------------------------------
# fitness
# --------------------------------------------------------------------------


def evaluation_seeds(seed: int, n_replications: int) -> np.ndarray:
    """Replication seeds; the first is ``seed`` itself."""
    rest = derive_seeds(seed, n_replications - 1, "evaluation") if n_replications > 1 else []
    return np.concatenate([np.array([int(seed)], dtype=np.uint64), np.asarray(rest, dtype=np.uint64)])


def evaluate_many(dyn, het, observation: ObservationSeries, n_replications: int, seed: int,
                  schedule: RegimeSchedule, population: Population, initial_price: float | None = None,
                  chunk: int = 128) -> np.ndarray:
    """Mean replication MAPE for a batch of parameter sets.

    ``dyn`` is (S, R, 3) and ``het`` (S, K, 2); all sets share the same
    replication seeds.
    """
    dyn = np.asarray(dyn, dtype=np.float64)
    het = np.asarray(het, dtype=np.float64)
    if n_replications < 1:
        raise ConfigurationError("n_replications", "must be positive")
    if schedule.n_ticks != observation.n_ticks:
        raise ConfigurationError("regime_schedule", "length differs from the observation")
    if dyn.shape[1] != schedule.n_regimes:
        raise ConfigurationError("theta_dyn", f"expected {schedule.n_regimes} regimes, got {dyn.shape[1]}")
    p0 = float(observation.price_index[0]) if initial_price is None else float(initial_price)
    seeds = evaluation_seeds(seed, n_replications)
    out = np.empty(dyn.shape[0])
    for lo in range(0, dyn.shape[0], chunk):
        hi = min(lo + chunk, dyn.shape[0])
        n = hi - lo
        d = np.repeat(dyn[lo:hi], n_replications, axis=0)
        h = np.repeat(het[lo:hi], n_replications, axis=0)
        prices, _ = simulate_many(schedule.labels, population, p0, d, h, np.tile(seeds, n))
        out[lo:hi] = mape_rows(observation.price_index, prices).reshape(n, n_replications).mean(axis=1)
    return out


def evaluate(theta_dyn, theta_het, observation: ObservationSeries, n_replications: int, seed: int,
             schedule: RegimeSchedule, population: Population, initial_price: float | None = None) -> float:
    """Mean MAPE of simulated against observed prices over ``n_replications`` runs.

    Agents inherit their cluster's (willing_to_pay, purchase_rate). The first
    replication uses ``seed`` itself, so the ground truth evaluated at the
    ground-truth seed reproduces the observation exactly.
    """
    dyn = np.asarray(theta_dyn, dtype=np.float64)
    het = np.asarray(theta_het, dtype=np.float64)
    if dyn.size != schedule.n_regimes * len(DYNAMIC_PARAMETERS):
        raise ConfigurationError("theta_dyn", f"expected {schedule.n_regimes} regimes, got {dyn.size} values")
    if het.size % len(HETEROGENEOUS_PARAMETERS):
        raise ConfigurationError("theta_het", f"size {het.size} is not a multiple of {len(HETEROGENEOUS_PARAMETERS)}")
    dyn = dyn.reshape(1, schedule.n_regimes, len(DYNAMIC_PARAMETERS))
    het = het.reshape(1, -1, len(HETEROGENEOUS_PARAMETERS))
    return float(evaluate_many(dyn, het, observation, n_replications, seed, schedule, population,
                               initial_price)[0])


# --------------------------------------------------------------------------
# calibrator
# --------------------------------------------------------------------------


class Calibrator:
    """Holds the fixed inputs of a calibration run, its seeds, ledger and logs."""

    def __init__(self, observation: ObservationSeries, fw: FrameworkConfig,
                 abm_config: SimulationConfig | None = None):
        fw.validate()
        if observation.n_ticks < 2:
            raise ConfigurationError("observation", "need at least two ticks")
        if abm_config is not None and abm_config.n_ticks != observation.n_ticks:
            raise ConfigurationError("n_ticks", "configured n_ticks differs from the observation")
        self.observation = observation
        self.fw = fw
        self.initial_price = float(observation.price_index[0])
        self.eval_seed = self.seed_for("evaluation")
        self.ledger = {"particle_simulations": 0, "evaluation_simulations": 0, "baseline_simulations": 0,
                       "random_search_simulations": 0, "dynamic_iterations": 0, "evaluations": 0,
                       "baseline_evaluations": 0, "random_search_evaluations": 0}
        self.cluster_result: ClusterResult | None = None
        self.population: Population | None = None
        self.n_regimes: int | None = None
        self.regime_bic: dict = {}
        self.last_detection = None
        self.particle_rows: list = []
        self.proposal_log: list = []
        self.bo_rows: list = []
        self.surrogate_log: list = []
        self.het_free: np.ndarray | None = None

    # seeds and bookkeeping -------------------------------------------------

    def seed_for(self, *keys) -> int:
        return derive_seed(self.fw.master_seed, *keys)

    @property
    def total_simulations(self) -> int:
        led = self.ledger
        return (led["particle_simulations"] + led["evaluation_simulations"] + led["baseline_simulations"]
                + led["random_search_simulations"])

    def count_particle_simulations(self, n: int) -> None:
        self.ledger["particle_simulations"] += int(n)
        self.ledger["dynamic_iterations"] += 1

    def record(self, state: CalibrationState, phase: str, iteration: int, pending: int = 0) -> None:
        """Append a history row; ``pending`` simulations of a batch are not yet consumed at this row."""
        entry = HistoryEntry(state.cycle, phase, int(iteration), state.best_mape, self.total_simulations - pending)
        if state.history and not state.history[-1].order_key() < entry.order_key():
            raise RuntimeError("history must be strictly ordered")
        state.history.append(entry)

    # inputs held fixed --------------------------------------------------------

    def prepare(self) -> Population:
        """Cluster the observed agents (once per run)."""
        if self.population is None:
            snap = self.observation.population()
            self.cluster_result = cluster_agents(
                snap, self.initial_price, n_clusters=self.fw.n_clusters, k_range=self.fw.k_range,
                seed=self.seed_for("clusters"), latent_dim=self.fw.latent_dim, epochs=self.fw.vae_epochs,
                learning_rate=self.fw.vae_learning_rate)
            self.population = snap.with_clusters(self.cluster_result.assignment.labels)
        return self.population

    @property
    def n_clusters(self) -> int:
        return self.cluster_result.gmm.n_components

    def select_regime_count(self) -> int:
        if self.n_regimes is None:
            if self.fw.n_regimes is not None:
                self.n_regimes = int(self.fw.n_regimes)
            else:
                x = hmm.log_returns(self.observation.price_index)
                self.n_regimes, self.regime_bic = hmm.select_n_regimes(
                    x, seed=self.seed_for("regimes", "bic"), n_starts=self.fw.hmm_starts)
        return self.n_regimes

    def detect_regimes(self, state: CalibrationState, k: int) -> RegimeSchedule:
        r = self.select_regime_count()
        ref = state.regime_schedule if state.regime_schedule.n_regimes == r else None
        det = hmm.detect_regimes(self.observation.price_index, n_regimes=r, seed=self.seed_for("regimes", k),
                                 n_starts=self.fw.hmm_starts, reference=ref)
        self.last_detection = det
        return det.schedule

    def dynamic_context(self, state: CalibrationState) -> DynamicContext:
        return DynamicContext(state.regime_schedule, self.population, self.initial_price,
                              state.best_het.reshape(-1, len(HETEROGENEOUS_PARAMETERS)), self.fw.n_replications,
                              common_seeds=evaluation_seeds(self.eval_seed, self.fw.n_replications),
                              observed_prices=self.observation.price_index,
                              fitness_replications=self.fw.bo_replications)

    def het_to_free(self, het) -> np.ndarray:
        """The cluster-wise entries the optimizer may move (all unless ``het_free`` is set)."""
        het = np.asarray(het, dtype=np.float64)
        return het.copy() if self.het_free is None else het[self.het_free]

    def free_to_het(self, x, base) -> np.ndarray:
        if self.het_free is None:
            return np.array(x, dtype=np.float64)
        out = np.array(base, dtype=np.float64)
        out[self.het_free] = x
        return out

    def surrogate_key(self, state: CalibrationState) -> tuple:
        return (state.best_dynamic.tobytes(), state.best_schedule.labels.tobytes())

    # fitness ----------------------------------------------------------------

    def _evaluate_batch(self, dyn, het, schedule: RegimeSchedule, kind: str) -> np.ndarray:
        dyn = np.asarray(dyn, dtype=np.float64).reshape(-1, schedule.n_regimes, len(DYNAMIC_PARAMETERS))
        het = np.asarray(het, dtype=np.float64).reshape(dyn.shape[0], -1, len(HETEROGENEOUS_PARAMETERS))
        n_rep = self.fw.bo_replications
        out = evaluate_many(dyn, het, self.observation, n_rep, self.eval_seed, schedule, self.population,
                            self.initial_price)
        key = {"evaluation": "evaluations", "baseline": "baseline_evaluations",
               "random_search": "random_search_evaluations"}[kind]
        self.ledger[key] += dyn.shape[0]
        self.ledger[f"{kind}_simulations"] += dyn.shape[0] * n_rep
        return out

    def evaluate(self, dyn, het, schedule: RegimeSchedule) -> float:
        return float(self._evaluate_batch(dyn, het, schedule, "evaluation")[0])

    def evaluate_het_batch(self, het_points, dyn, schedule: RegimeSchedule) -> np.ndarray:
        het_points = np.atleast_2d(het_points)
        dyn_b = np.repeat(np.asarray(dyn, dtype=np.float64)[None], het_points.shape[0], axis=0)
        return self._evaluate_batch(dyn_b, het_points, schedule, "evaluation")

    # logs -------------------------------------------------------------------

    def log_particles(self, state: CalibrationState, k: int, result) -> None:
        for pid, p in enumerate(result.particles):
            self.particle_rows.append((k + 1, state.cycle, pid, p.theta.ravel().tolist(), p.log_prior,
                                       p.log_synth_likelihood, p.weight, p.fitness))
        self.proposal_log.append({"iteration": k + 1, "cycle": state.cycle,
                                  "alpha": result.proposal.alpha, "beta": result.proposal.beta,
                                  "best_log_synth_likelihood": result.best.log_synth_likelihood})

    def log_bo_eval(self, state: CalibrationState, strategy: str, x, y: float, simulated: bool = True) -> None:
        self.bo_rows.append((len(self.bo_rows) + 1, state.cycle, strategy, np.asarray(x).tolist(), float(y),
                             simulated))
        s = state.surrogate
        self.surrogate_log.append({"eval_id": len(self.bo_rows), "cycle": state.cycle, **s.to_json()})

    # driver -----------------------------------------------------------------

    def initial_state(self) -> CalibrationState:
        """Default parameters everywhere, scored once as the baseline."""
        pop = self.prepare()
        schedule = RegimeSchedule.constant(self.observation.n_ticks)
        dyn = np.full((1, len(DYNAMIC_PARAMETERS)), DEFAULT_VALUE)
        het = np.full(self.n_clusters * len(HETEROGENEOUS_PARAMETERS), DEFAULT_VALUE)
        base = float(self._evaluate_batch(dyn, het, schedule, "baseline")[0])
        del pop
        return CalibrationState(schedule, self.cluster_result.assignment, BetaProposal.uniform(1), None,
                                dyn, het, base, schedule, base)

    def run_cycle(self, state: CalibrationState) -> bool:
        """One dynamic phase then one heterogeneous phase; returns convergence."""
        state.cycle += 1
        start = state.best_mape
        run_dynamic_phase(state, self.fw.c_dyn, self)
        run_het_phase(state, self.fw.c_het, self)
        if start <= 0:
            return True
        return (start - state.best_mape) / start < self.fw.convergence_epsilon

    def run(self, state: CalibrationState | None = None) -> CalibrationState:
        state = self.initial_state() if state is None else state
        while state.cycle < self.fw.max_cycles:
            if self.run_cycle(state):
                state.converged = True
                break
        state.budget_exhausted = not state.converged
        return state

    # random search ----------------------------------------------------------

    def random_search(self, budget: int, schedule: RegimeSchedule | None = None, chunk: int = 64):
        """Uniform random parameter sets scored with the same fitness.

        Returns (best dynamic, best heterogeneous, best MAPE, running-minimum
        trace). The regime schedule defaults to a fresh detection on the
        observation with the run's regime count.
        """
        if budget < 1:
            raise ConfigurationError("budget", "must be at least 1")
        self.prepare()
        if schedule is None:
            r = self.select_regime_count()
            schedule = hmm.detect_regimes(self.observation.price_index, n_regimes=r,
                                          seed=self.seed_for("regimes", 0), n_starts=self.fw.hmm_starts).schedule
        g = make_rng(self.fw.master_seed, "random-search")
        n_dyn = schedule.n_regimes * len(DYNAMIC_PARAMETERS)
        n_het = self.n_clusters * len(HETEROGENEOUS_PARAMETERS)
        best = (None, None, math.inf)
        trace = []
        for lo in range(0, budget, chunk):
            n = min(chunk, budget - lo)
            draws = g.random((n, n_dyn + n_het))
            fits = self._evaluate_batch(draws[:, :n_dyn], draws[:, n_dyn:], schedule, "random_search")
            for i in range(n):
                if fits[i] < best[2]:
                    best = (draws[i, :n_dyn].reshape(schedule.n_regimes, -1), draws[i, n_dyn:], float(fits[i]))
                trace.append(best[2])
        return best[0], best[1], best[2], trace, schedule


def calibrate(observation: ObservationSeries, fw_config: FrameworkConfig,
              abm_config: SimulationConfig | None = None) -> CalibrationState:
    """Run the joint calibration loop and return the final state."""
    return Calibrator(observation, fw_config, abm_config).run()


def random_search_baseline(observation: ObservationSeries, budget: int, seed: int,
                           fw_config: FrameworkConfig | None = None):
    """Random-search baseline: (best parameters, best MAPE, running-minimum trace)."""
    fw = FrameworkConfig(master_seed=seed) if fw_config is None else fw_config
    cal = Calibrator(observation, fw)
    dyn, het, best, trace, _ = cal.random_search(budget)
    return (dyn, het), best, trace


# --------------------------------------------------------------------------
# run directory
# --------------------------------------------------------------------------


def _param_columns(n_regimes: int) -> list[str]:
    return [f"r{r}_{p}" for r in range(n_regimes) for p in DYNAMIC_PARAMETERS]


def _het_columns(n_clusters: int) -> list[str]:
    return [f"c{k}_{p}" for k in range(n_clusters) for p in HETEROGENEOUS_PARAMETERS]


def named_dynamic(dyn) -> list[dict]:
    return [dict(zip(DYNAMIC_PARAMETERS, map(float, row))) for row in np.atleast_2d(dyn)]


def named_het(het) -> list[dict]:
    return [dict(zip(HETEROGENEOUS_PARAMETERS, map(float, row)))
            for row in np.asarray(het).reshape(-1, len(HETEROGENEOUS_PARAMETERS))]


def _write_common(out: Path, cal: Calibrator, schedule: RegimeSchedule, files: dict) -> None:
    obs = cal.observation
    write_output_csv(out / "observation.csv", obs.price_index, obs.transaction_volume)
    files["observation"] = "observation.csv"
    write_csv(out / "regimes.csv", ("tick", "label"), enumerate(schedule.labels.tolist()))
    files["regimes"] = "regimes.csv"
    det = cal.last_detection
    write_json(out / "regimes.json", {"schedule": schedule.to_json(),
                                      "model": None if det is None else det.model.to_json(),
                                      "bic": {str(k): v for k, v in cal.regime_bic.items()}})
    files["regimes_json"] = "regimes.json"
    cr = cal.cluster_result
    resp = cr.assignment.responsibilities
    write_csv(out / "clusters.csv", ["agent_id", "label"] + [f"resp_{k}" for k in range(resp.shape[1])],
              ([i, int(cr.assignment.labels[i])] + resp[i].tolist() for i in range(resp.shape[0])))
    files["clusters"] = "clusters.csv"
    write_csv(out / "latents.csv", ["agent_id"] + [f"z{j}" for j in range(cr.latents.shape[1])] + ["label"],
              ([i] + cr.latents[i].tolist() + [int(cr.assignment.labels[i])] for i in range(cr.latents.shape[0])))
    files["latents"] = "latents.csv"
    write_json(out / "clustering.json", {"features": list(cr.features.names), "feature_means": cr.features.means,
                                         "feature_stds": cr.features.stds, "vae": cr.vae.to_json(),
                                         "gmm": cr.gmm.to_json(), "bic": {str(k): v for k, v in cr.bic_table.items()}})
    files["clustering"] = "clustering.json"


def _write_best_simulation(out: Path, cal: Calibrator, dyn, het, schedule: RegimeSchedule, files: dict) -> None:
    """The best parameters run once at the evaluation seed, for micro comparisons."""
    from . import _kernels
    from .abm import agent_parameter_arrays

    pop = cal.population
    wtp, q = agent_parameter_arrays(pop.cluster_id, het)
    prices, vols, wealth, owns = _kernels.simulate_single(schedule.labels, np.atleast_2d(dyn), wtp, q, pop.wealth,
                                                          pop.income, pop.owns_house, cal.initial_price,
                                                          cal.eval_seed)
    write_output_csv(out / "simulated.csv", prices, vols)
    write_agents_csv(out / "simulated_agents.csv", Population(wealth, pop.income, owns, pop.cluster_id).to_agents(wtp, q))
    files["simulated"] = "simulated.csv"
    files["simulated_agents"] = "simulated_agents.csv"
    if cal.observation.final_agents is not None:
        write_agents_csv(out / "observed_agents.csv", cal.observation.final_agents)
        files["observed_agents"] = "observed_agents.csv"


def _write_history(out: Path, history, files: dict) -> None:
    write_csv(out / "history.csv", ("cycle", "phase", "iteration", "best_mape", "cumulative_simulations"),
              ((h.cycle, h.phase, h.iteration, h.best_mape, h.cumulative_simulations) for h in history))
    files["history"] = "history.csv"


def write_manifest(out: Path, command: str, files: dict, seed: int) -> dict:
    """Manifest with a content-derived run id, so identical runs match byte for byte."""
    config_digest = digest(out / "config.json")
    manifest = {"run_id": f"{config_digest[:12]}-seed{seed}", "command": command,
                "config_digest": config_digest, "artifacts": dict(sorted(files.items()))}
    write_json(out / "manifest.json", manifest)
    return manifest


def save_calibration_run(out, cal: Calibrator, state: CalibrationState, config_doc: dict, mode: str) -> dict:
    """Write the full run directory for a calibration run."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = {"config": "config.json"}
    write_json(out / "config.json", config_doc)
    _write_common(out, cal, state.best_schedule, files)

    max_cells = max((len(r[3]) for r in cal.particle_rows), default=0)
    n_par = len(DYNAMIC_PARAMETERS)
    header = ["iteration", "cycle", "particle_id"] + _param_columns(max_cells // n_par) + [
        "log_prior", "log_synth_likelihood", "weight", "mape"]
    write_csv(out / "particles.csv", header,
              ([it, cyc, pid] + theta + [""] * (max_cells - len(theta)) + [lp, ll, w, f]
               for it, cyc, pid, theta, lp, ll, w, f in cal.particle_rows))
    files["particles"] = "particles.csv"
    write_json(out / "proposals.json", cal.proposal_log)
    files["proposals"] = "proposals.json"
    n_het = state.best_het.size
    write_csv(out / "bo_evals.csv", ["eval_id", "cycle", "strategy"] + _het_columns(n_het // 2) + ["fitness", "simulated"],
              ([eid, cyc, strat] + x + [y, sim] for eid, cyc, strat, x, y, sim in cal.bo_rows))
    files["bo_evals"] = "bo_evals.csv"
    write_json(out / "surrogate.json", cal.surrogate_log)
    files["surrogate"] = "surrogate.json"
    _write_history(out, state.history, files)
    _write_best_simulation(out, cal, state.best_dynamic, state.best_het, state.best_schedule, files)

    report = {
        "mode": mode,
        "final_mape": state.best_mape,
        "baseline_mape": state.baseline_mape,
        "best_dynamic": named_dynamic(state.best_dynamic),
        "best_heterogeneous": named_het(state.best_het),
        "regime_segments": [list(s) for s in state.best_schedule.segments],
        "n_regimes": state.best_schedule.n_regimes,
        "n_clusters": cal.n_clusters,
        "cycles": state.cycle,
        "converged": state.converged,
        "budget_exhausted": state.budget_exhausted,
        "budget": dict(cal.ledger, total_simulations=cal.total_simulations),
    }
    write_json(out / "report.json", report)
    files["report"] = "report.json"
    return write_manifest(out, f"calibrate --mode {mode}", files, cal.fw.master_seed)


def save_random_run(out, cal: Calibrator, result, baseline_mape: float, config_doc: dict) -> dict:
    dyn, het, best, trace, schedule = result
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = {"config": "config.json"}
    write_json(out / "config.json", config_doc)
    _write_common(out, cal, schedule, files)
    n_rep = cal.fw.bo_replications
    base = cal.ledger["baseline_simulations"]
    history = [HistoryEntry(0, "random", i + 1, v, base + (i + 1) * n_rep) for i, v in enumerate(trace)]
    _write_history(out, history, files)
    _write_best_simulation(out, cal, dyn, het, schedule, files)
    report = {
        "mode": "random",
        "final_mape": best,
        "baseline_mape": baseline_mape,
        "best_dynamic": named_dynamic(dyn),
        "best_heterogeneous": named_het(het),
        "regime_segments": [list(s) for s in schedule.segments],
        "n_regimes": schedule.n_regimes,
        "n_clusters": cal.n_clusters,
        "budget": dict(cal.ledger, total_simulations=cal.total_simulations),
    }
    write_json(out / "report.json", report)
    files["report"] = "report.json"
    return write_manifest(out, "calibrate --mode random", files, cal.fw.master_seed)
