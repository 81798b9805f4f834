"""Regime-wise calibration of the market parameters.

Particles are drawn from a product of independent Beta distributions, one per
(regime, parameter) cell. Each particle is scored by a Gaussian synthetic
likelihood built from replicated simulations, and the Beta shapes are refit
to the importance-weighted particle cloud by moment matching.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import gammaln

from .abm import DYNAMIC_PARAMETERS, Population, simulate_many
from .metrics import mape_rows
from .errors import CalibrationError, ConfigurationError, DomainError
from .regimes import RegimeSchedule
from .seeding import derive_seed, derive_seeds, rng as make_rng

SHAPE_MIN = 0.5
SHAPE_CAP = 200.0
VAR_FLOOR = 1e-6
MOMENT_VAR_FLOOR = 1e-6
BOUNDARY_EPS = 1e-12
BOUNDARY_NUDGE = 1e-9
MAX_REDRAWS = 100
_LOG_2PI = math.log(2.0 * math.pi)


def beta_log_pdf(x: float, alpha: float, beta: float) -> float:
    """Log-density of Beta(alpha, beta) at ``x`` in the open unit interval."""
    if not 0.0 < x < 1.0:
        raise DomainError(f"x={x} outside (0, 1)")
    if alpha <= 0 or beta <= 0:
        raise DomainError("shape parameters must be positive")
    return ((alpha - 1.0) * math.log(x) + (beta - 1.0) * math.log1p(-x)
            - (math.lgamma(alpha) + math.lgamma(beta) - math.lgamma(alpha + beta)))


def _beta_log_pdf_array(x, a, b):
    return (a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) - (gammaln(a) + gammaln(b) - gammaln(a + b))


@dataclass(eq=False)
class BetaProposal:
    """Independent Beta shapes indexed by (regime, dynamic parameter)."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.alpha = np.array(self.alpha, dtype=np.float64)
        self.beta = np.array(self.beta, dtype=np.float64)
        if self.alpha.shape != self.beta.shape or self.alpha.ndim != 2:
            raise ConfigurationError("proposal", "alpha and beta must be matching (R, D) matrices")
        if np.any(self.alpha <= 0) or np.any(self.beta <= 0):
            raise ConfigurationError("proposal", "shapes must be positive")

    @classmethod
    def uniform(cls, n_regimes: int, n_params: int = len(DYNAMIC_PARAMETERS)) -> "BetaProposal":
        return cls(np.ones((n_regimes, n_params)), np.ones((n_regimes, n_params)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.alpha.shape

    @property
    def mean(self) -> np.ndarray:
        return self.alpha / (self.alpha + self.beta)

    def log_pdf(self, theta) -> np.ndarray:
        """Sum of cell log-densities; ``theta`` is (..., R, D)."""
        return _beta_log_pdf_array(np.asarray(theta), self.alpha, self.beta).sum(axis=(-2, -1))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` draws of shape (n, R, D), strictly inside (0, 1)."""
        out = rng.beta(self.alpha, self.beta, size=(n,) + self.shape)
        bad = (out <= BOUNDARY_EPS) | (out >= 1.0 - BOUNDARY_EPS)
        tries = 0
        while bad.any() and tries < MAX_REDRAWS:
            redraw = rng.beta(self.alpha, self.beta, size=(n,) + self.shape)
            out = np.where(bad, redraw, out)
            bad = (out <= BOUNDARY_EPS) | (out >= 1.0 - BOUNDARY_EPS)
            tries += 1
        if bad.any():
            out = np.clip(out, BOUNDARY_NUDGE, 1.0 - BOUNDARY_NUDGE)
        return out

    def resized(self, n_regimes: int) -> "BetaProposal":
        if n_regimes == self.shape[0]:
            return self
        return BetaProposal.uniform(n_regimes, self.shape[1])

    def to_json(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta}

    @classmethod
    def from_json(cls, d: dict) -> "BetaProposal":
        return cls(d["alpha"], d["beta"])


@dataclass
class Particle:
    theta: np.ndarray
    log_prior: float
    log_synth_likelihood: float
    weight: float = 0.0
    # price MAPE of the first replications, when the context can score it
    fitness: float = math.nan


# --------------------------------------------------------------------------
# summary statistics and synthetic likelihood
# --------------------------------------------------------------------------


def summary_stats(prices, volumes, schedule: RegimeSchedule, n_agents: int) -> np.ndarray:
    """Summary vector(s) of length 3R + 1.

    Per regime: mean and std of log-returns, mean volume / n_agents; then the
    terminal log price. Accepts a single run (T,) or a batch (S, T).
    """
    p = np.atleast_2d(np.asarray(prices, dtype=np.float64))
    v = np.atleast_2d(np.asarray(volumes, dtype=np.float64))
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.log(p)
    r = np.zeros_like(logp)
    r[:, 1:] = np.diff(logp, axis=1)
    n_reg = schedule.n_regimes
    out = np.empty((p.shape[0], 3 * n_reg + 1))
    for k in range(n_reg):
        mask = schedule.labels == k
        if not mask.any():
            out[:, 3 * k:3 * k + 3] = np.nan
            continue
        rk = r[:, mask]
        out[:, 3 * k] = rk.mean(axis=1)
        out[:, 3 * k + 1] = rk.std(axis=1)
        out[:, 3 * k + 2] = v[:, mask].mean(axis=1) / n_agents
    out[:, -1] = logp[:, -1]
    return out[0] if np.ndim(prices) == 1 else out


def gaussian_synthetic_loglik(observed, replicate_stats, var_floor: float = VAR_FLOOR) -> float:
    """Log-density of ``observed`` under the diagonal Gaussian fit to replicates."""
    obs = np.asarray(observed, dtype=np.float64)
    reps = np.asarray(replicate_stats, dtype=np.float64)
    if reps.ndim != 2 or reps.shape[0] < 2:
        raise ConfigurationError("n_replications", "need at least 2 replications")
    if not (np.all(np.isfinite(reps)) and np.all(np.isfinite(obs))):
        return -math.inf
    mu = reps.mean(axis=0)
    var = np.maximum(reps.var(axis=0, ddof=1), var_floor)
    return float(-0.5 * np.sum(_LOG_2PI + np.log(var) + (obs - mu) ** 2 / var))


@dataclass(eq=False)
class DynamicContext:
    """Everything a dynamic-parameter evaluation holds fixed."""

    schedule: RegimeSchedule
    population: Population
    initial_price: float
    het: np.ndarray  # (K, 2) cluster-wise parameters held fixed
    n_replications: int = 10
    var_floor: float = VAR_FLOOR
    # replication seeds shared by every particle (common random numbers);
    # None derives separate seeds per particle
    common_seeds: np.ndarray | None = None
    # observed prices and replication count for the free fitness score
    observed_prices: np.ndarray | None = None
    fitness_replications: int = 0

    @property
    def n_agents(self) -> int:
        return self.population.n_agents

    def simulate(self, thetas: np.ndarray, seeds: np.ndarray):
        thetas = np.asarray(thetas, dtype=np.float64)
        het = np.broadcast_to(np.asarray(self.het, dtype=np.float64), (thetas.shape[0],) + np.shape(self.het))
        return simulate_many(self.schedule.labels, self.population, self.initial_price, thetas, het, seeds)


def replicate_seeds(base_seed: int, n: int) -> np.ndarray:
    return derive_seeds(base_seed, n, "replicate")


def synthetic_log_likelihood(observed, theta, context: DynamicContext, base_seed: int,
                             n_replications: int | None = None) -> float:
    """Synthetic log-likelihood of observed summaries at one parameter matrix."""
    n = context.n_replications if n_replications is None else n_replications
    if n < 2:
        raise ConfigurationError("n_replications", "need at least 2 replications")
    seeds = replicate_seeds(base_seed, n)
    thetas = np.repeat(np.asarray(theta, dtype=np.float64)[None], n, axis=0)
    prices, vols = context.simulate(thetas, seeds)
    stats = summary_stats(prices, vols, context.schedule, context.n_agents)
    return gaussian_synthetic_loglik(observed, stats, context.var_floor)


def batch_synthetic_log_likelihood(observed, thetas, context: DynamicContext, particle_seeds,
                                   return_fitness: bool = False):
    """Synthetic log-likelihoods for a particle population in one simulation batch.

    Particle ``i`` uses ``context.common_seeds`` when set, otherwise seeds
    derived from ``particle_seeds[i]``. With ``return_fitness`` the mean price
    MAPE of the first ``context.fitness_replications`` replications is
    returned as well (NaN when the context carries no observed prices).
    """
    thetas = np.asarray(thetas, dtype=np.float64)
    n_p = thetas.shape[0]
    n_r = context.n_replications
    if n_r < 2:
        raise ConfigurationError("n_replications", "need at least 2 replications")
    if context.common_seeds is not None:
        rep = np.asarray(context.common_seeds, dtype=np.uint64)
        if rep.size != n_r:
            raise ConfigurationError("common_seeds", f"expected {n_r} seeds")
        seeds = np.tile(rep, n_p)
    else:
        seeds = np.concatenate([replicate_seeds(int(s), n_r) for s in particle_seeds])
    prices, vols = context.simulate(np.repeat(thetas, n_r, axis=0), seeds)
    stats = summary_stats(prices, vols, context.schedule, context.n_agents).reshape(n_p, n_r, -1)
    log_sl = np.array([gaussian_synthetic_loglik(observed, stats[i], context.var_floor) for i in range(n_p)])
    if not return_fitness:
        return log_sl
    fitness = np.full(n_p, math.nan)
    n_f = context.fitness_replications
    if context.observed_prices is not None and n_f > 0:
        if n_f > n_r:
            raise ConfigurationError("fitness_replications", "cannot exceed n_replications")
        rows = mape_rows(context.observed_prices, prices).reshape(n_p, n_r)
        fitness = rows[:, :n_f].mean(axis=1)
    return log_sl, fitness


# --------------------------------------------------------------------------
# particle iteration
# --------------------------------------------------------------------------


def normalized_weights(log_post) -> np.ndarray:
    """Self-normalized weights from unnormalized log posteriors."""
    lp = np.asarray(log_post, dtype=np.float64)
    finite = np.isfinite(lp)
    if not finite.any():
        raise CalibrationError(
            "every particle has zero synthetic likelihood; increase var_floor or widen the proposal")
    w = np.zeros_like(lp)
    w[finite] = np.exp(lp[finite] - lp[finite].max())
    return w / w.sum()


def moment_match(values, weights, shape_min: float = SHAPE_MIN, shape_cap: float = SHAPE_CAP,
                 var_floor: float = MOMENT_VAR_FLOOR) -> tuple[float, float]:
    """Beta shapes matching the weighted mean and variance of ``values``.

    The concentration ``alpha + beta`` is clamped so both shapes stay in
    ``[shape_min, shape_cap]`` while the mean is kept whenever possible.
    """
    x = np.asarray(values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    m = float(np.dot(w, x))
    v = max(float(np.dot(w, (x - m) ** 2)), var_floor)
    common = m * (1.0 - m) / v - 1.0
    lo = shape_min / min(m, 1.0 - m)
    hi = shape_cap / max(m, 1.0 - m)
    if lo <= hi:
        common = min(max(common, lo), hi)
    a = min(max(m * common, shape_min), shape_cap)
    b = min(max((1.0 - m) * common, shape_min), shape_cap)
    return a, b


class IterationResult(NamedTuple):
    proposal: BetaProposal
    best: Particle
    particles: list


def dynamic_iteration(proposal: BetaProposal, observed, n_particles: int, context: DynamicContext,
                      seed: int) -> IterationResult:
    """One particle update of the Beta proposal."""
    if n_particles < 2:
        raise ConfigurationError("n_particles", "need at least 2 particles")
    if proposal.shape[0] != context.schedule.n_regimes:
        raise ConfigurationError("proposal", "regime count differs from the schedule")
    g = make_rng(seed, "proposal-draws")
    thetas = proposal.sample(n_particles, g)
    log_prior = proposal.log_pdf(thetas)
    particle_seeds = [derive_seed(seed, "particle", i) for i in range(n_particles)]
    log_sl, fitness = batch_synthetic_log_likelihood(observed, thetas, context, particle_seeds, return_fitness=True)
    weights = normalized_weights(log_prior + log_sl)

    alpha = np.empty(proposal.shape)
    beta = np.empty(proposal.shape)
    for r in range(proposal.shape[0]):
        for d in range(proposal.shape[1]):
            alpha[r, d], beta[r, d] = moment_match(thetas[:, r, d], weights)
    particles = [Particle(thetas[i], float(log_prior[i]), float(log_sl[i]), float(weights[i]), float(fitness[i]))
                 for i in range(n_particles)]
    best = max(range(n_particles), key=lambda i: (log_sl[i], -i))
    return IterationResult(BetaProposal(alpha, beta), particles[best], particles)


# --------------------------------------------------------------------------
# phase driver
# --------------------------------------------------------------------------


def run_dynamic_phase(state, c_dyn: int, calibrator):
    """``c_dyn`` consecutive dynamic iterations on a calibration state.

    Each iteration re-detects regimes on the observation, moves the Beta
    proposal one step and offers the best particle (by synthetic likelihood)
    to the incumbent. Particles are simulated with the fitness seeds, so that
    particle's fitness comes out of its own replications at no extra cost.
    Cluster-wise parameters are left untouched.
    """
    for i in range(1, c_dyn + 1):
        k = state.n_dynamic_iterations
        schedule = calibrator.detect_regimes(state, k)
        if schedule.n_regimes != state.proposal.shape[0] or schedule != state.regime_schedule:
            state.set_schedule(schedule)
        ctx = calibrator.dynamic_context(state)
        observed = summary_stats(calibrator.observation.price_index, calibrator.observation.transaction_volume,
                                 schedule, ctx.n_agents)
        result = dynamic_iteration(state.proposal, observed, calibrator.fw.n_particles, ctx,
                                   calibrator.seed_for("dynamic", k))
        calibrator.count_particle_simulations(calibrator.fw.n_particles * ctx.n_replications)
        state.proposal = result.proposal
        state.n_dynamic_iterations += 1
        best = result.best
        fitness = best.fitness if math.isfinite(best.fitness) else calibrator.evaluate(
            best.theta, state.best_het, schedule)
        state.offer(best.theta, state.best_het, fitness, schedule)
        calibrator.log_particles(state, k, result)
        calibrator.record(state, "dynamic", i)
    return state
