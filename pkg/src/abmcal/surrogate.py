"""Gaussian-process surrogate and the four-strategy acquisition portfolio.

The GP uses a squared-exponential kernel on [0, 1]^dim with fitness values
standardized internally. Kernel hyperparameters are picked from a fixed grid
by log marginal likelihood. Each BO step draws one of four strategies
uniformly: a quasi-random point, the point of largest predictive variance,
the point of smallest predictive mean, or the point of largest weighted
expected improvement. The last three search a fixed candidate set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.special import ndtr

from .errors import ConfigurationError, DomainError, NumericalError
from .seeding import derive_seed, rng as make_rng

STRATEGIES = ("RandomSample", "MaxPredictiveVariance", "MinPredictiveMean", "WeightedExpectedImprovement")
N_CANDIDATES = 2048
NEIGHBOR_STEP = 0.05
N_INIT = 8
JITTER_START = 1e-10
JITTER_MAX = 1e-4

SIGNAL_GRID = np.logspace(math.log10(0.25), math.log10(4.0), 5)
LENGTH_GRID = np.logspace(math.log10(0.05), math.log10(1.0), 5)
NOISE_GRID = np.array([1e-3, 1e-2, 1e-1])

_FIRST_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71,
                 73, 79, 83, 89, 97, 101, 103, 107, 109, 113)
_SQRT_2PI = math.sqrt(2.0 * math.pi)


# --------------------------------------------------------------------------
# quasi-random points
# --------------------------------------------------------------------------


def radical_inverse(i: int, base: int) -> float:
    """Van der Corput radical inverse of ``i`` in ``base``."""
    inv = 1.0 / base
    f = inv
    out = 0.0
    while i > 0:
        i, digit = divmod(i, base)
        out += digit * f
        f *= inv
    return out


def halton(n: int, dim: int, seed: int | None = None, start: int = 1) -> np.ndarray:
    """``n`` Halton points in [0, 1)^dim, indices ``start .. start+n-1``.

    Dimension j uses the j-th prime as base. With a ``seed`` every dimension
    gets a Cranley-Patterson rotation ``(u + shift_j) mod 1`` with shifts drawn
    from the seed's stream; ``seed=None`` gives the plain sequence.
    """
    if dim > len(_FIRST_PRIMES):
        raise ConfigurationError("dim", f"at most {len(_FIRST_PRIMES)} dimensions supported")
    pts = np.array([[radical_inverse(i, _FIRST_PRIMES[j]) for j in range(dim)]
                    for i in range(start, start + n)], dtype=np.float64).reshape(n, dim)
    if seed is not None:
        shift = make_rng(seed, "halton-shift").random(dim)
        pts = np.mod(pts + shift, 1.0)
    return pts


# --------------------------------------------------------------------------
# Gaussian process
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Kernel:
    signal_variance: float
    length_scale: float
    noise_variance: float

    def __post_init__(self):
        if self.signal_variance <= 0 or self.length_scale <= 0 or self.noise_variance < 0:
            raise ConfigurationError("kernel", "hyperparameters must be positive")

    def cov(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
        return self.signal_variance * np.exp(-0.5 * d2 / self.length_scale ** 2)

    def to_json(self) -> dict:
        return {"signal_variance": self.signal_variance, "length_scale": self.length_scale,
                "noise_variance": self.noise_variance}


def kernel_grid() -> list[Kernel]:
    """The 5 x 5 x 3 hyperparameter grid (sigma_f, length, sigma_n) in scan order."""
    return [Kernel(sf ** 2, ell, sn ** 2) for sf in SIGNAL_GRID for ell in LENGTH_GRID for sn in NOISE_GRID]


def _factor(k: Kernel, x: np.ndarray) -> tuple[np.ndarray, float]:
    """Cholesky factor of K + noise I, escalating jitter on failure."""
    gram = k.cov(x, x) + k.noise_variance * np.eye(x.shape[0])
    jitter = 0.0
    while True:
        try:
            return cholesky(gram + jitter * np.eye(x.shape[0]), lower=True), jitter
        except LinAlgError:
            jitter = JITTER_START if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX * (1 + 1e-9):
                raise NumericalError("GP Cholesky failed even with maximal jitter") from None


def _log_marginal(chol: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    alpha = cho_solve((chol, True), y)
    lml = -0.5 * float(y @ alpha) - float(np.sum(np.log(np.diag(chol)))) - 0.5 * y.size * math.log(2 * math.pi)
    return lml, alpha


@dataclass(eq=False)
class SurrogateState:
    """GP training set, fitted kernel and incumbent.

    ``normalize`` standardizes fitness before fitting; it is on by default
    and can be switched off to work with raw values (and a pinned kernel).
    """

    train_inputs: np.ndarray
    train_fitness: np.ndarray
    kernel: Kernel
    normalize: bool = True
    y_mean: float = 0.0
    y_std: float = 1.0
    jitter: float = 0.0
    chol: np.ndarray | None = field(default=None, repr=False)
    alpha: np.ndarray | None = field(default=None, repr=False)
    log_marginal: float = 0.0
    context_key: tuple = ()

    @property
    def n_points(self) -> int:
        return int(self.train_fitness.size)

    @property
    def dim(self) -> int:
        return int(self.train_inputs.shape[1])

    @property
    def incumbent(self) -> tuple[np.ndarray, float]:
        i = int(np.argmin(self.train_fitness))
        return self.train_inputs[i].copy(), float(self.train_fitness[i])

    def to_json(self) -> dict:
        x, y = self.incumbent
        return {"kernel": self.kernel.to_json(), "normalize": self.normalize, "y_mean": self.y_mean,
                "y_std": self.y_std, "jitter": self.jitter, "log_marginal_likelihood": self.log_marginal,
                "n_points": self.n_points, "incumbent": {"input": x, "fitness": y}}


def gp_fit(inputs, fitness, kernel_init: Kernel | None = None, normalize: bool = True,
           optimize: bool = True) -> SurrogateState:
    """Fit the GP surrogate.

    With ``optimize`` the kernel is the grid point of largest log marginal
    likelihood (first in scan order on ties); otherwise ``kernel_init`` is
    used as given.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    y = np.asarray(fitness, dtype=np.float64).ravel()
    if x.shape[0] < 1 or x.shape[0] != y.size:
        raise DomainError("need at least one training point and matching fitness values")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DomainError("non-finite training data")
    if np.any(x < -1e-12) or np.any(x > 1 + 1e-12):
        raise DomainError("inputs must lie in [0, 1]^dim")
    if normalize:
        y_mean = float(y.mean())
        sd = float(y.std())
        y_std = sd if sd > 0 else 1.0
    else:
        y_mean, y_std = 0.0, 1.0
    ys = (y - y_mean) / y_std
    if optimize:
        candidates = kernel_grid()
    elif kernel_init is not None:
        candidates = [kernel_init]
    else:
        raise ConfigurationError("kernel_init", "required when optimize=False")
    best = None
    for k in candidates:
        try:
            chol, jitter = _factor(k, x)
        except NumericalError:
            continue
        lml, alpha = _log_marginal(chol, ys)
        if best is None or lml > best[0]:
            best = (lml, k, chol, alpha, jitter)
    if best is None:
        raise NumericalError("no kernel in the grid admits a Cholesky factorization")
    lml, k, chol, alpha, jitter = best
    return SurrogateState(x, y, k, normalize, y_mean, y_std, jitter, chol, alpha, lml)


def gp_predict_many(state: SurrogateState, points) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means and latent variances at each row of ``points``."""
    xs = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if xs.shape[1] != state.dim:
        raise DomainError(f"expected {state.dim}-dimensional points")
    kstar = state.kernel.cov(xs, state.train_inputs)
    mean = kstar @ state.alpha
    v = solve_triangular(state.chol, kstar.T, lower=True)
    var = state.kernel.signal_variance - np.sum(v * v, axis=0)
    if np.any(var < -1e-9):
        raise NumericalError(f"negative predictive variance {var.min():.3e}")
    var = np.maximum(var, 0.0)
    return state.y_mean + state.y_std * mean, state.y_std ** 2 * var


def gp_predict(state: SurrogateState, x) -> tuple[float, float]:
    m, v = gp_predict_many(state, np.atleast_2d(np.asarray(x, dtype=np.float64)))
    return float(m[0]), float(v[0])


# --------------------------------------------------------------------------
# acquisition
# --------------------------------------------------------------------------


def weighted_ei(mean, variance, best: float, w: float = 0.5):
    """Weighted expected improvement for minimization.

    ``w * (best - mean) * Phi(z) + (1 - w) * sigma * phi(z)`` with
    ``z = (best - mean) / sigma``; at ``sigma = 0`` the value is
    ``w * max(best - mean, 0)``. Works elementwise on arrays.
    """
    if not 0.0 <= w <= 1.0:
        raise DomainError(f"weight w={w} outside [0, 1]")
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(variance, dtype=np.float64)
    if np.any(var < 0):
        raise DomainError("variance must be non-negative")
    sigma = np.sqrt(var)
    imp = best - mean
    pos = sigma > 0
    safe = np.where(pos, sigma, 1.0)
    z = imp / safe
    with np.errstate(over="ignore"):
        smooth = w * imp * ndtr(z) + (1.0 - w) * safe * np.exp(-0.5 * z * z) / _SQRT_2PI
    out = np.where(pos, smooth, w * np.maximum(imp, 0.0))
    return float(out) if out.ndim == 0 else out


@dataclass
class AcquisitionChoice:
    strategy: str
    chosen_point: np.ndarray
    candidate_index: int = 0


def candidate_set(state: SurrogateState, seed: int) -> np.ndarray:
    """Seeded Halton points followed by the incumbent's coordinate neighbors."""
    dim = state.dim
    base = halton(N_CANDIDATES, dim, seed)
    x_best, _ = state.incumbent
    nbrs = []
    for j in range(dim):
        for step in (-NEIGHBOR_STEP, NEIGHBOR_STEP):
            p = x_best.copy()
            p[j] = min(max(p[j] + step, 0.0), 1.0)
            nbrs.append(p)
    return np.vstack([base, np.array(nbrs).reshape(-1, dim)])


def choose_strategy(seed: int, probabilities=None) -> int:
    p = np.full(len(STRATEGIES), 0.25) if probabilities is None else np.asarray(probabilities, dtype=np.float64)
    if p.size != len(STRATEGIES) or np.any(p < 0) or not math.isclose(p.sum(), 1.0, abs_tol=1e-9):
        raise ConfigurationError("strategy_probabilities", "need four non-negative weights summing to 1")
    u = make_rng(seed, "strategy").random()
    return int(min(np.searchsorted(np.cumsum(p), u, side="right"), len(STRATEGIES) - 1))


def propose_next(state: SurrogateState, seed: int, w: float = 0.5, probabilities=None,
                 strategy: str | None = None) -> AcquisitionChoice:
    """Pick a strategy at random (or as forced) and return its chosen point."""
    idx = choose_strategy(seed, probabilities) if strategy is None else STRATEGIES.index(strategy)
    name = STRATEGIES[idx]
    cand_seed = derive_seed(seed, "candidates")
    if name == "RandomSample":
        return AcquisitionChoice(name, halton(1, state.dim, cand_seed)[0], 0)
    cands = candidate_set(state, cand_seed)
    mean, var = gp_predict_many(state, cands)
    if name == "MaxPredictiveVariance":
        k = int(np.argmax(var))
    elif name == "MinPredictiveMean":
        k = int(np.argmin(mean))
    else:
        # score on the standardized scale so fitness units do not matter
        _, best = state.incumbent
        score = weighted_ei((mean - state.y_mean) / state.y_std, var / state.y_std ** 2,
                            (best - state.y_mean) / state.y_std, w)
        k = int(np.argmax(score))
    return AcquisitionChoice(name, cands[k].copy(), k)


# --------------------------------------------------------------------------
# phase driver
# --------------------------------------------------------------------------


def refit(state: SurrogateState | None, x, y, context_key=()) -> SurrogateState:
    if state is None:
        s = gp_fit(np.atleast_2d(x), np.atleast_1d(y))
    else:
        s = gp_fit(np.vstack([state.train_inputs, np.atleast_2d(x)]),
                   np.concatenate([state.train_fitness, np.atleast_1d(y)]), normalize=state.normalize)
    return replace(s, context_key=context_key)


def run_het_phase(state, c_het: int, calibrator):
    """Initial design (when the surrogate is cold) then ``c_het`` BO steps.

    The surrogate models fitness as a function of the cluster-wise vector
    only, so it is rebuilt whenever the dynamic parameters it was trained
    under have changed. The current incumbent seeds a rebuilt surrogate at no
    extra simulation cost, since its fitness is already known.
    """
    if c_het <= 0:
        return state
    key = calibrator.surrogate_key(state)
    if state.surrogate is not None and state.surrogate.context_key != key:
        state.surrogate = None
    if state.surrogate is None:
        state.n_surrogate_resets += 1
        state.surrogate = refit(None, calibrator.het_to_free(state.best_het), state.best_mape, key)
        calibrator.log_bo_eval(state, "Incumbent", state.best_het, state.best_mape, simulated=False)
    n_init = calibrator.fw.bo_init
    i = 0
    if state.surrogate.n_points < n_init:
        need = n_init - state.surrogate.n_points
        design = halton(need, state.surrogate.dim, calibrator.seed_for("bo-init", state.n_surrogate_resets))
        full = np.array([calibrator.free_to_het(x, state.best_het) for x in design])
        fits = calibrator.evaluate_het_batch(full, state.best_dynamic, state.best_schedule)
        reps = calibrator.fw.bo_replications
        for j, (x, h, y) in enumerate(zip(design, full, fits)):
            i += 1
            state.surrogate = refit(state.surrogate, x, y, key)
            state.offer(state.best_dynamic, h, y)
            calibrator.log_bo_eval(state, "InitialDesign", h, y)
            calibrator.record(state, "heterogeneous", i, pending=(need - 1 - j) * reps)
    w = calibrator.fw.ei_weight
    probs = calibrator.fw.strategy_probabilities
    for _ in range(c_het):
        k = state.n_bo_iterations
        choice = propose_next(state.surrogate, calibrator.seed_for("bo", k), w, probs)
        h = calibrator.free_to_het(choice.chosen_point, state.best_het)
        y = calibrator.evaluate(state.best_dynamic, h, state.best_schedule)
        state.n_bo_iterations += 1
        state.surrogate = refit(state.surrogate, choice.chosen_point, y, key)
        state.offer(state.best_dynamic, h, y)
        i += 1
        calibrator.log_bo_eval(state, choice.strategy, h, y)
        calibrator.record(state, "heterogeneous", i)
    return state
