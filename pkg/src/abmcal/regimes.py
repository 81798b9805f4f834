"""Temporal regime detection with a Gaussian-emission hidden Markov model.

The model is fit by Baum-Welch on per-tick log-returns of the price index and
decoded with Viterbi. Regimes are the units over which dynamic parameters are
allowed to vary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import _kernels
from .errors import ConfigurationError, DomainError
from .seeding import rng as make_rng

STD_FLOOR = 1e-4
SELF_TRANSITION_INIT = 0.9
_LOG_2PI = math.log(2.0 * math.pi)


# --------------------------------------------------------------------------
# schedules
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RegimeSchedule:
    """Per-tick regime labels.

    ``n_regimes`` defaults to ``max(label) + 1``; it may be larger when a
    model state never occurs on the decoded path.
    """

    labels: np.ndarray
    n_regimes: int = 0

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or labels.size == 0:
            raise ConfigurationError("regime_schedule.labels", "must be a non-empty 1-d series")
        if labels.min() < 0:
            raise ConfigurationError("regime_schedule.labels", "labels must be non-negative")
        n = int(self.n_regimes) or int(labels.max()) + 1
        if labels.max() >= n:
            raise ConfigurationError("regime_schedule.n_regimes", "smaller than the largest label")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "n_regimes", n)

    def __eq__(self, other):
        if not isinstance(other, RegimeSchedule):
            return NotImplemented
        return self.n_regimes == other.n_regimes and np.array_equal(self.labels, other.labels)

    @property
    def n_ticks(self) -> int:
        return int(self.labels.size)

    @property
    def segments(self) -> list[tuple[int, int, int]]:
        """Run-length encoding as (start, end_exclusive, label) triples."""
        lab = self.labels
        cuts = np.flatnonzero(np.diff(lab)) + 1
        starts = np.concatenate(([0], cuts))
        ends = np.concatenate((cuts, [lab.size]))
        return [(int(s), int(e), int(lab[s])) for s, e in zip(starts, ends)]

    @classmethod
    def from_segments(cls, segments, n_regimes: int = 0) -> "RegimeSchedule":
        segs = [tuple(int(v) for v in s) for s in segments]
        if not segs or segs[0][0] != 0:
            raise ConfigurationError("regime_schedule.segments", "must start at tick 0")
        parts = []
        for k, (s, e, lab) in enumerate(segs):
            if e <= s:
                raise ConfigurationError("regime_schedule.segments", f"empty segment {k}")
            if k and segs[k - 1][1] != s:
                raise ConfigurationError("regime_schedule.segments", "segments must be contiguous")
            if k and segs[k - 1][2] == lab:
                raise ConfigurationError("regime_schedule.segments", "adjacent segments share a label")
            parts.append(np.full(e - s, lab, dtype=np.int64))
        return cls(np.concatenate(parts), n_regimes)

    @classmethod
    def constant(cls, n_ticks: int) -> "RegimeSchedule":
        return cls(np.zeros(n_ticks, dtype=np.int64))

    def to_json(self) -> dict:
        return {"n_regimes": self.n_regimes, "segments": [list(s) for s in self.segments]}

    @classmethod
    def from_json(cls, d: dict) -> "RegimeSchedule":
        if "labels" in d:
            return cls(np.asarray(d["labels"]), d.get("n_regimes", 0))
        return cls.from_segments(d["segments"], d.get("n_regimes", 0))


def canonical_schedule(labels: np.ndarray) -> RegimeSchedule:
    """Relabel so regimes are numbered in order of first appearance."""
    labels = np.asarray(labels, dtype=np.int64)
    _, first = np.unique(labels, return_index=True)
    order = labels[np.sort(first)]
    remap = np.empty(labels.max() + 1, dtype=np.int64)
    remap[order] = np.arange(order.size)
    return RegimeSchedule(remap[labels])


def align_schedule(new: RegimeSchedule, reference: RegimeSchedule) -> RegimeSchedule:
    """Permute ``new``'s labels to agree with ``reference`` as often as possible."""
    if new.n_regimes != reference.n_regimes or new.n_ticks != reference.n_ticks:
        return new
    k = new.n_regimes
    overlap = np.zeros((k, k))
    np.add.at(overlap, (new.labels, reference.labels), 1)
    rows, cols = linear_sum_assignment(-overlap)
    remap = np.empty(k, dtype=np.int64)
    remap[rows] = cols
    return RegimeSchedule(remap[new.labels], k)


def log_returns(prices) -> np.ndarray:
    """Per-tick log-returns; the first tick's return is 0."""
    p = np.asarray(prices, dtype=np.float64)
    out = np.zeros_like(p)
    out[1:] = np.diff(np.log(p))
    return out


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


@dataclass(eq=False)
class HmmModel:
    initial_probs: np.ndarray
    transition_matrix: np.ndarray
    emission_means: np.ndarray
    emission_stds: np.ndarray
    # log-likelihood after each EM iteration (empty for hand-built models)
    trace: list = field(default_factory=list)

    def __post_init__(self):
        self.initial_probs = np.asarray(self.initial_probs, dtype=np.float64)
        self.transition_matrix = np.asarray(self.transition_matrix, dtype=np.float64)
        self.emission_means = np.asarray(self.emission_means, dtype=np.float64)
        self.emission_stds = np.asarray(self.emission_stds, dtype=np.float64)

    @property
    def n_states(self) -> int:
        return int(self.emission_means.size)

    def validate(self, std_floor: float = 0.0) -> None:
        r = self.n_states
        if self.initial_probs.shape != (r,) or self.transition_matrix.shape != (r, r):
            raise ConfigurationError("hmm", "inconsistent state dimensions")
        if abs(self.initial_probs.sum() - 1.0) > 1e-9 or np.any(self.initial_probs < 0):
            raise ConfigurationError("hmm.initial_probs", "must lie on the simplex")
        if np.any(np.abs(self.transition_matrix.sum(axis=1) - 1.0) > 1e-9):
            raise ConfigurationError("hmm.transition_matrix", "rows must sum to 1")
        if np.any(self.emission_stds <= 0) or np.any(self.emission_stds < std_floor):
            raise ConfigurationError("hmm.emission_stds", "below the std floor")

    def permuted(self, perm) -> "HmmModel":
        """Model whose state ``i`` is this model's state ``perm[i]``."""
        p = np.asarray(perm)
        return HmmModel(self.initial_probs[p], self.transition_matrix[np.ix_(p, p)],
                        self.emission_means[p], self.emission_stds[p])

    @property
    def n_free_parameters(self) -> int:
        r = self.n_states
        return (r - 1) + r * (r - 1) + 2 * r

    def to_json(self) -> dict:
        return {
            "initial_probs": self.initial_probs,
            "transition_matrix": self.transition_matrix,
            "emission_means": self.emission_means,
            "emission_stds": self.emission_stds,
        }

    @classmethod
    def from_json(cls, d: dict) -> "HmmModel":
        return cls(d["initial_probs"], d["transition_matrix"], d["emission_means"], d["emission_stds"])


def _check_series(series) -> np.ndarray:
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise DomainError("series must be a non-empty 1-d array")
    if not np.all(np.isfinite(x)):
        raise DomainError("series contains non-finite values")
    return x


def _emission_logpdf(x, means, stds):
    z = (x[:, None] - means[None, :]) / stds[None, :]
    return -0.5 * (z * z) - np.log(stds)[None, :] - 0.5 * _LOG_2PI


def _ensure_contiguous(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def log_likelihood(model: HmmModel, series) -> float:
    """Series log-likelihood by the scaled forward recursion."""
    x = _check_series(series)
    for arr in (model.initial_probs, model.transition_matrix, model.emission_means, model.emission_stds):
        if not np.all(np.isfinite(arr)):
            raise DomainError("model contains non-finite values")
    log_b = _ensure_contiguous(_emission_logpdf(x, model.emission_means, model.emission_stds))
    _, log_c = _kernels.forward_scaled(log_b, _ensure_contiguous(model.initial_probs),
                                       _ensure_contiguous(model.transition_matrix))
    return float(log_c.sum())


def posteriors(model: HmmModel, series) -> np.ndarray:
    """Per-tick state posteriors (T, R) from forward-backward."""
    x = _check_series(series)
    log_b = _ensure_contiguous(_emission_logpdf(x, model.emission_means, model.emission_stds))
    A = _ensure_contiguous(model.transition_matrix)
    alpha, log_c = _kernels.forward_scaled(log_b, _ensure_contiguous(model.initial_probs), A)
    beta = _kernels.backward_scaled(log_b, A, log_c)
    g = alpha * beta
    return g / g.sum(axis=1, keepdims=True)


def _initial_model(x: np.ndarray, n_states: int, std_floor: float) -> HmmModel:
    q = (np.arange(n_states) + 0.5) / n_states
    means = np.quantile(x, q)
    stds = np.full(n_states, max(float(x.std()), std_floor))
    if n_states == 1:
        A = np.ones((1, 1))
    else:
        A = np.full((n_states, n_states), (1.0 - SELF_TRANSITION_INIT) / (n_states - 1))
        np.fill_diagonal(A, SELF_TRANSITION_INIT)
    pi = np.full(n_states, 1.0 / n_states)
    return HmmModel(pi, A, means, stds)


def _em(x: np.ndarray, model: HmmModel, max_iter: int, tol: float, std_floor: float) -> HmmModel:
    pi = model.initial_probs.copy()
    A = model.transition_matrix.copy()
    mu = model.emission_means.copy()
    sd = model.emission_stds.copy()
    trace: list[float] = []
    for _ in range(max_iter):
        log_b = _ensure_contiguous(_emission_logpdf(x, mu, sd))
        alpha, log_c = _kernels.forward_scaled(log_b, pi, A)
        ll = float(log_c.sum())
        if trace and ll - trace[-1] < tol:
            trace.append(ll)
            break
        trace.append(ll)
        beta = _kernels.backward_scaled(log_b, A, log_c)
        gamma = alpha * beta
        gamma /= gamma.sum(axis=1, keepdims=True)
        xi = _kernels.xi_sum(log_b, A, alpha, beta, log_c)

        pi = gamma[0] / gamma[0].sum()
        rows = xi.sum(axis=1, keepdims=True)
        A = np.where(rows > 0, xi / np.where(rows > 0, rows, 1.0), A)
        occ = gamma.sum(axis=0)
        live = occ > 1e-12
        safe = np.where(live, occ, 1.0)
        new_mu = (gamma * x[:, None]).sum(axis=0) / safe
        new_var = (gamma * (x[:, None] - new_mu[None, :]) ** 2).sum(axis=0) / safe
        mu = np.where(live, new_mu, mu)
        sd = np.where(live, np.maximum(np.sqrt(new_var), std_floor), sd)
        A = _ensure_contiguous(A)
        pi = _ensure_contiguous(pi)
    else:
        log_b = _ensure_contiguous(_emission_logpdf(x, mu, sd))
        _, log_c = _kernels.forward_scaled(log_b, pi, A)
        trace.append(float(log_c.sum()))
    return HmmModel(pi, A, mu, sd, trace)


def fit_hmm(series, n_states: int, max_iter: int = 200, tol: float = 1e-6, seed: int = 0,
            n_starts: int = 1, std_floor: float = STD_FLOOR) -> HmmModel:
    """Fit a Gaussian HMM by Baum-Welch.

    The first start uses quantile-spaced means, the global std and a 0.9
    self-transition bias. Further starts (``n_starts > 1``) jitter the initial
    means with noise drawn from ``seed``; the start with the highest final
    log-likelihood wins. ``model.trace`` holds that start's log-likelihood per
    iteration.
    """
    x = _check_series(series)
    if n_states < 1:
        raise ConfigurationError("n_states", "must be at least 1")
    if x.size < n_states:
        raise DomainError(f"series of length {x.size} is shorter than n_states={n_states}")
    if max_iter < 1:
        raise ConfigurationError("max_iter", "must be at least 1")
    base = _initial_model(x, n_states, std_floor)
    best = _em(x, base, max_iter, tol, std_floor)
    if n_starts > 1:
        g = make_rng(seed, "hmm-starts", n_states)
        for _ in range(n_starts - 1):
            init = _initial_model(x, n_states, std_floor)
            init.emission_means = init.emission_means + g.normal(0.0, 0.5, n_states) * init.emission_stds
            cand = _em(x, init, max_iter, tol, std_floor)
            if cand.trace[-1] > best.trace[-1] + 1e-9:
                best = cand
    return best


def viterbi(model: HmmModel, series) -> RegimeSchedule:
    """Most probable state path, decoded in log space."""
    path, _ = viterbi_with_logp(model, series)
    return RegimeSchedule(path, model.n_states)


def viterbi_with_logp(model: HmmModel, series) -> tuple[np.ndarray, float]:
    x = _check_series(series)
    log_b = _ensure_contiguous(_emission_logpdf(x, model.emission_means, model.emission_stds))
    with np.errstate(divide="ignore"):
        log_pi = np.log(model.initial_probs)
        log_A = np.log(model.transition_matrix)
    path, logp = _kernels.viterbi_path(log_b, _ensure_contiguous(log_pi), _ensure_contiguous(log_A))
    return path, float(logp)


def path_log_probability(model: HmmModel, series, path) -> float:
    """Joint log-probability of a given state path and the series."""
    x = _check_series(series)
    path = np.asarray(path, dtype=np.int64)
    log_b = _emission_logpdf(x, model.emission_means, model.emission_stds)
    with np.errstate(divide="ignore"):
        lp = math.log(model.initial_probs[path[0]]) if model.initial_probs[path[0]] > 0 else -math.inf
        lp += log_b[0, path[0]]
        for t in range(1, x.size):
            a = model.transition_matrix[path[t - 1], path[t]]
            lp += (math.log(a) if a > 0 else -math.inf) + log_b[t, path[t]]
    return float(lp)


def bic(model: HmmModel, series) -> float:
    x = _check_series(series)
    return -2.0 * log_likelihood(model, x) + model.n_free_parameters * math.log(x.size)


def select_n_regimes(series, candidates=range(1, 6), seed: int = 0, n_starts: int = 3,
                     max_iter: int = 200, tol: float = 1e-6) -> tuple[int, dict[int, float]]:
    """Pick the state count with the lowest BIC; returns (R, {R: BIC})."""
    x = _check_series(series)
    table: dict[int, float] = {}
    for r in candidates:
        if r > x.size:
            continue
        m = fit_hmm(x, r, max_iter=max_iter, tol=tol, seed=seed, n_starts=n_starts)
        table[int(r)] = bic(m, x)
    if not table:
        raise DomainError("no admissible regime count")
    best = min(table, key=lambda r: (table[r], r))
    return best, table


@dataclass
class RegimeDetection:
    schedule: RegimeSchedule
    model: HmmModel
    bic_table: dict


def detect_regimes(prices, n_regimes: int | None = None, seed: int = 0, n_starts: int = 3,
                   reference: RegimeSchedule | None = None) -> RegimeDetection:
    """Fit on log-returns of ``prices`` and decode a canonical schedule.

    With ``n_regimes=None`` the count is chosen by BIC over 1..5. When a
    ``reference`` schedule with the same count is given, labels are aligned to
    it so that per-regime parameters keep their meaning across refits.
    """
    x = log_returns(prices)
    table: dict[int, float] = {}
    if n_regimes is None:
        n_regimes, table = select_n_regimes(x, seed=seed, n_starts=n_starts)
    model = fit_hmm(x, n_regimes, seed=seed, n_starts=n_starts)
    path = viterbi(model, x).labels
    schedule = canonical_schedule(path)
    if reference is not None:
        schedule = align_schedule(schedule, reference)
    return RegimeDetection(schedule, model, table)
