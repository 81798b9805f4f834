import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logsumexp
from scipy.stats import norm

from abmcal.abm import generate_ground_truth
from abmcal.errors import ConfigurationError, DomainError
from abmcal.metrics import permutation_accuracy
from abmcal.regimes import (HmmModel, RegimeSchedule, align_schedule, bic, canonical_schedule, detect_regimes,
                            fit_hmm, log_likelihood, log_returns, path_log_probability, posteriors,
                            select_n_regimes, viterbi, viterbi_with_logp)
from conftest import run_python


def random_model(g, r):
    pi = g.dirichlet(np.ones(r))
    A = g.dirichlet(np.ones(r), size=r)
    return HmmModel(pi, A, g.normal(0, 1, r), g.uniform(0.3, 1.5, r))


def path_logp_oracle(model, x, path):
    lp = math.log(model.initial_probs[path[0]]) + norm.logpdf(x[0], model.emission_means[path[0]],
                                                               model.emission_stds[path[0]])
    for t in range(1, len(x)):
        lp += math.log(model.transition_matrix[path[t - 1], path[t]])
        lp += norm.logpdf(x[t], model.emission_means[path[t]], model.emission_stds[path[t]])
    return lp


def two_block_series(seed=0):
    g = np.random.default_rng(seed)
    return np.concatenate([g.normal(0, 0.1, 100), g.normal(5, 0.1, 100)])


# schedules ---------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=60))
def test_segments_round_trip(labels):
    s = RegimeSchedule(np.array(labels), 4)
    assert RegimeSchedule.from_segments(s.segments, 4) == s
    assert RegimeSchedule.from_json(s.to_json()) == s


def test_segments_validation():
    with pytest.raises(ConfigurationError):
        RegimeSchedule.from_segments([(1, 5, 0)])
    with pytest.raises(ConfigurationError):
        RegimeSchedule.from_segments([(0, 5, 0), (6, 9, 1)])
    with pytest.raises(ConfigurationError):
        RegimeSchedule.from_segments([(0, 5, 0), (5, 9, 0)])


def test_canonical_and_align():
    s = canonical_schedule(np.array([2, 2, 0, 0, 1, 1, 2]))
    assert s.labels.tolist() == [0, 0, 1, 1, 2, 2, 0]
    ref = RegimeSchedule(np.array([1, 1, 0, 0, 2, 2, 1]))
    assert align_schedule(s, ref) == ref


def test_log_returns_first_zero():
    r = log_returns([1.0, math.e, 1.0])
    assert r.tolist() == pytest.approx([0.0, 1.0, -1.0])


# likelihood --------------------------------------------------------------------


def test_single_state_single_obs():
    m = HmmModel([1.0], [[1.0]], [0.0], [1.0])
    assert log_likelihood(m, [0.0]) == pytest.approx(-0.918939, abs=1e-6)


@pytest.mark.parametrize("seed", range(6))
def test_log_likelihood_path_sum_oracle(seed):
    g = np.random.default_rng(seed)
    r = 2 + seed % 2
    t = 4 + seed % 5
    m = random_model(g, r)
    x = g.normal(0, 1, t)
    brute = logsumexp([path_logp_oracle(m, x, p) for p in itertools.product(range(r), repeat=t)])
    assert log_likelihood(m, x) == pytest.approx(brute, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32), t=st.integers(1, 20))
def test_appending_never_increases_when_density_below_one(seed, t):
    g = np.random.default_rng(seed)
    m = random_model(g, 2)
    m.emission_stds = np.maximum(m.emission_stds, 1 / math.sqrt(2 * math.pi))
    x = g.normal(0, 1, t + 1)
    assert log_likelihood(m, x) <= log_likelihood(m, x[:-1]) + 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32))
def test_posteriors_normalized(seed):
    g = np.random.default_rng(seed)
    m = random_model(g, 3)
    p = posteriors(m, g.normal(0, 1, 50))
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_non_finite_series_rejected():
    m = HmmModel([1.0], [[1.0]], [0.0], [1.0])
    with pytest.raises(DomainError):
        log_likelihood(m, [0.0, np.nan])


# fitting -----------------------------------------------------------------------


def test_single_state_mle():
    x = np.random.default_rng(2).normal(1.5, 0.7, 80)
    m = fit_hmm(x, 1)
    assert m.emission_means[0] == pytest.approx(x.mean(), abs=1e-12)
    assert m.emission_stds[0] == pytest.approx(x.std(ddof=0), abs=1e-12)


def test_two_block_recovery():
    x = two_block_series()
    m = fit_hmm(x, 2)
    assert sorted(m.emission_means) == pytest.approx([0.0, 5.0], abs=0.2)
    labels = viterbi(m, x).labels
    truth = np.repeat([0, 1], 100)
    assert permutation_accuracy(labels, truth) >= 0.95


@pytest.mark.parametrize("seed", range(3))
def test_em_trace_non_decreasing(seed):
    g = np.random.default_rng(seed)
    x = np.concatenate([g.normal(0, 1, 60), g.normal(2, 0.5, 60), g.normal(-1, 2, 60)])
    m = fit_hmm(x, 3, tol=0.0, max_iter=60)
    assert np.all(np.diff(m.trace) >= -1e-8)


def test_fit_too_short():
    with pytest.raises(DomainError):
        fit_hmm([0.1, 0.2], 3)
    with pytest.raises(ConfigurationError):
        fit_hmm([0.1, 0.2], 0)


# decoding ----------------------------------------------------------------------


def test_viterbi_single_state():
    m = HmmModel([1.0], [[1.0]], [0.0], [1.0])
    s = viterbi(m, np.random.default_rng(0).normal(size=20))
    assert np.all(s.labels == 0) and len(s.segments) == 1


@pytest.mark.parametrize("seed", range(5))
def test_viterbi_brute_force(seed):
    g = np.random.default_rng(seed)
    m = HmmModel([0.5, 0.5], [[0.8, 0.2], [0.3, 0.7]], [-2.0, 2.0], [1.0, 1.0])
    x = g.normal(0, 2.5, 6)
    paths = list(itertools.product(range(2), repeat=6))
    scores = [path_logp_oracle(m, x, p) for p in paths]
    best = paths[int(np.argmax(scores))]
    path, logp = viterbi_with_logp(m, x)
    assert tuple(path) == best
    assert logp == pytest.approx(max(scores), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32))
def test_viterbi_beats_random_paths(seed):
    g = np.random.default_rng(seed)
    m = random_model(g, 3)
    x = g.normal(0, 1, 25)
    path, logp = viterbi_with_logp(m, x)
    assert path_log_probability(m, x, path) == pytest.approx(logp, abs=1e-9)
    for _ in range(20):
        other = g.integers(0, 3, 25)
        assert path_log_probability(m, x, other) <= logp + 1e-9


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32))
def test_permutation_equivalence(seed):
    g = np.random.default_rng(seed)
    m = random_model(g, 3)
    x = g.normal(0, 1, 30)
    perm = g.permutation(3)
    a = viterbi(m, x).labels
    b = viterbi(m.permuted(perm), x).labels
    # state i of the permuted model is state perm[i] of the original
    assert np.array_equal(perm[b], a)


# selection ---------------------------------------------------------------------


def test_bic_selects_two_blocks():
    x = two_block_series(1)
    r, table = select_n_regimes(x)
    assert r == 2
    assert table[2] == pytest.approx(bic(fit_hmm(x, 2, n_starts=3), x))


def test_detect_regimes_on_scenario():
    cfg, obs = generate_ground_truth("default", 0)
    det = detect_regimes(obs.price_index, n_regimes=3, seed=0)
    assert det.schedule.n_ticks == 300
    assert permutation_accuracy(det.schedule.labels, cfg.regime_schedule.labels) >= 0.9
    again = detect_regimes(obs.price_index, n_regimes=3, seed=0)
    assert again.schedule == det.schedule


_HMM_DIGEST = """
import numpy as np
from abmcal.regimes import fit_hmm, viterbi_with_logp
g = np.random.default_rng(0)
x = np.concatenate([g.normal(0, 1, 50), g.normal(3, 0.5, 50)])
m = fit_hmm(x, 2, n_starts=2)
p, lp = viterbi_with_logp(m, x)
print(repr((m.trace[-1], float(lp), p.tolist(), m.emission_means.tolist())))
"""


def test_numpy_fallback_matches_jit():
    a = run_python(_HMM_DIGEST, ABM_CAL_DISABLE_JIT="0")
    b = run_python(_HMM_DIGEST, ABM_CAL_DISABLE_JIT="1")
    ta, tb = eval(a), eval(b)
    assert ta[2] == tb[2]
    assert ta[0] == pytest.approx(tb[0], abs=1e-9)
    assert ta[1] == pytest.approx(tb[1], abs=1e-9)
    assert ta[3] == pytest.approx(tb[3], abs=1e-9)
