"""Hot numeric kernels.

Every kernel has a numba path and a pure-numpy path. The two agree bit for bit:
both draw from the same counter-based generator and apply the same scalar
price update through ``math.tanh``. ``abmcal._backend.USE_NUMBA`` picks one at
import time.
"""

from __future__ import annotations

import math

import numpy as np

from ._backend import USE_NUMBA, configure_threads, njit

try:
    from numba import prange
except ImportError:  # pragma: no cover
    prange = range

# splitmix64 constants
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_STRIDE = np.uint64(0xD1B54A32D192ED03)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S11 = np.uint64(11)
_S27 = np.uint64(27)
_S30 = np.uint64(30)
_S31 = np.uint64(31)
_INV53 = 1.0 / 9007199254740992.0

# draws per agent per tick: participation, decision, pairing key
N_DRAWS = 3


# --------------------------------------------------------------------------
# counter-based generator
# --------------------------------------------------------------------------


def _mix64_np(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


_mix64 = njit(_mix64_np)


def tick_base(seed: int, tick: int) -> np.ndarray:
    """Stream root for one tick, as a length-1 uint64 array (numpy path)."""
    z = np.array([seed], dtype=np.uint64) + np.uint64(tick + 1) * np.array([_GOLDEN])
    return _mix64_np(z)


def uniforms(seed: int, tick: int, counters: np.ndarray) -> np.ndarray:
    """Uniform [0, 1) draws for the given per-tick counters (numpy path).

    Counter ``N_DRAWS * agent + k`` is draw ``k`` of ``agent`` at ``tick``.
    """
    base = tick_base(seed, tick)
    z = _mix64_np(base + counters.astype(np.uint64) * _STRIDE)
    return (z >> _S11).astype(np.float64) * _INV53


# --------------------------------------------------------------------------
# ABM simulation
# --------------------------------------------------------------------------


def _price_step(price, excess, inc, dec):
    if excess > 0.0:
        return price * (1.0 + inc * math.tanh(excess))
    if excess < 0.0:
        return price * (1.0 - dec * math.tanh(-excess))
    return price


if USE_NUMBA:
    _price_step_jit = njit(_price_step)
else:
    _price_step_jit = _price_step


@njit
def _simulate_one_jit(labels, dyn, wtp, q, income, initial_price, seed,
                      wealth, owns, price_out, vol_out):
    n = wealth.shape[0]
    n_ticks = labels.shape[0]
    buyers = np.empty(n, dtype=np.int64)
    sellers = np.empty(n, dtype=np.int64)
    bkeys = np.empty(n, dtype=np.float64)
    skeys = np.empty(n, dtype=np.float64)
    s = np.uint64(seed)
    price = initial_price
    for t in range(n_ticks):
        price_out[t] = price
        r = labels[t]
        part = dyn[r, 0]
        base = _mix64(s + np.uint64(t + 1) * _GOLDEN)
        nb = 0
        ns = 0
        for i in range(n):
            c = np.uint64(N_DRAWS * i)
            u0 = np.float64(_mix64(base + c * _STRIDE) >> _S11) * _INV53
            if u0 >= part:
                continue
            u1 = np.float64(_mix64(base + (c + np.uint64(1)) * _STRIDE) >> _S11) * _INV53
            if owns[i]:
                if u1 >= q[i]:
                    sellers[ns] = i
                    skeys[ns] = np.float64(
                        _mix64(base + (c + np.uint64(2)) * _STRIDE) >> _S11) * _INV53
                    ns += 1
            elif u1 < q[i] and wtp[i] * wealth[i] >= price:
                buyers[nb] = i
                bkeys[nb] = np.float64(
                    _mix64(base + (c + np.uint64(2)) * _STRIDE) >> _S11) * _INV53
                nb += 1
        m = min(nb, ns)
        if m > 0:
            border = np.argsort(bkeys[:nb], kind="mergesort")
            sorder = np.argsort(skeys[:ns], kind="mergesort")
            for k in range(m):
                b = buyers[border[k]]
                sl = sellers[sorder[k]]
                wealth[b] -= price
                owns[b] = True
                wealth[sl] += price
                owns[sl] = False
        vol_out[t] = m
        price = _price_step_jit(price, (nb - ns) / n, dyn[r, 1], dyn[r, 2])


def _simulate_one_np(labels, dyn, wtp, q, income, initial_price, seed,
                     wealth, owns, price_out, vol_out):
    n = wealth.shape[0]
    counters = np.arange(n, dtype=np.uint64) * np.uint64(N_DRAWS)
    price = float(initial_price)
    for t in range(labels.shape[0]):
        price_out[t] = price
        r = labels[t]
        base = tick_base(seed, t)
        u0 = (_mix64_np(base + counters * _STRIDE) >> _S11).astype(np.float64) * _INV53
        part = u0 < dyn[r, 0]
        u1 = (_mix64_np(base + (counters + np.uint64(1)) * _STRIDE) >> _S11).astype(np.float64) * _INV53
        sell = part & owns & (u1 >= q)
        buy = part & ~owns & (u1 < q) & (wtp * wealth >= price)
        bidx = np.flatnonzero(buy)
        sidx = np.flatnonzero(sell)
        m = min(bidx.size, sidx.size)
        if m > 0:
            keys = (_mix64_np(base + (counters + np.uint64(2)) * _STRIDE) >> _S11).astype(np.float64) * _INV53
            b = bidx[np.argsort(keys[bidx], kind="mergesort")[:m]]
            sl = sidx[np.argsort(keys[sidx], kind="mergesort")[:m]]
            wealth[b] -= price
            owns[b] = True
            wealth[sl] += price
            owns[sl] = False
        vol_out[t] = m
        price = _price_step(price, (bidx.size - sidx.size) / n, dyn[r, 1], dyn[r, 2])


@njit(parallel=True)
def _simulate_batch_jit(labels, dyn, wtp, q, wealth0, income, owns0, initial_price, seeds,
                        prices, vols):
    n_sims = seeds.shape[0]
    for s in prange(n_sims):
        wealth = wealth0.copy()
        owns = owns0.copy()
        _simulate_one_jit(labels, dyn[s], wtp[s], q[s], income, initial_price, seeds[s],
                          wealth, owns, prices[s], vols[s])


def _simulate_batch_np(labels, dyn, wtp, q, wealth0, income, owns0, initial_price, seeds,
                       prices, vols):
    for s in range(seeds.shape[0]):
        _simulate_one_np(labels, dyn[s], wtp[s], q[s], income, initial_price, int(seeds[s]),
                         wealth0.copy(), owns0.copy(), prices[s], vols[s])


def simulate_single(labels, dyn, wtp, q, wealth0, income, owns0, initial_price, seed):
    """Run one simulation; returns (prices, volumes, final wealth, final ownership)."""
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    n_ticks = labels.shape[0]
    wealth = np.array(wealth0, dtype=np.float64)
    owns = np.array(owns0, dtype=np.bool_)
    prices = np.empty(n_ticks, dtype=np.float64)
    vols = np.empty(n_ticks, dtype=np.int64)
    args = (labels, np.ascontiguousarray(dyn, dtype=np.float64),
            np.ascontiguousarray(wtp, dtype=np.float64), np.ascontiguousarray(q, dtype=np.float64),
            np.ascontiguousarray(income, dtype=np.float64), float(initial_price))
    if USE_NUMBA:
        _simulate_one_jit(*args, np.uint64(seed), wealth, owns, prices, vols)
    else:
        _simulate_one_np(*args, int(seed), wealth, owns, prices, vols)
    return prices, vols, wealth, owns


def simulate_batch(labels, dyn, wtp, q, wealth0, income, owns0, initial_price, seeds):
    """Run ``len(seeds)`` independent simulations.

    ``dyn`` is (S, R, 3); ``wtp`` and ``q`` are (S, N). Returns prices (S, T)
    and volumes (S, T). Each simulation depends only on its own row and seed,
    so results do not depend on the worker count.
    """
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    seeds = np.ascontiguousarray(seeds, dtype=np.uint64)
    n_sims = seeds.shape[0]
    prices = np.empty((n_sims, labels.shape[0]), dtype=np.float64)
    vols = np.empty((n_sims, labels.shape[0]), dtype=np.int64)
    args = (labels, np.ascontiguousarray(dyn, dtype=np.float64),
            np.ascontiguousarray(wtp, dtype=np.float64), np.ascontiguousarray(q, dtype=np.float64),
            np.ascontiguousarray(wealth0, dtype=np.float64),
            np.ascontiguousarray(income, dtype=np.float64),
            np.ascontiguousarray(owns0, dtype=np.bool_), float(initial_price), seeds, prices, vols)
    if USE_NUMBA:
        configure_threads()
        _simulate_batch_jit(*args)
    else:
        _simulate_batch_np(*args)
    return prices, vols


# --------------------------------------------------------------------------
# HMM recursions (single source; plain python loops when the JIT is off)
# --------------------------------------------------------------------------


@njit
def forward_scaled(log_b, pi, A):
    """Scaled forward pass. ``log_b`` is (T, R) emission log-densities.

    Returns normalized alphas (T, R) and the per-step log scale factors; the
    series log-likelihood is their sum.
    """
    n_t, n_s = log_b.shape
    alpha = np.empty((n_t, n_s))
    log_c = np.empty(n_t)
    for t in range(n_t):
        shift = log_b[t].max()
        b = np.exp(log_b[t] - shift)
        if t == 0:
            a = pi * b
        else:
            a = (alpha[t - 1] @ A) * b
        c = a.sum()
        alpha[t] = a / c
        log_c[t] = math.log(c) + shift
    return alpha, log_c


@njit
def backward_scaled(log_b, A, log_c):
    n_t, n_s = log_b.shape
    beta = np.empty((n_t, n_s))
    beta[n_t - 1] = 1.0
    for t in range(n_t - 2, -1, -1):
        shift = log_b[t + 1].max()
        b = np.exp(log_b[t + 1] - shift)
        beta[t] = (A @ (b * beta[t + 1])) * math.exp(shift - log_c[t + 1])
    return beta


@njit
def xi_sum(log_b, A, alpha, beta, log_c):
    """Expected transition counts summed over time."""
    n_t, n_s = log_b.shape
    out = np.zeros((n_s, n_s))
    for t in range(n_t - 1):
        shift = log_b[t + 1].max()
        b = np.exp(log_b[t + 1] - shift) * math.exp(shift - log_c[t + 1])
        out += np.outer(alpha[t], b * beta[t + 1]) * A
    return out


@njit
def viterbi_path(log_b, log_pi, log_A):
    n_t, n_s = log_b.shape
    delta = log_pi + log_b[0]
    back = np.zeros((n_t, n_s), dtype=np.int64)
    for t in range(1, n_t):
        new = np.empty(n_s)
        for j in range(n_s):
            best_i = 0
            best = delta[0] + log_A[0, j]
            for i in range(1, n_s):
                v = delta[i] + log_A[i, j]
                if v > best:
                    best = v
                    best_i = i
            back[t, j] = best_i
            new[j] = best + log_b[t, j]
        delta = new
    path = np.empty(n_t, dtype=np.int64)
    k = 0
    for j in range(1, n_s):
        if delta[j] > delta[k]:
            k = j
    best_logp = delta[k]
    path[n_t - 1] = k
    for t in range(n_t - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, best_logp
