"""Scoring helpers used by the calibrators and the experiment harness."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DomainError


def mape(observed, simulated) -> float:
    """Mean absolute percentage error of ``simulated`` against ``observed``."""
    o = np.asarray(observed, dtype=np.float64)
    s = np.asarray(simulated, dtype=np.float64)
    if o.shape != s.shape:
        raise DomainError(f"length mismatch: {o.shape} vs {s.shape}")
    if o.size == 0:
        raise DomainError("empty series")
    if np.any(o == 0):
        raise DomainError("observed series contains a zero entry")
    return float(np.mean(np.abs(o - s) / np.abs(o)))


def mape_rows(observed, simulated) -> np.ndarray:
    """Row-wise MAPE for a (S, T) batch against one observed series."""
    o = np.asarray(observed, dtype=np.float64)
    s = np.atleast_2d(np.asarray(simulated, dtype=np.float64))
    if s.shape[1] != o.size:
        raise DomainError("length mismatch")
    if np.any(o == 0):
        raise DomainError("observed series contains a zero entry")
    return np.mean(np.abs(s - o[None, :]) / np.abs(o)[None, :], axis=1)


def _contingency(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def permutation_accuracy(labels, truth) -> float:
    """Fraction of matching labels under the best one-to-one relabeling."""
    table = _contingency(labels, truth)
    rows, cols = linear_sum_assignment(-table)
    return float(table[rows, cols].sum()) / len(labels)


def _pairs(n):
    return n * (n - 1) / 2.0


def adjusted_rand_index(labels, truth) -> float:
    table = _contingency(labels, truth)
    n = table.sum()
    sum_ij = _pairs(table).sum()
    sum_a = _pairs(table.sum(axis=1)).sum()
    sum_b = _pairs(table.sum(axis=0)).sum()
    expected = sum_a * sum_b / _pairs(n)
    top = 0.5 * (sum_a + sum_b)
    if top == expected:
        return 1.0
    return float((sum_ij - expected) / (top - expected))
