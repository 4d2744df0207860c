"""Ternary quantizer, magnitude threshold and pruning mask, reinitialization, STE."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TernaryWeights:
    """Sign pattern plus per-column support count.

    The reconstructed value of a live entry is ``sign / sqrt(support)``, so
    every live column has unit norm.
    """

    signs: np.ndarray
    support: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        s = self.support.astype(np.float64)
        return np.divide(1.0, np.sqrt(s), out=np.zeros_like(s), where=s > 0)

    @property
    def values(self) -> np.ndarray:
        return self.signs * self.scale

    @property
    def dead_columns(self) -> np.ndarray:
        return np.flatnonzero(self.support.reshape(-1) == 0)


def ternary(W: np.ndarray, delta: float = 0.0) -> TernaryWeights:
    """Map ``w > delta`` to +alpha, ``w < -delta`` to -alpha and the rest to 0.

    ``alpha = 1/sqrt(|I|)`` where ``|I|`` counts the surviving entries of the
    column.  Columns with no survivors get ``alpha = 0``.  A 1-D input is
    treated as a single column.
    """
    W = np.asarray(W, dtype=np.float64)
    if delta < 0:
        raise ValueError(f"threshold must be >= 0, got {delta}")
    signs = np.where(W > delta, 1, np.where(W < -delta, -1, 0)).astype(np.int8)
    support = np.count_nonzero(signs, axis=0)
    return TernaryWeights(signs=signs, support=np.asarray(support))


def threshold_percentile(W: np.ndarray, r: float) -> float:
    """Magnitude below (or at) which the ``r`` fraction of smallest entries lie."""
    if not 0.0 <= r < 1.0:
        raise ValueError(f"pruning ratio must lie in [0, 1), got {r}")
    a = np.abs(np.asarray(W, dtype=np.float64)).ravel()
    # round first so that e.g. 0.7 * 10000 does not become 7001
    k = math.ceil(round(r * a.size, 6))
    if k == 0:
        return 0.0
    return float(np.partition(a, k - 1)[k - 1])


def mask(W: np.ndarray, r: float) -> np.ndarray:
    delta = threshold_percentile(W, r)
    return np.abs(np.asarray(W)) > delta


def column_mask(W: np.ndarray, r: float) -> np.ndarray:
    """Mask pruning the smallest-magnitude entries within each column.

    Exactly ``ceil(r * n * m)`` entries are pruned in total, spread as evenly
    as possible over columns (``floor`` or ``floor + 1`` per column), so every
    column keeps about ``1 - r`` of its weights.
    """
    if not 0.0 <= r < 1.0:
        raise ValueError(f"pruning ratio must lie in [0, 1), got {r}")
    W = np.asarray(W, dtype=np.float64)
    W2 = W.reshape(W.shape[0], -1)
    n, m = W2.shape
    total = math.ceil(round(r * n * m, 6))
    base, extra = divmod(total, m)
    counts = np.full(m, base)
    counts[:extra] += 1
    order = np.argsort(np.abs(W2), axis=0, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(n)[:, None].repeat(m, axis=1), axis=0)
    return (rank >= counts).reshape(W.shape)


def prune(W: np.ndarray, r: float) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    return W * mask(W, r)


def reinitialize(W: np.ndarray, M: np.ndarray | None = None) -> np.ndarray:
    """Reset survivors to ``sign(w)/sqrt(|I|)``; pruned entries stay zero."""
    W = np.asarray(W, dtype=np.float64)
    if M is not None:
        W = W * M
    t = ternary(W, 0.0)
    dead = t.dead_columns
    if dead.size:
        raise ValueError(f"cannot reinitialize: column {int(dead[0])} has no surviving weights")
    return t.values


def ste_backward(grad_out: np.ndarray, M: np.ndarray | None) -> np.ndarray:
    """Straight-through gradient: identity on surviving entries, zero on pruned ones."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if M is None:
        return grad_out
    if M.shape != grad_out.shape:
        raise ValueError(f"mask shape {M.shape} != gradient shape {grad_out.shape}")
    return grad_out * M
