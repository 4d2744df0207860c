"""Similarity between full-precision weights and their ternary counterparts.

All layer and model measures compare ``W`` against ``ternary(W, 0)``, the
zero-threshold ternarization, so they describe how far a network is from
being ternary before any threshold is learned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quant import TernaryWeights, ternary


def cosine_similarity_column(w_hat, w) -> float:
    w_hat = np.asarray(w_hat, dtype=np.float64).ravel()
    w = np.asarray(w, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(w_hat), np.linalg.norm(w)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(w_hat @ w / (na * nb))


def column_similarities(T: TernaryWeights | np.ndarray, W: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    That = T.values if isinstance(T, TernaryWeights) else np.asarray(T, dtype=np.float64)
    if That.shape != W.shape:
        raise ValueError(f"shape mismatch: {That.shape} vs {W.shape}")
    na = np.linalg.norm(That, axis=0)
    nb = np.linalg.norm(W, axis=0)
    dead = np.flatnonzero((na == 0) | (nb == 0))
    if dead.size:
        raise ValueError(f"column {int(dead[0])} is dead; similarity undefined")
    return np.sum(That * W, axis=0) / (na * nb)


def cosine_similarity_layer(T: TernaryWeights | np.ndarray, W: np.ndarray) -> float:
    return float(np.mean(column_similarities(T, W)))


def simplified_similarity(W: np.ndarray) -> np.ndarray:
    """Per-column ``sum |w_i| / sqrt(|I|)``; equals the cosine form for unit columns."""
    W = np.asarray(W, dtype=np.float64)
    support = np.count_nonzero(W, axis=0)
    return np.abs(W).sum(axis=0) / np.sqrt(support)


def layer_similarity(W: np.ndarray) -> float:
    return cosine_similarity_layer(ternary(W, 0.0), W)


def cosine_distance(weights) -> float:
    weights = list(weights)
    if not weights:
        raise ValueError("cosine distance needs at least one quantized layer")
    return 1.0 - float(np.mean([layer_similarity(W) for W in weights]))


def cosine_distance_model(model) -> float:
    """``1 - mean layer similarity`` over the model's non-exempt layers."""
    return cosine_distance(layer.W for layer in model.quantizable())


def sparsity(W) -> float:
    W = np.asarray(W)
    if W.size == 0:
        return 0.0
    return float(np.count_nonzero(W == 0) / W.size)


def zero_drift_stats(W: np.ndarray) -> tuple[float | None, float | None, float]:
    """Mean positive weight, mean negative weight, and reference magnitude Q.

    Q is the common magnitude ``1/sqrt(mean |I|)`` a freshly reinitialized
    layer would have.  A missing side returns ``None``.
    """
    W = np.asarray(W, dtype=np.float64)
    pos, neg = W[W > 0], W[W < 0]
    mu_pos = float(pos.mean()) if pos.size else None
    mu_neg = float(neg.mean()) if neg.size else None
    support = ternary(W, 0.0).support
    mean_support = float(np.mean(support))
    q = 1.0 / np.sqrt(mean_support) if mean_support > 0 else float("nan")
    return mu_pos, mu_neg, float(q)


@dataclass(frozen=True)
class LayerGeometry:
    name: str
    column_similarity: np.ndarray
    similarity: float
    sparsity: float
    mu_pos: float | None
    mu_neg: float | None
    q: float
    delta: float = 0.0


@dataclass(frozen=True)
class ModelGeometry:
    layers: list[LayerGeometry]

    @property
    def distance(self) -> float:
        return 1.0 - float(np.mean([g.similarity for g in self.layers]))

    @property
    def num_layers(self) -> int:
        return len(self.layers)


def layer_geometry(W: np.ndarray, name: str = "layer", delta: float = 0.0,
                   stored: np.ndarray | None = None) -> LayerGeometry:
    """Similarity of the unit-norm W; drift stats of `stored` when given.

    Weight decay only shrinks the stored parameters of a normalized layer,
    so that is where the drift toward zero shows up.
    """
    cols = column_similarities(ternary(W, 0.0), W)
    mu_pos, mu_neg, q = zero_drift_stats(W if stored is None else stored)
    return LayerGeometry(name=name, column_similarity=cols, similarity=float(cols.mean()),
                         sparsity=sparsity(W), mu_pos=mu_pos, mu_neg=mu_neg, q=q, delta=delta)


def model_geometry(model) -> ModelGeometry:
    layers = model.quantizable()
    if not layers:
        raise ValueError("model has no quantized layers")
    return ModelGeometry([layer_geometry(l.W, l.name, l.delta, l.masked_raw()) for l in layers])
