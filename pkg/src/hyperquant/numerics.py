"""Dense numeric substrate: RNG, SGD with momentum, LR schedule, loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator keyed on ``seed`` and an optional stream path.

    Each phase of a run draws from its own stream so that resuming a phase
    from a checkpoint replays exactly the same random choices.
    """
    ss = np.random.SeedSequence([int(seed), *map(int, stream)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be >= 0, got {self.weight_decay}")


def sgd_step(params: np.ndarray, grads: np.ndarray, state: OptimizerState,
             name: str = "param") -> np.ndarray:
    """One momentum-SGD step; returns the updated parameters.

    ``v <- momentum * v + g + wd * p`` then ``p <- p - lr * v``. The velocity
    buffer is kept in ``state.velocity[name]``.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValueError(f"{name}: gradient shape {grads.shape} != parameter shape {params.shape}")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError(f"{name}: non-finite gradient")
    v = state.velocity.get(name)
    if v is None:
        v = np.zeros_like(params)
    elif v.shape != params.shape:
        raise ValueError(f"{name}: velocity shape {v.shape} != parameter shape {params.shape}")
    step = grads + state.weight_decay * params if state.weight_decay else grads
    v = state.momentum * v + step
    state.velocity[name] = v
    return params - state.lr * v


@dataclass(frozen=True)
class LrSchedule:
    lr_max: float
    lr_min: float = 0.0
    period: int = 10

    def __call__(self, t: float) -> float:
        return cosine_annealing_lr(t, self)


def cosine_annealing_lr(t: float, sched: LrSchedule) -> float:
    """Cosine annealing with warm restarts every ``sched.period`` epochs."""
    if sched.period < 1:
        raise ValueError(f"restart period must be >= 1, got {sched.period}")
    if t < 0:
        raise ValueError(f"epoch must be >= 0, got {t}")
    phase = (t % sched.period) / sched.period
    return sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (1.0 + np.cos(np.pi * phase))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of ``logits`` (classes x batch) against integer labels.

    Returns ``(loss, dloss/dlogits)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError("logits must be 2-D (classes x batch)")
    k, b = logits.shape
    if b == 0 or labels.size == 0:
        raise ValueError("empty batch")
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=0, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=0))
    cols = np.arange(b)
    loss = float(np.mean(lse - shifted[labels, cols]))
    grad = np.exp(shifted - lse)
    grad[labels, cols] -= 1.0
    grad /= b
    return loss, grad
