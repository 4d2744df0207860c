"""The HQ pipeline: hyperspherical pretraining, iterative pruning with
ternary reinitialization, then STE ternary quantization with a learned
per-layer threshold."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import layer_geometry
from .numerics import LrSchedule, OptimizerState, make_rng, sgd_step, softmax_cross_entropy
from .quant import column_mask, mask as layer_mask
from .quant import reinitialize
from .sphere import DeadColumnError, MlpModel

log = logging.getLogger(__name__)

PHASES = ("pretrain", "preprocess", "quantize")


@dataclass
class HQConfig:
    r_low: float = 0.3
    r_high: float = 0.7
    step: float = 0.01
    step_schedule: str = "cosine"
    prune: bool = True
    reinit: bool = True
    reinit_rounds: int | None = None
    lr: float = 0.05
    lr_min: float = 0.0
    lr_period: int = 10
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    pretrain_epochs: int = 30
    round_epochs: int = 1
    plateau_patience: int | None = 3
    plateau_tol: float = 1e-3
    quant_epochs: int = 30
    quant_lr: float | None = None
    threshold_lr: float = 1.0
    quant_patience: int | None = None
    prune_granularity: str = "column"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.r_low < self.r_high < 1.0:
            raise ValueError(f"need 0 <= r_low < r_high < 1, got {self.r_low}, {self.r_high}")
        if not self.step > 0:
            raise ValueError(f"step must be positive, got {self.step}")
        if self.step_schedule not in ("fixed", "cosine"):
            raise ValueError(f"unknown step schedule {self.step_schedule!r}")
        if self.reinit_rounds is not None and self.reinit_rounds < 1:
            raise ValueError("reinit_rounds must be >= 1")
        if self.prune_granularity not in ("column", "layer"):
            raise ValueError(f"unknown pruning granularity {self.prune_granularity!r}")
        if self.threshold_lr < 0:
            raise ValueError("threshold_lr must be >= 0")


@dataclass
class HQState:
    phase: str = "pretrain"
    ratio: float = 0.0
    epoch: int = 0
    deltas: list[list[float]] = field(default_factory=list)
    sparsities: list[float] = field(default_factory=list)


class MetricsLog:
    """Append-only per-epoch metric rows (one per quantized layer plus a model row)."""

    FIELDS = ("run_id", "phase", "epoch", "round", "ratio", "layer", "accuracy", "loss",
              "S", "D", "sparsity", "delta", "mu_pos", "mu_neg", "Q")

    def __init__(self, run_id: str = "run"):
        self.run_id = run_id
        self.rows: list[dict] = []
        self.wall_times: list[tuple[str, int, float]] = []
        self._t0 = time.perf_counter()

    def snapshot(self, phase: str, epoch: int, model: MlpModel, *, loss: float, accuracy: float,
                 ratio: float = 0.0, round_: int = 0) -> None:
        base = dict(run_id=self.run_id, phase=phase, epoch=epoch, round=round_, ratio=ratio)
        layers = model.quantizable()
        geoms = [layer_geometry(l.W, l.name, l.delta, l.masked_raw()) for l in layers]
        for g in geoms:
            self.rows.append(dict(base, layer=g.name, accuracy=None, loss=None, S=g.similarity,
                                  D=1.0 - g.similarity, sparsity=g.sparsity, delta=g.delta,
                                  mu_pos=g.mu_pos, mu_neg=g.mu_neg, Q=g.q))
        if geoms:
            d = 1.0 - float(np.mean([g.similarity for g in geoms]))
            sp = model_sparsity(model)
        else:
            d, sp = None, None
        self.rows.append(dict(base, layer="model", accuracy=accuracy, loss=loss,
                              S=None if d is None else 1.0 - d, D=d, sparsity=sp, delta=None,
                              mu_pos=None, mu_neg=None, Q=None))
        self.wall_times.append((phase, epoch, time.perf_counter() - self._t0))

    def series(self, phase: str, layer: str, key: str) -> list:
        return [r[key] for r in self.rows if r["phase"] == phase and r["layer"] == layer]


def model_sparsity(model: MlpModel) -> float:
    layers = model.quantizable()
    zeros = sum(np.count_nonzero(l.effective_weights() == 0) for l in layers)
    total = sum(l.V.size for l in layers)
    return zeros / total if total else 0.0


def accuracy(model: MlpModel, X: np.ndarray, y: np.ndarray) -> float:
    if X.shape[1] == 0:
        raise ValueError("empty dataset")
    return float(np.mean(model.predict(X) == y))


def evaluate_loss(model: MlpModel, X: np.ndarray, y: np.ndarray, batch_size: int = 1000) -> tuple[float, float]:
    total, correct = 0.0, 0
    for i in range(0, X.shape[1], batch_size):
        logits = model.forward(X[:, i:i + batch_size])
        loss, _ = softmax_cross_entropy(logits, y[i:i + batch_size])
        total += loss * logits.shape[1]
        correct += int(np.sum(np.argmax(logits, axis=0) == y[i:i + batch_size]))
    return total / X.shape[1], correct / X.shape[1]


def _apply_masks(model: MlpModel, opt: OptimizerState) -> None:
    for layer in model.layers:
        if layer.mask is not None:
            layer.V = layer.V * layer.mask
            v = opt.velocity.get(layer.name)
            if v is not None:
                opt.velocity[layer.name] = v * layer.mask


def train_epoch(model: MlpModel, X, y, opt: OptimizerState, sched: LrSchedule, epoch: int,
                rng: np.random.Generator, batch_size: int, after_step=None) -> float:
    N = X.shape[1]
    perm = rng.permutation(N)
    nb = math.ceil(N / batch_size)
    total = 0.0
    for b in range(nb):
        idx = perm[b * batch_size:(b + 1) * batch_size]
        opt.lr = sched(epoch + b / nb)
        logits = model.forward(X[:, idx])
        loss, g = softmax_cross_entropy(logits, y[idx])
        if not math.isfinite(loss):
            raise FloatingPointError(f"loss diverged at epoch {epoch}, batch {b}")
        grads = model.backward(g)
        for layer, gV in zip(model.layers, grads):
            layer.V = sgd_step(layer.V, gV, opt, layer.name)
        if after_step is not None:
            after_step(opt)
        total += loss * idx.size
    return total / N


def _optimizer(cfg: HQConfig, lr: float | None = None) -> tuple[OptimizerState, LrSchedule]:
    lr = cfg.lr if lr is None else lr
    opt = OptimizerState(lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return opt, LrSchedule(lr_max=lr, lr_min=cfg.lr_min, period=cfg.lr_period)


def pretrain(model: MlpModel, data, cfg: HQConfig, metrics: MetricsLog | None = None,
             epochs: int | None = None) -> MlpModel:
    """Plain hyperspherical training of every layer."""
    Xtr, ytr, Xva, yva = data
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    rng = make_rng(cfg.seed, 1)
    opt, sched = _optimizer(cfg)
    for epoch in range(epochs):
        loss = train_epoch(model, Xtr, ytr, opt, sched, epoch, rng, cfg.batch_size)
        _, acc = evaluate_loss(model, Xva, yva)
        log.info("pretrain epoch %d loss %.4f val acc %.4f", epoch, loss, acc)
        if metrics is not None:
            metrics.snapshot("pretrain", epoch, model, loss=loss, accuracy=acc)
    return model


def ratio_schedule(cfg: HQConfig) -> list[float]:
    """Pruning ratios visited by the preprocessing loop; always ends at r_high."""
    if cfg.reinit_rounds is not None:
        k = cfg.reinit_rounds
    else:
        k = int(round((cfg.r_high - cfg.r_low) / cfg.step)) + 1
    if k == 1:
        ratios = [cfg.r_high]
    else:
        t = np.arange(k) / (k - 1)
        if cfg.step_schedule == "cosine":
            t = 0.5 * (1.0 - np.cos(np.pi * t))
        ratios = [round(float(cfg.r_low + (cfg.r_high - cfg.r_low) * u), 12) for u in t]
    return ratios if cfg.prune else [0.0] * len(ratios)


def preprocess(model: MlpModel, data, cfg: HQConfig, metrics: MetricsLog | None = None,
               state: HQState | None = None) -> tuple[MlpModel, list[np.ndarray]]:
    """Iterative prune -> reinitialize -> retrain over the ratio schedule.

    Masks are cumulative: an entry pruned in one round stays pruned.
    Returns the model and the final per-layer masks of quantized layers.
    """
    Xtr, ytr, Xva, yva = data
    state = state or HQState()
    state.phase = "preprocess"
    rng = make_rng(cfg.seed, 2)
    opt, sched = _optimizer(cfg)
    build_mask = column_mask if cfg.prune_granularity == "column" else layer_mask
    epoch = 0
    for rnd, r in enumerate(ratio_schedule(cfg)):
        for layer in model.quantizable():
            W = layer.W
            M = build_mask(W, r)
            if layer.mask is not None:
                M &= layer.mask
            if not M.any(axis=0).all():
                dead = int(np.flatnonzero(~M.any(axis=0))[0])
                raise DeadColumnError(f"{layer.name}: column {dead} fully pruned at ratio {r:.3f}")
            layer.mask = M
            if cfg.reinit:
                layer.V = reinitialize(W, M)
                opt.velocity.pop(layer.name, None)
        _apply_masks(model, opt)
        state.ratio = r
        best, stale = math.inf, 0
        for _ in range(cfg.round_epochs):
            loss = train_epoch(model, Xtr, ytr, opt, sched, epoch, rng, cfg.batch_size)
            val_loss, acc = evaluate_loss(model, Xva, yva)
            log.info("preprocess round %d r=%.3f epoch %d loss %.4f val acc %.4f", rnd, r, epoch, loss, acc)
            if metrics is not None:
                metrics.snapshot("preprocess", epoch, model, loss=loss, accuracy=acc, ratio=r, round_=rnd)
            epoch += 1
            if not cfg.plateau_patience:
                continue
            if val_loss < best - cfg.plateau_tol:
                best, stale = val_loss, 0
            else:
                stale += 1
                if stale >= cfg.plateau_patience:
                    break
    state.epoch = epoch
    return model, [l.mask for l in model.quantizable()]


def update_threshold(delta: float, grads: np.ndarray, M: np.ndarray | None, threshold_lr: float) -> float:
    """Grow the threshold by ``threshold_lr * |mean gradient|`` over live weights."""
    g = np.asarray(grads, dtype=np.float64)
    live = g[M] if M is not None else g.ravel()
    if live.size == 0:
        return delta
    return delta + threshold_lr * abs(float(np.mean(live)))


def quantize_ternary(model: MlpModel, data, cfg: HQConfig, metrics: MetricsLog | None = None,
                     state: HQState | None = None) -> tuple[MlpModel, HQState]:
    """STE ternary training with one learned threshold per layer.

    The threshold doubles as the pruning threshold: weights that fall to
    ``|w| <= delta`` are added to the layer's mask, so sparsity never
    decreases.  Returns the best-validation checkpoint and the traces.
    """
    Xtr, ytr, Xva, yva = data
    state = state or HQState()
    state.phase = "quantize"
    rng = make_rng(cfg.seed, 3)
    opt, sched = _optimizer(cfg, cfg.quant_lr)
    layers = model.quantizable()
    for layer in layers:
        if layer.mask is None:
            layer.mask = layer.W != 0
        layer.quantized = True

    def after_step(opt):
        for layer in layers:
            layer.delta = update_threshold(layer.delta, layer.grad_W, layer.mask, cfg.threshold_lr)
            layer.mask = layer.mask & (np.abs(layer.W) > layer.delta)
            if not layer.mask.any(axis=0).all():
                dead = int(np.flatnonzero(~layer.mask.any(axis=0))[0])
                raise DeadColumnError(f"{layer.name}: threshold {layer.delta:.4g} killed column {dead}")
        _apply_masks(model, opt)

    best_acc, best_model, stale = -1.0, None, 0
    for epoch in range(cfg.quant_epochs):
        loss = train_epoch(model, Xtr, ytr, opt, sched, epoch, rng, cfg.batch_size, after_step)
        _, acc = evaluate_loss(model, Xva, yva)
        state.deltas.append([l.delta for l in layers])
        state.sparsities.append(model_sparsity(model))
        state.epoch = epoch
        log.info("quantize epoch %d loss %.4f val acc %.4f sparsity %.4f", epoch, loss, acc, state.sparsities[-1])
        if metrics is not None:
            metrics.snapshot("quantize", epoch, model, loss=loss, accuracy=acc)
        if acc > best_acc:
            best_acc, best_model, stale = acc, copy.deepcopy(model), 0
        else:
            stale += 1
            if cfg.quant_patience and stale >= cfg.quant_patience:
                break
    return (best_model if best_model is not None else model), state
