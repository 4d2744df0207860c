"""Unit-norm ("hyperspherical") dense layers with exact gradients.

A layer stores raw parameters ``V`` and uses ``W = normalize(V * M)``, so
every live weight column sits on the unit sphere.  Layer inputs are also
scaled to unit norm, which makes every pre-activation a cosine.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .quant import ste_backward, ternary


class DeadColumnError(ValueError):
    """A weight column has no surviving entries."""


def normalize_columns(V: np.ndarray) -> np.ndarray:
    V = np.asarray(V, dtype=np.float64)
    norms = np.sqrt(np.sum(V * V, axis=0))
    dead = np.flatnonzero(norms == 0)
    if dead.size:
        raise DeadColumnError(f"column {int(dead[0])} is entirely zero ({dead.size} dead column(s))")
    return V / norms


def input_normalize(x: np.ndarray) -> np.ndarray:
    """Scale each sample column of ``x`` to unit L2 norm.

    All-zero samples have no direction; they are replaced by the uniform unit
    vector and a warning is emitted.
    """
    x = np.array(x, dtype=np.float64)
    one_d = x.ndim == 1
    if one_d:
        x = x[:, None]
    norms = np.sqrt(np.sum(x * x, axis=0))
    zero = norms == 0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} zero sample(s) replaced by the uniform unit vector",
                      RuntimeWarning, stacklevel=2)
        x[:, zero] = 1.0 / np.sqrt(x.shape[0])
        norms[zero] = 1.0
    x /= norms
    return x[:, 0] if one_d else x


def _unit_columns(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # zero columns (dead relu outputs) stay zero and pass no gradient
    norms = np.sqrt(np.sum(x * x, axis=0))
    safe = np.where(norms > 0, norms, 1.0)
    return x / safe, norms


def _project_back(u: np.ndarray, grad_u: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """Gradient through ``u = v / ||v||`` column-wise: ``(I - u u^T) g / ||v||``."""
    radial = np.sum(u * grad_u, axis=0, keepdims=True)
    safe = np.where(norms > 0, norms, np.inf)
    return (grad_u - u * radial) / safe


@dataclass
class SphereLayer:
    V: np.ndarray
    activation: str = "relu"
    mask: np.ndarray | None = None
    normalize_weights: bool = True
    normalize_input: bool = True
    exempt: bool = False
    quantized: bool = False
    delta: float = 0.0
    name: str = "layer"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=np.float64)
        if self.V.ndim != 2:
            raise ValueError(f"{self.name}: weights must be 2-D, got shape {self.V.shape}")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"{self.name}: unknown activation {self.activation!r}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.V.shape:
                raise ValueError(f"{self.name}: mask shape {self.mask.shape} != {self.V.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.V.shape

    def masked_raw(self) -> np.ndarray:
        return self.V if self.mask is None else self.V * self.mask

    @property
    def W(self) -> np.ndarray:
        """Full-precision weights seen by the quantizer."""
        raw = self.masked_raw()
        if not self.normalize_weights:
            return raw
        try:
            return normalize_columns(raw)
        except DeadColumnError as exc:
            raise DeadColumnError(f"{self.name}: {exc}") from None

    def effective_weights(self) -> np.ndarray:
        W = self.W
        return ternary(W, self.delta).values if self.quantized else W

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        n, _ = self.V.shape
        if x.ndim != 2 or x.shape[0] != n:
            raise ValueError(f"{self.name}: expected input with {n} rows, got shape {x.shape}")
        if self.normalize_input:
            xh, xnorm = _unit_columns(x)
        else:
            xh, xnorm = x, None
        raw = self.masked_raw()
        if self.normalize_weights:
            vnorm = np.sqrt(np.sum(raw * raw, axis=0))
            if np.any(vnorm == 0):
                dead = int(np.flatnonzero(vnorm == 0)[0])
                raise DeadColumnError(f"{self.name}: column {dead} is entirely zero")
            W = raw / vnorm
        else:
            vnorm, W = None, raw
        Weff = ternary(W, self.delta).values if self.quantized else W
        z = Weff.T @ xh
        y = np.maximum(z, 0.0) if self.activation == "relu" else z
        self._cache = dict(xh=xh, xnorm=xnorm, W=W, vnorm=vnorm, Weff=Weff, z=z)
        return y

    def backward(self, grad_y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(grad_V, grad_x)``; also stores the STE weight gradient in ``grad_W``."""
        if not self._cache:
            raise RuntimeError(f"{self.name}: backward called before forward")
        c = self._cache
        grad_y = np.asarray(grad_y, dtype=np.float64)
        if grad_y.shape != c["z"].shape:
            raise ValueError(f"{self.name}: grad shape {grad_y.shape} != output shape {c['z'].shape}")
        gz = grad_y * (c["z"] > 0) if self.activation == "relu" else grad_y
        grad_weff = c["xh"] @ gz.T
        grad_xh = c["Weff"] @ gz
        if self.quantized:
            grad_W = ste_backward(grad_weff, self.mask)
        else:
            grad_W = grad_weff
        self.grad_W = grad_W
        if self.normalize_weights:
            grad_V = _project_back(c["W"], grad_W, c["vnorm"])
        else:
            grad_V = grad_W
        if self.mask is not None:
            grad_V = grad_V * self.mask
        if self.normalize_input:
            grad_x = _project_back(c["xh"], grad_xh, c["xnorm"])
        else:
            grad_x = grad_xh
        return grad_V, grad_x


def sphere_forward(layer: SphereLayer, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)


def sphere_backward(layer: SphereLayer, grad_y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return layer.backward(grad_y)


@dataclass
class MlpModel:
    """Stack of sphere layers; the final output is multiplied by ``logit_scale``."""

    layers: list[SphereLayer]
    logit_scale: float = 1.0

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError(f"{a.name} outputs {a.shape[1]} features but {b.name} expects {b.shape[0]}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return self.logit_scale * x

    def backward(self, grad_logits: np.ndarray) -> list[np.ndarray]:
        g = self.logit_scale * np.asarray(grad_logits, dtype=np.float64)
        grads = []
        for layer in reversed(self.layers):
            gV, g = layer.backward(g)
            grads.append(gV)
        return grads[::-1]

    def predict(self, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        out = [np.argmax(self.forward(x[:, i:i + batch_size]), axis=0)
               for i in range(0, x.shape[1], batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def quantizable(self) -> list[SphereLayer]:
        return [layer for layer in self.layers if not layer.exempt]

    def set_quantized(self, flag: bool) -> None:
        for layer in self.quantizable():
            layer.quantized = flag

    @property
    def num_params(self) -> int:
        return sum(layer.V.size for layer in self.layers)


def build_mlp(sizes, rng: np.random.Generator, *, hyper: bool = True, exempt_first: bool = True,
              exempt_last: bool = False, logit_scale: float = 16.0) -> MlpModel:
    """relu MLP with an identity classifier, e.g. ``sizes=(784, 256, 128, 10)``."""
    sizes = list(sizes)
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    layers = []
    last = len(sizes) - 2
    for i, (n, m) in enumerate(zip(sizes, sizes[1:])):
        V = rng.standard_normal((n, m))
        if not hyper:
            V *= np.sqrt(2.0 / n)
        layers.append(SphereLayer(
            V=V if not hyper else normalize_columns(V),
            activation="identity" if i == last else "relu",
            normalize_weights=hyper, normalize_input=hyper,
            exempt=(exempt_first and i == 0) or (exempt_last and i == last),
            name=f"fc{i + 1}",
        ))
    return MlpModel(layers, logit_scale=logit_scale if hyper else 1.0)
