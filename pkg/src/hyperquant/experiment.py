"""Run orchestration: config files, phases, checkpoints, metrics and summaries."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import compression_report, deserialize_model, serialize_model, ternary_of_layer
from .data import Split, load_idx_dataset
from .geometry import cosine_distance_model
from .numerics import make_rng
from .sphere import MlpModel, SphereLayer, build_mlp
from .trainer import (PHASES, HQConfig, MetricsLog, accuracy, model_sparsity, preprocess, pretrain,
                      quantize_ternary)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

ALL_PHASES = PHASES + ("compress",)


@dataclass
class ExperimentConfig:
    data: str = "data/mnist"
    out: str = "runs/hq"
    seed: int = 0
    val_fraction: float = 0.1
    num_classes: int = 10
    sizes: tuple[int, ...] = (784, 256, 128, 10)
    hyper: bool = True
    logit_scale: float = 16.0
    exempt_first: bool = True
    exempt_last: bool = False
    gzip_level: int = 9
    hq: HQConfig = field(default_factory=HQConfig)

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if isinstance(self.hq, dict):
            self.hq = HQConfig(**self.hq)
        self.hq.seed = self.seed
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sizes"] = list(self.sizes)
        return d

    @property
    def run_id(self) -> str:
        blob = json.dumps({k: v for k, v in self.to_dict().items() if k != "out"}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


_SECTIONS = {"data": {"path": "data", "val_fraction": "val_fraction", "num_classes": "num_classes"},
             "model": {"sizes": "sizes", "hyper": "hyper", "logit_scale": "logit_scale",
                       "exempt_first": "exempt_first", "exempt_last": "exempt_last"},
             "output": {"dir": "out", "gzip_level": "gzip_level"}}


def load_config(path, **overrides) -> ExperimentConfig:
    """Read a TOML config with optional ``[data]``, ``[model]``, ``[hq]``, ``[output]`` sections."""
    raw = tomllib.loads(Path(path).read_text()) if path else {}
    kw: dict = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            for sub, v in value.items():
                if sub not in _SECTIONS[key]:
                    raise ValueError(f"unknown key [{key}].{sub}")
                kw[_SECTIONS[key][sub]] = v
        elif key == "hq":
            kw["hq"] = dict(value)
        elif key in ("seed", "out", "data"):
            kw[key] = value
        else:
            raise ValueError(f"unknown config key {key!r}")
    hq_over = overrides.pop("hq", {}) or {}
    kw.update({k: v for k, v in overrides.items() if v is not None})
    hq = dict(kw.pop("hq", {}))
    hq.update({k: v for k, v in hq_over.items() if v is not None})
    return ExperimentConfig(hq=HQConfig(**hq), **kw)


# -- data ------------------------------------------------------------------------------

def split_data(train: Split, cfg: ExperimentConfig):
    """``(X_train, y_train, X_val, y_val)`` with a seeded validation hold-out."""
    N = len(train)
    perm = make_rng(cfg.seed, 0).permutation(N)
    n_val = int(round(cfg.val_fraction * N))
    va, tr = perm[:n_val], perm[n_val:]
    if n_val == 0:
        va = tr
    return train.X[:, tr], train.y[tr], train.X[:, va], train.y[va]


# -- checkpoints -----------------------------------------------------------------------

def save_checkpoint(path, model: MlpModel, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays, layers = {}, []
    for i, l in enumerate(model.layers):
        arrays[f"V{i}"] = l.V
        if l.mask is not None:
            arrays[f"M{i}"] = l.mask
        layers.append(dict(name=l.name, activation=l.activation, normalize_weights=l.normalize_weights,
                           normalize_input=l.normalize_input, exempt=l.exempt, quantized=l.quantized,
                           delta=l.delta))
    info = dict(meta or {}, layers=layers, logit_scale=model.logit_scale)
    np.savez(path, meta=np.array(json.dumps(info)), **arrays)
    return path


def load_checkpoint(path) -> tuple[MlpModel, dict]:
    with np.load(path) as z:
        info = json.loads(str(z["meta"]))
        layers = []
        for i, spec in enumerate(info["layers"]):
            mask = z[f"M{i}"] if f"M{i}" in z.files else None
            layers.append(SphereLayer(V=z[f"V{i}"], mask=mask, **spec))
    model = MlpModel(layers, logit_scale=info["logit_scale"])
    return model, {k: v for k, v in info.items() if k not in ("layers", "logit_scale")}


# -- metrics ---------------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_metrics_csv(path, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MetricsLog.FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in MetricsLog.FIELDS])
    return path


def read_metrics_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _combine_metrics(out: Path) -> None:
    lines = []
    for i, phase in enumerate(PHASES):
        p = out / f"metrics_{phase}.csv"
        if p.exists():
            body = p.read_text().splitlines(keepends=True)
            lines.extend(body if not lines else body[1:])
    if lines:
        (out / "metrics.csv").write_text("".join(lines))


# -- pipeline --------------------------------------------------------------------------

def _checkpoint_path(out: Path, phase: str) -> Path:
    return out / "checkpoints" / f"{phase}.npz"


def _previous(out: Path, phase: str) -> tuple[MlpModel, dict]:
    idx = ALL_PHASES.index(phase)
    prev = ALL_PHASES[idx - 1]
    path = _checkpoint_path(out, prev)
    if not path.exists():
        raise FileNotFoundError(f"phase {phase!r} needs the {prev!r} checkpoint at {path}")
    return load_checkpoint(path)


def run(cfg: ExperimentConfig, phases=None, data=None) -> Path:
    """Execute the selected phases (all by default) and write their artifacts to ``cfg.out``.

    Each phase resumes from the previous phase's checkpoint when it is not
    run in the same call.  ``data`` may pass preloaded ``(train, test)`` splits.
    """
    phases = list(ALL_PHASES if phases in (None, "all") else ([phases] if isinstance(phases, str) else phases))
    for p in phases:
        if p not in ALL_PHASES:
            raise ValueError(f"unknown phase {p!r}; expected one of {ALL_PHASES}")
    phases.sort(key=ALL_PHASES.index)
    out = Path(cfg.out)
    if phases and phases[0] != "pretrain":
        prev = _checkpoint_path(out, ALL_PHASES[ALL_PHASES.index(phases[0]) - 1])
        if not prev.exists():
            raise FileNotFoundError(f"phase {phases[0]!r} needs the checkpoint {prev}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    need_data = any(p != "compress" for p in phases)
    if need_data:
        train, test = data if data is not None else load_idx_dataset(cfg.data, cfg.num_classes)
        split = split_data(train, cfg)
    model, meta = None, {}
    timings = []
    for phase in phases:
        if model is None and phase != "pretrain":
            model, meta = _previous(out, phase)
        metrics = MetricsLog(cfg.run_id)
        try:
            if phase == "pretrain":
                model = build_mlp(cfg.sizes, make_rng(cfg.seed, 4), hyper=cfg.hyper,
                                  exempt_first=cfg.exempt_first, exempt_last=cfg.exempt_last,
                                  logit_scale=cfg.logit_scale)
                pretrain(model, split, cfg.hq, metrics)
                meta["baseline_accuracy"] = accuracy(model, test.X, test.y)
            elif phase == "preprocess":
                preprocess(model, split, cfg.hq, metrics)
                meta["preprocess_accuracy"] = accuracy(model, test.X, test.y)
                meta["preprocess_distance"] = cosine_distance_model(model)
                meta["preprocess_sparsity"] = model_sparsity(model)
            elif phase == "quantize":
                model, state = quantize_ternary(model, split, cfg.hq, metrics)
                meta["quantized_accuracy"] = accuracy(model, test.X, test.y)
            else:
                _compress(model, cfg, out, meta)
        except Exception as exc:
            raise RuntimeError(f"phase {phase!r} failed: {exc}") from exc
        if phase != "compress":
            write_metrics_csv(out / f"metrics_{phase}.csv", metrics.rows)
            save_checkpoint(_checkpoint_path(out, phase), model, meta)
            timings.extend(metrics.wall_times)
    _combine_metrics(out)
    if timings:
        with (out / "timing.csv").open("a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(timings)
    _write_summary(out, model, meta)
    return out


def _compress(model: MlpModel, cfg: ExperimentConfig, out: Path, meta: dict) -> None:
    blob = serialize_model(model, level=cfg.gzip_level)
    (out / "model.hqt").write_bytes(blob)
    report = compression_report(blob)
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    meta.update(file_bytes=report["file_bytes"], ratio=report["ratio"],
                bits_per_quantized_weight=report["bits_per_quantized_weight"])


def _write_summary(out: Path, model: MlpModel | None, meta: dict) -> None:
    summary = dict(meta)
    if model is not None and model.quantizable():
        summary["distance"] = cosine_distance_model(model)
        summary["sparsity"] = model_sparsity(model)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def evaluate(model_file, dataset, num_classes: int = 10) -> float:
    """Top-1 test accuracy of a serialized model on an IDX dataset directory."""
    model = deserialize_model(Path(model_file).read_bytes())
    for layer in model.quantizable():
        ternary_of_layer(layer)
    if isinstance(dataset, Split):
        test = dataset
    else:
        _, test = load_idx_dataset(dataset, num_classes)
    return accuracy(model, test.X, test.y)
