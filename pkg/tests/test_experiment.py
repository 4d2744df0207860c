import json

import numpy as np
import pytest

from hyperquant.codec import serialize_model
from hyperquant.data import Split, load_idx_dataset
from hyperquant.experiment import (ExperimentConfig, evaluate, load_checkpoint, load_config,
                                   read_metrics_csv, run, save_checkpoint)
from hyperquant.numerics import make_rng
from hyperquant.quant import reinitialize
from hyperquant.sphere import build_mlp
from hyperquant.trainer import MetricsLog, accuracy

from conftest import write_template_digits


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def full_run(tiny_config, tmp_path):
    return run(load_config(tiny_config, out=str(tmp_path / "run")))


def test_config_sections(tiny_config):
    cfg = load_config(tiny_config, seed=9, hq={"r_high": 0.7, "step": None})
    assert cfg.sizes == (784, 24, 10)
    assert cfg.seed == 9 and cfg.hq.seed == 9
    assert cfg.hq.r_high == 0.7 and cfg.hq.step == 0.15
    assert not cfg.exempt_first and cfg.exempt_last


def test_config_rejects_unknown_keys(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[model]\nwidth = 3\n")
    with pytest.raises(ValueError, match="width"):
        load_config(bad)
    bad.write_text("[hq]\nr_low = 0.9\n")
    with pytest.raises(ValueError):
        load_config(bad)


def test_run_id_ignores_output_dir():
    assert ExperimentConfig(out="a").run_id == ExperimentConfig(out="b").run_id
    assert ExperimentConfig(seed=1).run_id != ExperimentConfig(seed=2).run_id


def test_run_artifacts(full_run):
    names = set(tree(full_run))
    for f in ("config.json", "metrics.csv", "metrics_pretrain.csv", "metrics_preprocess.csv",
              "metrics_quantize.csv", "checkpoints/pretrain.npz", "checkpoints/preprocess.npz",
              "checkpoints/quantize.npz", "model.hqt", "report.json", "summary.json", "timing.csv"):
        assert f in names
    summary = json.loads((full_run / "summary.json").read_text())
    for key in ("baseline_accuracy", "quantized_accuracy", "distance", "sparsity", "file_bytes", "ratio"):
        assert key in summary
    rows = read_metrics_csv(full_run / "metrics.csv")
    assert list(rows[0]) == list(MetricsLog.FIELDS)
    phases = [r["phase"] for r in rows]
    assert phases == sorted(phases, key=["pretrain", "preprocess", "quantize"].index)
    for phase in ("pretrain", "preprocess", "quantize"):
        epochs = [int(r["epoch"]) for r in rows if r["phase"] == phase and r["layer"] == "model"]
        assert epochs == sorted(epochs)


def test_rerun_is_byte_identical(full_run, tiny_config, tmp_path):
    again = run(load_config(tiny_config, out=str(tmp_path / "again")))
    a, b = tree(full_run), tree(again)
    for f in a:
        if f not in ("timing.csv", "config.json"):
            assert a[f] == b[f], f


def test_phase_by_phase_resume_matches(full_run, tiny_config, tmp_path):
    cfg = load_config(tiny_config, out=str(tmp_path / "steps"))
    for phase in ("pretrain", "preprocess", "quantize", "compress"):
        out = run(cfg, phase)
    a, b = tree(full_run), tree(out)
    for f in ("metrics.csv", "model.hqt", "checkpoints/quantize.npz"):
        assert a[f] == b[f]


def test_compress_phase_alone(full_run, tiny_config):
    (full_run / "model.hqt").unlink()
    (full_run / "report.json").unlink()
    before = tree(full_run)
    run(load_config(tiny_config, out=str(full_run)), "compress")
    after = tree(full_run)
    assert set(after) - set(before) == {"model.hqt", "report.json"}
    for f in before:
        if f not in ("config.json", "summary.json"):
            assert before[f] == after[f], f


def test_missing_checkpoint(tiny_config, tmp_path):
    with pytest.raises(FileNotFoundError, match="pretrain"):
        run(load_config(tiny_config, out=str(tmp_path / "empty")), "preprocess")


def test_phase_errors_carry_context(tiny_config, tmp_path):
    cfg = load_config(tiny_config, out=str(tmp_path / "dead"), hq={"r_high": 0.98, "reinit_rounds": 1})
    cfg.sizes, cfg.exempt_first, cfg.exempt_last = (784, 2, 10), True, False
    with pytest.raises(RuntimeError, match="phase 'preprocess' failed"):
        run(cfg)


def test_evaluate_matches_in_memory(full_run, digits_dir):
    model, _ = load_checkpoint(full_run / "checkpoints" / "quantize.npz")
    _, test = load_idx_dataset(digits_dir)
    summary = json.loads((full_run / "summary.json").read_text())
    acc = evaluate(full_run / "model.hqt", digits_dir)
    assert acc == accuracy(model, test.X, test.y) == summary["quantized_accuracy"]


def test_random_model_is_chance(tmp_path):
    _, test = load_idx_dataset(write_template_digits(tmp_path / "d", n_train=10, n_test=2000, seed=5))
    accs = []
    for seed in range(20):
        model = build_mlp((784, 24, 10), make_rng(seed), exempt_first=False, exempt_last=True)
        for layer in model.quantizable():
            layer.V = reinitialize(layer.W)
            layer.quantized = True
        path = tmp_path / f"r{seed}.hqt"
        path.write_bytes(serialize_model(model))
        accs.append(evaluate(path, test))
    assert abs(np.mean(accs) - 0.10) <= 0.02


def test_evaluate_empty_dataset(full_run):
    empty = Split(X=np.zeros((784, 0)), y=np.zeros(0, dtype=np.int64))
    with pytest.raises(ValueError, match="empty"):
        evaluate(full_run / "model.hqt", empty)


def test_checkpoint_roundtrip(tmp_path):
    model = build_mlp((6, 5, 3), make_rng(0))
    model.layers[1].mask = np.ones((5, 3), bool)
    model.layers[1].delta = 0.25
    path = save_checkpoint(tmp_path / "c.npz", model, {"note": 1})
    back, meta = load_checkpoint(path)
    assert meta == {"note": 1}
    x = make_rng(1).normal(size=(6, 4))
    assert np.array_equal(model.forward(x), back.forward(x))
    assert back.layers[1].delta == 0.25
