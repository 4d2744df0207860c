"""The whole pipeline on the 5000-digit MNIST sample, in about a minute.

1. pretrain a unit-norm 784-256-128-10 MLP
2. prune 30% -> 70% with ternary reinitialization after every round
3. train with ternary forward weights while a per-layer threshold grows
4. write the compressed model file

Needs mlxtend for the bundled digits (pip install mlxtend).
"""

import json
import sys
import tempfile
from pathlib import Path

from hyperquant.data import export_mnist_sample
from hyperquant.experiment import load_config, read_metrics_csv, run

root = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="hq-desk-"))
data = export_mnist_sample(root / "mnist")
config = Path(__file__).resolve().parents[1] / "configs" / "desk.toml"
out = run(load_config(config, data=str(data), out=str(root / "run")))

summary = json.loads((out / "summary.json").read_text())
print(f"full precision   {summary['baseline_accuracy']:.3f}")
print(f"after pruning    {summary['preprocess_accuracy']:.3f}  D = {summary['preprocess_distance']:.4f}")
print(f"ternary          {summary['quantized_accuracy']:.3f}  sparsity {summary['sparsity']:.3f}")
print(f"model file       {summary['file_bytes']} bytes ({summary['ratio']:.1f}x smaller than float32)")

rows = read_metrics_csv(out / "metrics.csv")
print("\nthreshold per quantize epoch (fc1, fc2):")
deltas = {}
for r in rows:
    if r["phase"] == "quantize" and r["layer"] != "model":
        deltas.setdefault(int(r["epoch"]), []).append(float(r["delta"]))
for epoch, d in sorted(deltas.items()):
    print(f"  {epoch:2d}  " + "  ".join(f"{v:.5f}" for v in d))
print(f"\nartifacts in {out}")
