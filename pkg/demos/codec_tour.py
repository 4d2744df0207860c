"""How a sparse ternary layer turns into a few kilobytes.

Signs are read three at a time, giving 27 possible triples.  In a sparse
layer (0, 0, 0) dominates, so a Huffman code spends about one bit on it and
longer codes on the rare patterns.  gzip wraps the whole container.
"""

import numpy as np

from hyperquant.codec import (build_codebook, compression_report, deserialize_model, encode,
                              pack_ternary, serialize_model, triple_of)
from hyperquant.quant import reinitialize
from hyperquant.sphere import build_mlp

rng = np.random.default_rng(1)
model = build_mlp((784, 256, 128, 10), rng, exempt_first=False, exempt_last=True)
for layer in model.quantizable():
    keep = rng.random(layer.shape) >= 0.8
    keep[0] = True  # no dead columns
    layer.mask = keep
    layer.V = reinitialize(layer.W, keep)
    layer.quantized = True

stream = pack_ternary(model)
cb = build_codebook(stream)
print(f"{stream.symbols.size} ternary symbols, {stream.padding} padding")
print("most frequent triples:")
for s in np.argsort(-cb.frequencies)[:6]:
    print(f"  {str(triple_of(int(s))):12} freq {cb.frequencies[s]:6d}  code {cb.code_string(int(s))}")

payload, nbits = encode(stream, cb)
entropy = -sum(p * np.log2(p) for p in cb.frequencies[cb.frequencies > 0] / cb.frequencies.sum())
print(f"Huffman: {nbits / stream.symbols.size:.3f} bits/weight "
      f"(triple entropy {entropy / 3:.3f}, naive 2-bit packing 2.000)")

blob = serialize_model(model)
rep = compression_report(blob)
print(f"file: {rep['file_bytes']} bytes, dense float32 copy {rep['dense32_bytes']} bytes, "
      f"ratio {rep['ratio']:.1f}x")
for row in rep["layers"]:
    print(f"  {row['layer']} {row['rows']}x{row['cols']} {row['kind']:8} {row['raw_bytes']:9.0f} bytes before gzip")

back = deserialize_model(blob)
x = rng.random((784, 5))
x /= np.linalg.norm(x, axis=0)
print("reloaded logits differ by at most", float(np.abs(back.forward(x) - model.forward(x)).max()),
      "(float16 classifier)")
