"""Why pruning helps ternary quantization, on one three-weight column.

A ternary column can only point along directions whose non-zero entries
share one magnitude.  The closer a unit-norm column is to such a direction,
the less quantization costs.  Removing the smallest entry moves it closer.
"""

import numpy as np

from hyperquant.geometry import cosine_similarity_column
from hyperquant.quant import prune, reinitialize, ternary


def similarity(w):
    w = w / np.linalg.norm(w)
    return cosine_similarity_column(ternary(w[:, None]).values[:, 0], w)


w = np.array([0.3, 0.2, 0.0001])
print("w           ", w, f"S = {similarity(w):.3f}")

# the tiny third weight still costs a full 1/sqrt(3) share in the ternary copy
w1 = prune(w[:, None], 1 / 3)[:, 0]
print("pruned 1/3  ", w1, f"S = {similarity(w1):.3f}")

w2 = np.array([0.3, 0.0, 0.0])
print("one survivor", w2, f"S = {similarity(w2):.3f}  (perfect, but the column says little)")

# reinitialization snaps the survivors onto their ternary counterpart
r = reinitialize((w1 / np.linalg.norm(w1))[:, None])[:, 0]
print("reinit      ", np.round(r, 4), f"S = {similarity(r):.3f}")

# the same effect over many random columns
rng = np.random.default_rng(0)
cols = rng.standard_normal((64, 2000))
cols /= np.linalg.norm(cols, axis=0)
for ratio in (0.0, 0.3, 0.5, 0.7, 0.9):
    P = prune(cols, ratio) if ratio else cols
    P = P / np.linalg.norm(P, axis=0)
    s = np.mean([similarity(P[:, j]) for j in range(P.shape[1])])
    print(f"random 64-entry columns, pruned {ratio:.0%}: mean S = {s:.3f}")
