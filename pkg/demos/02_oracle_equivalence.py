"""Segment convolution is a 4D convolution with a diagonal kernel.

Place each channel's L taps on the diagonal of a (C, C, L, 1, 1, 1) kernel and
a brute-force convolution over (U, T, H, W) reproduces DSA's output. The
brute-force loop below shares no code with the fast path, so agreement is a
real check.

Run: python3 demos/02_oracle_equivalence.py
"""

import numpy as np

from segagg import Tensor, conv4d, embed_dsa_kernel, segment_conv
from segagg.oracle import check_cell, sweep_grid

rng = np.random.default_rng(1)

v = Tensor(rng.uniform(-1, 1, size=(1, 3, 4, 2, 2, 2)))
k = rng.uniform(size=(1, 3, 3))
k = Tensor(k / k.sum(axis=2, keepdims=True))

fast = segment_conv(v, k)
big = embed_dsa_kernel(k)
slow = conv4d(v, big)
print("embedded kernel shape:", big.shape)
print("non-zero entries:", np.count_nonzero(big.data), "of", big.size)
print("max |difference|:", np.abs(fast.data - slow.data).max())

# %% The acceptance sweep: every small shape, five draws each.
cells = sweep_grid()
worst = max(check_cell(c) for c in cells)
print(f"{len(cells)} cells, worst deviation {worst:.1e}")

# %% A dense 4D kernel mixes channels and frames too; DSA is the cheap special case.
dense = Tensor(rng.normal(size=(3, 3, 3, 3, 3, 3)))
print("dense 4D kernel weights:", dense.size, " DSA taps per sample:", k.size)
