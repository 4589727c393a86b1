"""Dynamic segment aggregation, step by step.

A clip is cut into U snippets. Each snippet goes through the same network, so
on its own the network never sees how snippets relate. A DSA module adds that
link: it pools every channel of every snippet to one number, turns the
resulting length-U vector into a small softmax kernel, and convolves the
channel along U with it.

Run: python3 demos/01_dynamic_kernels.py
"""

import numpy as np

from segagg import DsaConfig, DsaParams, Tensor, dsa_forward, generate_kernel, pool_context, segment_conv

rng = np.random.default_rng(0)
np.set_printoptions(precision=4, suppress=True)

# %% A batch of video features, axes (N, C, U, T, H, W).
v = Tensor(rng.normal(size=(2, 16, 4, 2, 7, 7)))
cfg = DsaConfig(channels=16)  # U=4, L=3, alpha=2, beta=1/8
print(f"{cfg.split} of {cfg.channels} channels are aggregated, MLP 4 -> {cfg.hidden} -> 3")

# %% Pooling keeps one value per (sample, channel, snippet).
v1 = Tensor(v.data[:, : cfg.split])
ctx = pool_context(v1)
print("context shape", ctx.shape)

# %% The kernel generator is shared across channels; rows are convex weights.
params = DsaParams.init(cfg, rng)
k = generate_kernel(ctx, params, cfg, mode="eval")
print("kernel for sample 0:\n", k.data[0])
print("row sums:", k.data.sum(axis=2).ravel())

# %% Segment convolution: tap 0 looks one snippet back, tap 2 one ahead.
ramp = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 4, 1, 1, 1))
avg = segment_conv(ramp, Tensor(np.full((1, 1, 3), 1 / 3)))
print("uniform kernel over [1 2 3 4] (zero padded):", avg.data.ravel())

# %% The whole module: aggregated channels change, the rest pass through.
out = dsa_forward(v, params, cfg, mode="eval")
changed = ~np.isclose(out.data, v.data).all(axis=(0, 2, 3, 4, 5))
print("channels changed by DSA:", np.flatnonzero(changed))

# %% beta = 0 switches the module off exactly.
off = DsaConfig(channels=16, beta=0.0)
same = dsa_forward(v, DsaParams.init(off, rng), off)
print("beta=0 output identical to input:", np.array_equal(same.data, v.data))
