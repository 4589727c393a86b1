"""Brute-force 4D convolution over (U, T, H, W) and the DSA kernel embedding.

Nothing here shares code with :mod:`segagg.dsa`; the loops are plain Python
over scalar reads so the result can serve as an independent reference.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


def conv4d(v: Tensor, k: Tensor) -> Tensor:
    """Direct 4D convolution with centered offsets and zero padding.

    ``v`` is (N, Cin, U, T, H, W); ``k`` is (Cout, Cin, Lu, Lt, Lh, Lw) with odd
    sliding extents. Output is (N, Cout, U, T, H, W).
    """
    if v.ndim != 6 or k.ndim != 6:
        raise ValueError(f"conv4d: need rank-6 input and kernel, got {v.shape} and {k.shape}")
    n, cin, U, T, H, W = v.shape
    cout, kin, lu, lt, lh, lw = k.shape
    if kin != cin:
        raise ValueError(f"conv4d: kernel expects {kin} input channels, features have {cin}")
    if any(e % 2 == 0 for e in (lu, lt, lh, lw)):
        raise ValueError(f"conv4d: kernel extents {(lu, lt, lh, lw)} must be odd")
    vv = v.data.tolist()
    kk = k.data.tolist()
    ru, rt, rh, rw = lu // 2, lt // 2, lh // 2, lw // 2
    out = np.zeros((n, cout, U, T, H, W))
    for b in range(n):
        for co in range(cout):
            for u in range(U):
                for t in range(T):
                    for h in range(H):
                        for w in range(W):
                            acc = 0.0
                            for c in range(cin):
                                for l in range(lu):
                                    uu = u + l - ru
                                    if not 0 <= uu < U:
                                        continue
                                    for kt in range(lt):
                                        tt = t + kt - rt
                                        if not 0 <= tt < T:
                                            continue
                                        for i in range(lh):
                                            hh = h + i - rh
                                            if not 0 <= hh < H:
                                                continue
                                            for j in range(lw):
                                                ww = w + j - rw
                                                if not 0 <= ww < W:
                                                    continue
                                                acc += kk[co][c][l][kt][i][j] * vv[b][c][uu][tt][hh][ww]
                            out[b, co, u, t, h, w] = acc
    return Tensor(out)


def embed_dsa_kernel(k: Tensor, channels: int | None = None) -> Tensor:
    """Place a (C, L) or (1, C, L) dynamic kernel on the diagonal of a 4D kernel.

    Result is (C, C, L, 1, 1, 1) with ``[c, c, l] = k[c, l]`` and zeros elsewhere.
    """
    rows = k.data
    if rows.ndim == 3:
        if rows.shape[0] != 1:
            raise ValueError(f"embed_dsa_kernel: needs one batch entry, got {rows.shape}")
        rows = rows[0]
    if rows.ndim != 2:
        raise ValueError(f"embed_dsa_kernel: expected (C, L) rows, got {k.shape}")
    c, l = rows.shape
    if channels is not None and channels != c:
        raise ValueError(f"embed_dsa_kernel: kernel has {c} rows, asked for {channels} channels")
    out = np.zeros((c, c, l, 1, 1, 1))
    for ch in range(c):
        for tap in range(l):
            out[ch, ch, tap, 0, 0, 0] = rows[ch, tap]
    return Tensor(out)


@dataclass(frozen=True)
class SweepCell:
    channels: int
    snippets: int
    frames: int
    height: int
    width: int
    seed: int

    def as_tuple(self) -> tuple[int, ...]:
        return (self.channels, self.snippets, self.frames, self.height, self.width, self.seed)


def sweep_grid(
    channels=(1, 2, 3),
    snippets=(2, 3, 4),
    max_extent: int = 2,
    seeds=(0, 1, 2, 3, 4),
) -> list[SweepCell]:
    ext = range(1, max_extent + 1)
    return [
        SweepCell(c, u, t, h, w, s)
        for c, u, t, h, w, s in itertools.product(channels, snippets, ext, ext, ext, seeds)
    ]


def check_cell(cell: SweepCell, kernel_size: int = 3, base_seed: int = 0) -> float:
    """Max |segment_conv - conv4d(embed)| for one random draw at ``cell``'s shape."""
    # Imported here so the oracle code above stays free of dsa dependencies.
    from .dsa import segment_conv

    rng = np.random.default_rng([base_seed, *cell.as_tuple()])
    v = Tensor(rng.uniform(-1, 1, size=(1, cell.channels, cell.snippets, cell.frames, cell.height, cell.width)))
    logits = rng.normal(size=(1, cell.channels, kernel_size))
    k = np.exp(logits)
    k = Tensor(k / k.sum(axis=2, keepdims=True))
    fast = segment_conv(v, k)
    ref = conv4d(v, embed_dsa_kernel(k))
    return float(np.max(np.abs(fast.data - ref.data)))
