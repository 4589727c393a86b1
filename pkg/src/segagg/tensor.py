"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every public op computes its forward value with numpy and, when a
:class:`GradTape` is active, appends a record holding the inputs, the output
and a backward rule. :func:`backward` replays those records in reverse.

Axis layout for video features is fixed library-wide as ``(N, C, U, T, H, W)``:
batch, channels, snippets, frames, height, width.

Reductions that feed the bitwise-reproducibility guarantees (convolutions,
matmul) accumulate with explicit left-to-right Python loops over the
contracted index instead of BLAS, so every output element sees the same
sequence of IEEE operations regardless of where it sits in the array.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "Gradients",
    "BatchNormState",
    "apply_op",
    "backward",
    "add",
    "add_bias",
    "mul",
    "scale",
    "sum_all",
    "weighted_sum",
    "matmul",
    "relu",
    "softmax",
    "global_avg_pool",
    "batch_norm",
    "conv_spatial",
    "conv_temporal",
    "split_channels",
    "concat_channels",
    "reshape",
    "transpose",
    "cross_entropy",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Tensor:
    """Immutable dense array of 64-bit reals.

    Tensors compare by identity, so they can key the gradient mapping that
    :func:`backward` returns.
    """

    __slots__ = ("_data", "name")

    def __init__(self, data, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr.flags.writeable = False
        self._data = arr
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path: takes ownership of a freshly computed array.
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr.flags.writeable = False
        t._data = arr
        t.name = None
        return t

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "Tensor":
        return cls._wrap(np.zeros(tuple(shape)))

    @classmethod
    def ones(cls, shape: Sequence[int]) -> "Tensor":
        return cls._wrap(np.ones(tuple(shape)))

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return self._data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


# ---------------------------------------------------------------------------
# Tape

BackwardRule = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    rule: BackwardRule


_ACTIVE_TAPE: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar(
    "segagg_active_tape", default=None
)


class GradTape:
    """Ordered log of executed ops, used as a context manager.

    >>> with GradTape() as tape:
    ...     y = sum_all(relu(x))
    >>> grads = backward(tape, y)
    """

    def __init__(self):
        self.records: list[Record] = []
        self._token = None

    def __enter__(self) -> "GradTape":
        if self._token is not None:
            raise RuntimeError("tape is already active")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)


class Gradients:
    """Mapping from primal tensors to their gradient tensors."""

    def __init__(self, grads: dict[int, np.ndarray], tensors: dict[int, Tensor]):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, t: Tensor) -> Tensor:
        g = self._grads.get(id(t))
        if g is None or self._tensors.get(id(t)) is not t:
            return Tensor.zeros(t.shape)
        return Tensor._wrap(g)

    def __contains__(self, t: Tensor) -> bool:
        return self._tensors.get(id(t)) is t and id(t) in self._grads

    def __len__(self) -> int:
        return len(self._grads)


def apply_op(
    op: str,
    out: np.ndarray,
    inputs: Sequence[Tensor],
    rule: BackwardRule,
) -> Tensor:
    """Wrap ``out`` as a tensor and record it on the active tape, if any.

    ``rule`` maps the output gradient to one gradient (or ``None``) per input.
    Ops defined outside this module use this to join the tape.
    """
    result = Tensor._wrap(out)
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.records.append(Record(op, tuple(inputs), result, rule))
    return result


def backward(tape: GradTape, output: Tensor) -> Gradients:
    """Reverse-mode gradients of a single-element ``output`` for every taped tensor."""
    if output.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones(output.shape)}
    tensors: dict[int, Tensor] = {id(output): output}
    for rec in reversed(tape.records):
        g_out = grads.get(id(rec.output))
        if g_out is None:
            continue
        g_ins = rec.rule(g_out)
        if len(g_ins) != len(rec.inputs):
            raise RuntimeError(f"{rec.op}: backward returned {len(g_ins)} grads for {len(rec.inputs)} inputs")
        for t, g in zip(rec.inputs, g_ins):
            if g is None:
                continue
            if g.shape != t.shape:
                raise RuntimeError(f"{rec.op}: gradient shape {g.shape} != input shape {t.shape}")
            key = id(t)
            tensors[key] = t
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    return Gradients(grads, tensors)


# ---------------------------------------------------------------------------
# Elementwise and linear ops


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return apply_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    return apply_op("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    return apply_op("scale", x.data * c, (x,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-F bias to every row of an (M, F) matrix."""
    if x.ndim != 2 or b.shape != (x.shape[1],):
        raise ValueError(f"add_bias: bias {b.shape} does not fit rows of {x.shape}")
    return apply_op("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def sum_all(x: Tensor) -> Tensor:
    return apply_op("sum", np.array([x.data.sum()]), (x,), lambda g: (np.full(x.shape, g[0]),))


def weighted_sum(x: Tensor, w: np.ndarray) -> Tensor:
    """``sum(x * w)`` for a constant weight array; a generic scalar probe."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != x.shape:
        raise ValueError(f"weighted_sum: weights {w.shape} vs tensor {x.shape}")
    return apply_op("weighted_sum", np.array([(x.data * w).sum()]), (x,), lambda g: (g[0] * w,))


def _matmul_forward(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = a[:, 0:1] * b[0:1, :]
    for k in range(1, a.shape[1]):
        out = out + a[:, k : k + 1] * b[k : k + 1, :]
    return out


def _matmul_grad(a: np.ndarray, b: np.ndarray, g: np.ndarray):
    return _matmul_forward(g, b.T), _matmul_forward(a.T, g)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = _matmul_forward(a.data, b.data)
    return apply_op("matmul", out, (a, b), lambda g: _matmul_grad(a.data, b.data, g))


def _relu_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # Subgradient at exactly 0 is 0.
    return np.where(x > 0, g, 0.0)


def relu(x: Tensor) -> Tensor:
    return apply_op("relu", np.maximum(x.data, 0.0), (x,), lambda g: (_relu_grad(x.data, g),))


def _check_axis(op: str, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


def _softmax_grad(y: np.ndarray, g: np.ndarray, axis: int) -> np.ndarray:
    return y * (g - (g * y).sum(axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis("softmax", axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return apply_op("softmax", y, (x,), lambda g: (_softmax_grad(y, g, axis),))


def global_avg_pool(x: Tensor, axes: Iterable[int]) -> Tensor:
    """Mean over ``axes``; the pooled axes are removed from the shape."""
    axes = tuple(sorted({_check_axis("global_avg_pool", a, x.ndim) for a in axes}))
    if not axes:
        raise ValueError("global_avg_pool: no axes given")
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes)
    if out.ndim == 0:
        out = out.reshape(1)

    def rule(g):
        g = g.reshape([1 if i in axes else n for i, n in enumerate(x.shape)])
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return apply_op("global_avg_pool", out, (x,), rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(tuple(shape))
    return apply_op("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, perm: Sequence[int]) -> Tensor:
    perm = tuple(perm)
    inv = tuple(np.argsort(perm))
    return apply_op("transpose", x.data.transpose(perm), (x,), lambda g: (g.transpose(inv),))


# ---------------------------------------------------------------------------
# Batch normalization


@dataclass
class BatchNormState:
    """Running statistics for one normalization layer (mutated in train mode)."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, features: int) -> "BatchNormState":
        return cls(np.zeros(features), np.ones(features))

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.mean.copy(), self.var.copy(), self.momentum, self.eps)


def _bn_shape(x: np.ndarray) -> list[int]:
    return [1, x.shape[1]] + [1] * (x.ndim - 2)


def _bn_train_grad(xhat, invstd, gamma, g, axes, count):
    gxhat = g * gamma
    s1 = gxhat.sum(axis=axes, keepdims=True)
    s2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
    dx = invstd * (gxhat - s1 / count - xhat * s2 / count)
    return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
) -> Tensor:
    """Normalize axis 1 of ``x`` using statistics over every other axis.

    Works for (M, F) feature matrices and (N, C, ...) feature maps alike.
    Train mode uses batch statistics and updates ``state`` in place
    (unbiased variance for the running estimate); eval mode uses ``state``.
    """
    if x.ndim < 2:
        raise ValueError(f"batch_norm: need rank >= 2, got {x.shape}")
    feats = x.shape[1]
    if gamma.shape != (feats,) or beta.shape != (feats,):
        raise ValueError(f"batch_norm: gamma {gamma.shape} / beta {beta.shape} vs {feats} features")
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm: unknown mode {mode!r}")
    axes = tuple(i for i in range(x.ndim) if i != 1)
    bshape = _bn_shape(x.data)
    gm = gamma.data.reshape(bshape)
    bt = beta.data.reshape(bshape)

    if mode == "train":
        count = x.size // feats
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        invstd = 1.0 / np.sqrt(var + state.eps)
        xhat = xc * invstd
        unbiased = var.reshape(-1) * (count / (count - 1)) if count > 1 else var.reshape(-1)
        state.mean = (1 - state.momentum) * state.mean + state.momentum * mu.reshape(-1)
        state.var = (1 - state.momentum) * state.var + state.momentum * unbiased

        def rule(g):
            return _bn_train_grad(xhat, invstd, gm, g, axes, count)

    else:
        invstd = (1.0 / np.sqrt(state.var + state.eps)).reshape(bshape)
        xhat = (x.data - state.mean.reshape(bshape)) * invstd

        def rule(g):
            return g * gm * invstd, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return apply_op("batch_norm", xhat * gm + bt, (x, gamma, beta), rule)


# ---------------------------------------------------------------------------
# Convolutions over video features (N, C, U, T, H, W)


def _check_video(op: str, x: Tensor) -> None:
    if x.ndim != 6:
        raise ValueError(f"{op}: expected (N, C, U, T, H, W) input, got shape {x.shape}")


def _out_len(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _accumulate(acc: np.ndarray, tmp: np.ndarray, w: np.ndarray, patch: np.ndarray) -> None:
    # acc[n, co, ...] += w[co, ci] * patch[n, ci, ...] for ci left to right.
    patch = np.ascontiguousarray(patch)
    bshape = (1, w.shape[0]) + (1,) * (patch.ndim - 2)
    for ci in range(w.shape[1]):
        np.multiply(w[:, ci].reshape(bshape), patch[:, ci : ci + 1], out=tmp)
        acc += tmp


_NON_CHANNEL = [0, 2, 3, 4, 5]


def _grad_weight(g: np.ndarray, patch: np.ndarray) -> np.ndarray:
    return np.tensordot(g, patch, axes=(_NON_CHANNEL, _NON_CHANNEL))


def _grad_input(w: np.ndarray, g: np.ndarray) -> np.ndarray:
    return np.moveaxis(np.tensordot(w, g, axes=([0], [1])), 0, 1)


def _conv_spatial_forward(x, w, stride, pad):
    n, cin, u, t, h, wd = x.shape
    kh, kw = w.shape[2:]
    ho, wo = _out_len(h, kh, stride, pad), _out_len(wd, kw, stride, pad)
    xp = np.pad(x, [(0, 0)] * 4 + [(pad, pad), (pad, pad)])
    out = np.zeros((n, w.shape[0], u, t, ho, wo))
    tmp = np.empty_like(out)
    for i in range(kh):
        for j in range(kw):
            patch = xp[..., i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
            _accumulate(out, tmp, w[:, :, i, j], patch)
    return out


def _conv_spatial_grad(x, w, stride, pad, g):
    n, cin, u, t, h, wd = x.shape
    kh, kw = w.shape[2:]
    ho, wo = g.shape[-2:]
    xp = np.pad(x, [(0, 0)] * 4 + [(pad, pad), (pad, pad)])
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            sl = (Ellipsis, slice(i, i + stride * (ho - 1) + 1, stride), slice(j, j + stride * (wo - 1) + 1, stride))
            patch = xp[sl]
            gw[:, :, i, j] = _grad_weight(g, patch)
            gxp[sl] += _grad_input(w[:, :, i, j], g)
    gx = gxp[..., pad : pad + h, pad : pad + wd]
    return gx, gw


def conv_spatial(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2D convolution over (H, W), applied independently at every (n, u, t).

    ``w`` has shape (Cout, Cin, kh, kw). Zero padding, no bias.
    """
    _check_video("conv_spatial", x)
    if w.ndim != 4 or w.shape[1] != x.shape[1]:
        raise ValueError(f"conv_spatial: kernel {w.shape} does not match input channels {x.shape[1]}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv_spatial: bad stride {stride} / pad {pad}")
    kh, kw = w.shape[2:]
    if kh > x.shape[4] + 2 * pad or kw > x.shape[5] + 2 * pad:
        raise ValueError(f"conv_spatial: kernel {kh}x{kw} larger than padded input {x.shape[4:]}")
    out = _conv_spatial_forward(x.data, w.data, stride, pad)
    return apply_op(
        "conv_spatial", out, (x, w), lambda g: _conv_spatial_grad(x.data, w.data, stride, pad, g)
    )


def _conv_temporal_forward(x, w, stride, pad):
    kt = w.shape[2]
    to = _out_len(x.shape[3], kt, stride, pad)
    xp = np.pad(x, [(0, 0)] * 3 + [(pad, pad)] + [(0, 0)] * 2)
    n, _, u, _, h, wd = x.shape
    out = np.zeros((n, w.shape[0], u, to, h, wd))
    tmp = np.empty_like(out)
    for k in range(kt):
        _accumulate(out, tmp, w[:, :, k], xp[:, :, :, k : k + stride * (to - 1) + 1 : stride])
    return out


def _conv_temporal_grad(x, w, stride, pad, g):
    kt = w.shape[2]
    to = g.shape[3]
    xp = np.pad(x, [(0, 0)] * 3 + [(pad, pad)] + [(0, 0)] * 2)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for k in range(kt):
        sl = (slice(None),) * 3 + (slice(k, k + stride * (to - 1) + 1, stride),)
        gw[:, :, k] = _grad_weight(g, xp[sl])
        gxp[sl] += _grad_input(w[:, :, k], g)
    return gxp[:, :, :, pad : pad + x.shape[3]], gw


def conv_temporal(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """1D convolution along T inside each snippet; ``w`` is (Cout, Cin, kt)."""
    _check_video("conv_temporal", x)
    if w.ndim != 3 or w.shape[1] != x.shape[1]:
        raise ValueError(f"conv_temporal: kernel {w.shape} does not match input channels {x.shape[1]}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv_temporal: bad stride {stride} / pad {pad}")
    if w.shape[2] > x.shape[3] + 2 * pad:
        raise ValueError(f"conv_temporal: kernel {w.shape[2]} larger than padded input T={x.shape[3]}")
    out = _conv_temporal_forward(x.data, w.data, stride, pad)
    return apply_op(
        "conv_temporal", out, (x, w), lambda g: _conv_temporal_grad(x.data, w.data, stride, pad, g)
    )


# ---------------------------------------------------------------------------
# Channel split / concat (empty channel extent allowed as an intermediate)


def split_channels(x: Tensor, count: int) -> tuple[Tensor, Tensor]:
    c = x.shape[1]
    if not 0 <= count <= c:
        raise ValueError(f"split_channels: count {count} outside [0, {c}]")
    first = apply_op(
        "split_channels.head",
        x.data[:, :count],
        (x,),
        lambda g: (np.concatenate([g, np.zeros_like(x.data[:, count:])], axis=1),),
    )
    second = apply_op(
        "split_channels.tail",
        x.data[:, count:],
        (x,),
        lambda g: (np.concatenate([np.zeros_like(x.data[:, :count]), g], axis=1),),
    )
    return first, second


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim or a.shape[:1] + a.shape[2:] != b.shape[:1] + b.shape[2:]:
        raise ValueError(f"concat_channels: non-channel extents differ, {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return apply_op("concat_channels", out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


# ---------------------------------------------------------------------------
# Loss


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of (N, K) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def rule(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g[0] * p / n,)

    return apply_op("cross_entropy", np.array([loss]), (logits,), rule)
