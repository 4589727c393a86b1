"""Dynamic segment aggregation.

A DSA module mixes features across the snippet axis U with a per-channel,
per-sample kernel of ``L`` taps. The kernel is produced from the snippet-wise
spatial means of the features by a small MLP (shared across channels) and
normalized with a softmax, so every tap row is a convex combination. Only the
first ``round(beta * C)`` channels are aggregated; the rest pass through.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io
from . import tensor as tc
from .tensor import BatchNormState, Tensor, apply_op

CONTEXT_SOURCES = ("split", "full")


@dataclass(frozen=True)
class DsaConfig:
    """Hyperparameters of one DSA module.

    ``context`` picks where the pooled context comes from: ``"split"`` uses
    only the aggregated channels, ``"full"`` pools every channel and keeps
    the kernel rows of the aggregated ones (this changes the MLP's
    batch-norm population, not the per-channel inputs).
    """

    channels: int
    snippets: int = 4
    kernel_size: int = 3
    alpha: int = 2
    beta: float = 1 / 8
    context: str = "split"

    def __post_init__(self):
        if self.channels < 0:
            raise ValueError(f"channels must be >= 0, got {self.channels}")
        if self.snippets < 1:
            raise ValueError(f"snippets must be >= 1, got {self.snippets}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.alpha < 1:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.context not in CONTEXT_SOURCES:
            raise ValueError(f"context must be one of {CONTEXT_SOURCES}, got {self.context!r}")

    @property
    def hidden(self) -> int:
        return self.snippets * self.alpha

    @property
    def split(self) -> int:
        # Python's round() is round-half-to-even.
        return int(round(self.beta * self.channels))


@dataclass
class DsaParams:
    """Kernel-generator MLP: U -> U*alpha -> BN -> ReLU -> L."""

    w1: Tensor
    b1: Tensor
    bn_weight: Tensor
    bn_bias: Tensor
    w2: Tensor
    b2: Tensor
    bn_state: BatchNormState = field(default=None)

    def __post_init__(self):
        if self.bn_state is None:
            self.bn_state = BatchNormState.fresh(self.b1.shape[0])

    @classmethod
    def init(cls, cfg: DsaConfig, rng: np.random.Generator) -> "DsaParams":
        u, h, l = cfg.snippets, cfg.hidden, cfg.kernel_size
        return cls(
            w1=Tensor(rng.normal(0.0, np.sqrt(2.0 / u), size=(u, h))),
            b1=Tensor.zeros((h,)),
            bn_weight=Tensor.ones((h,)),
            bn_bias=Tensor.zeros((h,)),
            w2=Tensor(rng.normal(0.0, np.sqrt(1.0 / h), size=(h, l))),
            b2=Tensor.zeros((l,)),
        )

    @classmethod
    def zeros(cls, cfg: DsaConfig) -> "DsaParams":
        """All affine weights zero, BN an identity; yields uniform kernels."""
        u, h, l = cfg.snippets, cfg.hidden, cfg.kernel_size
        return cls(
            w1=Tensor.zeros((u, h)),
            b1=Tensor.zeros((h,)),
            bn_weight=Tensor.ones((h,)),
            bn_bias=Tensor.zeros((h,)),
            w2=Tensor.zeros((h, l)),
            b2=Tensor.zeros((l,)),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {
            "w1": self.w1,
            "b1": self.b1,
            "bn_weight": self.bn_weight,
            "bn_bias": self.bn_bias,
            "w2": self.w2,
            "b2": self.b2,
        }

    def replace(self, **tensors: Tensor) -> "DsaParams":
        fields = self.tensors()
        fields.update(tensors)
        return DsaParams(**fields, bn_state=self.bn_state)

    def check(self, cfg: DsaConfig) -> None:
        u, h, l = cfg.snippets, cfg.hidden, cfg.kernel_size
        want = {"w1": (u, h), "b1": (h,), "bn_weight": (h,), "bn_bias": (h,), "w2": (h, l), "b2": (l,)}
        for name, t in self.tensors().items():
            if t.shape != want[name]:
                raise ValueError(f"DsaParams.{name} has shape {t.shape}, config expects {want[name]}")


def save_dsa_params(directory: str | Path, params: DsaParams, cfg: DsaConfig) -> Path:
    """One ``.dst`` per tensor (running stats included) plus a manifest carrying ``cfg``."""
    tensors = dict(params.tensors())
    tensors["bn_state.mean"] = Tensor(params.bn_state.mean)
    tensors["bn_state.var"] = Tensor(params.bn_state.var)
    return io.save_bundle(directory, tensors, {"dsa_config": asdict(cfg)})


def load_dsa_params(directory: str | Path) -> tuple[DsaParams, DsaConfig]:
    tensors, meta = io.load_bundle(directory)
    cfg = DsaConfig(**meta["dsa_config"])
    state = BatchNormState(tensors.pop("bn_state.mean").numpy(), tensors.pop("bn_state.var").numpy())
    params = DsaParams(**tensors, bn_state=state)
    params.check(cfg)
    return params, cfg


def pool_context(v: Tensor) -> Tensor:
    """Spatio-temporal mean per (n, c, u): (N, C, U, T, H, W) -> (N, C, U)."""
    if v.ndim != 6:
        raise ValueError(f"pool_context: expected (N, C, U, T, H, W), got {v.shape}")
    return tc.global_avg_pool(v, (3, 4, 5))


def generate_kernel(ctx: Tensor, params: DsaParams, cfg: DsaConfig, mode: str = "train") -> Tensor:
    """Map (N, C, U) contexts to (N, C, L) softmax-normalized kernels.

    Every channel's length-U context vector goes through the same MLP; the
    batch-norm population is the flattened N*C set of those vectors.
    """
    if ctx.ndim != 3 or ctx.shape[2] != cfg.snippets:
        raise ValueError(f"generate_kernel: context {ctx.shape} does not have U={cfg.snippets}")
    params.check(cfg)
    n, c, u = ctx.shape
    rows = tc.reshape(ctx, (n * c, u))
    hid = tc.add_bias(tc.matmul(rows, params.w1), params.b1)
    hid = tc.batch_norm(hid, params.bn_weight, params.bn_bias, params.bn_state, mode)
    hid = tc.relu(hid)
    logits = tc.add_bias(tc.matmul(hid, params.w2), params.b2)
    kernel = tc.softmax(logits, axis=1)
    return tc.reshape(kernel, (n, c, cfg.kernel_size))


def _shift_u(x: np.ndarray, offset: int) -> np.ndarray:
    """out[:, :, u] = x[:, :, u + offset], zero outside [0, U)."""
    u = x.shape[2]
    out = np.zeros_like(x)
    if abs(offset) >= u:
        return out
    if offset >= 0:
        out[:, :, : u - offset] = x[:, :, offset:]
    else:
        out[:, :, -offset:] = x[:, :, : u + offset]
    return out


def _segment_conv_forward(v: np.ndarray, k: np.ndarray) -> np.ndarray:
    r = (k.shape[2] - 1) // 2
    taps = k[:, :, :, None, None, None, None]
    out = taps[:, :, 0] * _shift_u(v, -r)
    for l in range(1, k.shape[2]):
        out = out + taps[:, :, l] * _shift_u(v, l - r)
    return out


def _segment_conv_grad(v: np.ndarray, k: np.ndarray, g: np.ndarray):
    r = (k.shape[2] - 1) // 2
    gv = np.zeros_like(v)
    gk = np.zeros_like(k)
    for l in range(k.shape[2]):
        gk[:, :, l] = (g * _shift_u(v, l - r)).sum(axis=(2, 3, 4, 5))
        gv += k[:, :, l, None, None, None, None] * _shift_u(g, r - l)
    return gv, gk


def segment_conv(v: Tensor, k: Tensor) -> Tensor:
    """Channel-wise convolution along U with per-sample kernels.

    ``out[n,c,u] = sum_l k[n,c,l] * v[n,c,u + l - (L-1)/2]`` with zero padding,
    so the output keeps the input shape.
    """
    if v.ndim != 6:
        raise ValueError(f"segment_conv: expected (N, C, U, T, H, W), got {v.shape}")
    if k.ndim != 3 or k.shape[:2] != v.shape[:2]:
        raise ValueError(f"segment_conv: kernel {k.shape} does not match features {v.shape}")
    if k.shape[2] % 2 == 0:
        raise ValueError(f"segment_conv: kernel size {k.shape[2]} is even, centering undefined")
    out = _segment_conv_forward(v.data, k.data)
    return apply_op("segment_conv", out, (v, k), lambda g: _segment_conv_grad(v.data, k.data, g))


def dsa_forward(v: Tensor, params: DsaParams, cfg: DsaConfig, mode: str = "train") -> Tensor:
    if v.ndim != 6 or v.shape[1] != cfg.channels or v.shape[2] != cfg.snippets:
        raise ValueError(
            f"dsa_forward: features {v.shape} do not match C={cfg.channels}, U={cfg.snippets}"
        )
    v1, v2 = tc.split_channels(v, cfg.split)
    if cfg.split == 0:
        return tc.concat_channels(v1, v2)
    if cfg.context == "full":
        kernel = generate_kernel(pool_context(v), params, cfg, mode)
        # split_channels works on axis 1 of any rank.
        kernel, _ = tc.split_channels(kernel, cfg.split)
    else:
        kernel = generate_kernel(pool_context(v1), params, cfg, mode)
    return tc.concat_channels(segment_conv(v1, kernel), v2)


def dsa_param_count(cfg: DsaConfig) -> int:
    """Learnable scalars in one module; independent of C (weights are channel-shared)."""
    u, h, l = cfg.snippets, cfg.hidden, cfg.kernel_size
    return u * h + h + 2 * h + h * l + l


def dsa_cost_items(cfg: DsaConfig, feature_shape) -> dict[str, int]:
    """Per-stage multiply-add counts of one module on (N, C, U, T, H, W) features.

    Pooling counts one accumulate per input element, each affine map one MAC
    per weight per row, softmax one op per tap; batch norm and ReLU are free,
    matching the backbone convention.
    """
    n, c, u, t, h, w = feature_shape
    if c != cfg.channels or u != cfg.snippets:
        raise ValueError(f"dsa_cost_items: shape {tuple(feature_shape)} does not match config")
    cs = cfg.split
    if cs == 0:
        return {"pool": 0, "mlp": 0, "softmax": 0, "segment_conv": 0, "total": 0}
    ctx_channels = c if cfg.context == "full" else cs
    rows = n * ctx_channels
    items = {
        "pool": rows * u * t * h * w,
        "mlp": rows * (u * cfg.hidden + cfg.hidden * cfg.kernel_size),
        "softmax": rows * cfg.kernel_size,
        "segment_conv": n * cs * u * t * h * w * cfg.kernel_size,
    }
    items["total"] = sum(items.values())
    return items


def dsa_flops(cfg: DsaConfig, feature_shape) -> int:
    return dsa_cost_items(cfg, feature_shape)["total"]
