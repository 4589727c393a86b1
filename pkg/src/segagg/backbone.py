"""Toy snippet networks with DSA blocks, segment consensus and a small trainer.

A :class:`ToyNet` processes video features of shape (N, C, U, T, H, W). Every
op except DSA acts on each snippet independently with shared weights, so with
all DSA modules disabled (``beta=0``) the per-snippet logits depend only on
their own snippet and the averaged prediction ignores snippet order.

Residual blocks come in two flavours:

``i3d``
    bottleneck ``kt x 1^2 -> 1 x 3^2 -> 1 x 1^2`` with BN after each conv.
``tsm``
    basic block ``shift -> 3^2 -> 3^2`` with a temporal shift on the branch.

DSA insertion positions follow the residual branch: ``I`` before the first
conv, ``II`` after the first conv (post BN/ReLU), ``III`` after the second
conv (bottleneck only), ``IV`` after the last conv's BN and before the
residual addition.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io
from . import tensor as tc
from .dsa import DsaConfig, DsaParams, dsa_forward
from .tensor import BatchNormState, GradTape, Tensor, apply_op, backward

log = logging.getLogger(__name__)

POSITIONS = ("I", "II", "III", "IV")
BLOCK_KINDS = ("i3d", "tsm")
TSM_SHIFT_FRACTION = 1 / 8


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Ops


def _shift_t(x: np.ndarray, lo: int, hi: int, step: int) -> None:
    # In place on channels [lo, hi): out[t] = in[t - step], zero fill.
    part = x[:, lo:hi].copy()
    x[:, lo:hi] = 0.0
    if step > 0:
        x[:, lo:hi, :, step:] = part[:, :, :, :-step]
    else:
        x[:, lo:hi, :, :step] = part[:, :, :, -step:]


def temporal_shift(x: Tensor, fraction: float = TSM_SHIFT_FRACTION) -> Tensor:
    """Shift ``floor(fraction*C)`` channels forward in T and as many backward.

    Channels ``[0, f)`` take the previous frame, ``[f, 2f)`` the next frame;
    vacated frames are zero. Shifts never cross snippet boundaries.
    """
    if not 0 <= 2 * fraction <= 1:
        raise ValueError(f"temporal_shift: fraction {fraction} must satisfy 0 <= 2*fraction <= 1")
    if x.ndim != 6:
        raise ValueError(f"temporal_shift: expected (N, C, U, T, H, W), got {x.shape}")
    fold = math.floor(fraction * x.shape[1])
    out = x.numpy()
    if fold and x.shape[3] > 1:
        _shift_t(out, 0, fold, 1)
        _shift_t(out, fold, 2 * fold, -1)
    elif fold:
        out[:, : 2 * fold] = 0.0

    def rule(g):
        gx = g.copy()
        if fold and x.shape[3] > 1:
            _shift_t(gx, 0, fold, -1)
            _shift_t(gx, fold, 2 * fold, 1)
        elif fold:
            gx[:, : 2 * fold] = 0.0
        return (gx,)

    return apply_op("temporal_shift", out, (x,), rule)


def consensus(logits: Tensor) -> Tensor:
    """Average (N, U, K) snippet logits over U.

    Values are summed in sorted order, so the result is bitwise invariant to
    any permutation of the snippets.
    """
    if logits.ndim != 3:
        raise ValueError(f"consensus: expected (N, U, K) logits, got {logits.shape}")
    u = logits.shape[1]
    ordered = np.sort(logits.data, axis=1)
    total = ordered[:, 0]
    for i in range(1, u):
        total = total + ordered[:, i]
    out = total / u
    return apply_op(
        "consensus", out, (logits,), lambda g: (np.repeat(g[:, None, :] / u, u, axis=1),)
    )


# ---------------------------------------------------------------------------
# Blocks


@dataclass(frozen=True)
class DsaPlacement:
    position: str
    config: DsaConfig


@dataclass(frozen=True)
class BlockSpec:
    """One residual block with identity shortcut.

    ``mid_channels`` is the bottleneck width (ignored by ``tsm`` blocks);
    ``temporal_kernel`` is the T extent of the first bottleneck conv (1 or 3).
    """

    kind: str
    channels: int
    mid_channels: int | None = None
    temporal_kernel: int = 1
    dsa: DsaPlacement | None = None

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.temporal_kernel % 2 == 0:
            raise ValueError("temporal_kernel must be odd")
        if self.dsa is not None:
            pos = self.dsa.position
            if pos not in POSITIONS:
                raise ValueError(f"unknown DSA position {pos!r}")
            if pos == "III" and self.kind == "tsm":
                raise ValueError("position III needs a three-conv (i3d) block")
            if self.dsa.config.channels != self.host_channels(pos):
                raise ValueError(
                    f"DSA at {pos} sees {self.host_channels(pos)} channels, config says "
                    f"{self.dsa.config.channels}"
                )

    @property
    def width(self) -> int:
        if self.kind == "tsm" or self.mid_channels is None:
            return self.channels
        return self.mid_channels

    def host_channels(self, position: str) -> int:
        return self.width if position in ("II", "III") else self.channels


def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape))


def init_block(spec: BlockSpec, rng: np.random.Generator):
    """Fresh (params, bn_states) dicts for one block, keyed block-locally."""
    c, m = spec.channels, spec.width
    params: dict[str, Tensor] = {}
    if spec.kind == "i3d":
        kt = spec.temporal_kernel
        params["conv1"] = _kaiming(rng, (m, c, kt), c * kt)
        params["conv2"] = _kaiming(rng, (m, m, 3, 3), m * 9)
        params["conv3"] = _kaiming(rng, (c, m, 1, 1), m)
        bns = {"bn1": m, "bn2": m, "bn3": c}
    else:
        params["conv1"] = _kaiming(rng, (c, c, 3, 3), c * 9)
        params["conv2"] = _kaiming(rng, (c, c, 3, 3), c * 9)
        bns = {"bn1": c, "bn2": c}
    states = {}
    for name, width in bns.items():
        params[f"{name}.weight"] = Tensor.ones((width,))
        params[f"{name}.bias"] = Tensor.zeros((width,))
        states[name] = BatchNormState.fresh(width)
    if spec.dsa is not None:
        dp = DsaParams.init(spec.dsa.config, rng)
        for name, t in dp.tensors().items():
            params[f"dsa.{name}"] = t
        states["dsa.bn"] = dp.bn_state
    return params, states


def _bn(x, params, states, name, mode):
    return tc.batch_norm(x, params[f"{name}.weight"], params[f"{name}.bias"], states[name], mode)


def _dsa_params(params, states) -> DsaParams:
    return DsaParams(
        **{k[4:]: v for k, v in params.items() if k.startswith("dsa.")},
        bn_state=states["dsa.bn"],
    )


def run_block(x: Tensor, spec: BlockSpec, params, states, mode: str = "train") -> Tensor:
    def maybe_dsa(h: Tensor, here: str) -> Tensor:
        if spec.dsa is None or spec.dsa.position != here:
            return h
        return dsa_forward(h, _dsa_params(params, states), spec.dsa.config, mode)

    if spec.kind == "i3d":
        kt = spec.temporal_kernel
        h = maybe_dsa(x, "I")
        h = tc.relu(_bn(tc.conv_temporal(h, params["conv1"], pad=kt // 2), params, states, "bn1", mode))
        h = maybe_dsa(h, "II")
        h = tc.relu(_bn(tc.conv_spatial(h, params["conv2"], pad=1), params, states, "bn2", mode))
        h = maybe_dsa(h, "III")
        h = _bn(tc.conv_spatial(h, params["conv3"]), params, states, "bn3", mode)
        h = maybe_dsa(h, "IV")
    else:
        h = maybe_dsa(x, "I")
        h = temporal_shift(h)
        h = tc.relu(_bn(tc.conv_spatial(h, params["conv1"], pad=1), params, states, "bn1", mode))
        h = maybe_dsa(h, "II")
        h = _bn(tc.conv_spatial(h, params["conv2"], pad=1), params, states, "bn2", mode)
        h = maybe_dsa(h, "IV")
    return tc.relu(tc.add(x, h))


# ---------------------------------------------------------------------------
# Network


@dataclass
class ToyNet:
    """Stem conv, residual blocks, spatio-temporal pooling, per-snippet classifier.

    ``params`` and ``states`` are flat dicts keyed ``stem.*``, ``block{i}.*``
    and ``fc.*``; training swaps entries of ``params`` in place.
    """

    in_channels: int
    width: int
    blocks: list[BlockSpec]
    num_classes: int
    params: dict[str, Tensor] = field(default_factory=dict)
    states: dict[str, BatchNormState] = field(default_factory=dict)

    @classmethod
    def build(cls, in_channels: int, width: int, blocks, num_classes: int = 2, seed: int = 0) -> "ToyNet":
        for b in blocks:
            if b.channels != width:
                raise ValueError(f"block channels {b.channels} != net width {width}")
        rng = np.random.default_rng(seed)
        net = cls(in_channels, width, list(blocks), num_classes)
        net.params["stem.conv"] = _kaiming(rng, (width, in_channels, 3, 3), in_channels * 9)
        net.params["stem.bn.weight"] = Tensor.ones((width,))
        net.params["stem.bn.bias"] = Tensor.zeros((width,))
        net.states["stem.bn"] = BatchNormState.fresh(width)
        for i, spec in enumerate(net.blocks):
            p, s = init_block(spec, rng)
            net.params.update({f"block{i}.{k}": v for k, v in p.items()})
            net.states.update({f"block{i}.{k}": v for k, v in s.items()})
        net.params["fc.weight"] = Tensor(rng.normal(0.0, math.sqrt(1.0 / width), size=(width, num_classes)))
        net.params["fc.bias"] = Tensor.zeros((num_classes,))
        return net

    def block_view(self, i: int):
        prefix = f"block{i}."
        p = {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}
        s = {k[len(prefix):]: v for k, v in self.states.items() if k.startswith(prefix)}
        return p, s

    def snippet_logits(self, x: Tensor, mode: str = "eval") -> Tensor:
        """Per-snippet class logits, shape (N, U, K)."""
        if x.ndim != 6 or x.shape[1] != self.in_channels:
            raise ValueError(f"ToyNet: expected (N, {self.in_channels}, U, T, H, W), got {x.shape}")
        n, _, u = x.shape[:3]
        h = tc.conv_spatial(x, self.params["stem.conv"], pad=1)
        h = tc.relu(_bn(h, self.params, self.states, "stem.bn", mode))
        for i, spec in enumerate(self.blocks):
            p, s = self.block_view(i)
            h = run_block(h, spec, p, s, mode)
        feats = tc.global_avg_pool(h, (3, 4, 5))  # (N, C, U)
        feats = tc.reshape(tc.transpose(feats, (0, 2, 1)), (n * u, self.width))
        logits = tc.add_bias(tc.matmul(feats, self.params["fc.weight"]), self.params["fc.bias"])
        return tc.reshape(logits, (n, u, self.num_classes))

    def __call__(self, x: Tensor, mode: str = "eval") -> Tensor:
        return consensus(self.snippet_logits(x, mode))

    def copy(self) -> "ToyNet":
        return replace(
            self,
            blocks=list(self.blocks),
            params=dict(self.params),
            states={k: v.copy() for k, v in self.states.items()},
        )

    @property
    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def save(self, directory: str | Path, meta: dict | None = None) -> Path:
        """Checkpoint parameters and running statistics as a ``.dst`` bundle."""
        tensors = {f"param.{k}": v for k, v in self.params.items()}
        for k, st in self.states.items():
            tensors[f"state.{k}.mean"] = Tensor(st.mean)
            tensors[f"state.{k}.var"] = Tensor(st.var)
        return io.save_bundle(directory, tensors, meta)

    def load(self, directory: str | Path) -> dict:
        """Restore a checkpoint written by :meth:`save` into this net; returns its meta."""
        tensors, meta = io.load_bundle(directory)
        want = {f"param.{k}" for k in self.params}
        want |= {f"state.{k}.{f}" for k in self.states for f in ("mean", "var")}
        if set(tensors) != want:
            raise ValueError(f"checkpoint keys differ from net: {sorted(set(tensors) ^ want)}")
        for k, p in self.params.items():
            t = tensors[f"param.{k}"]
            if t.shape != p.shape:
                raise ValueError(f"checkpoint {k} has shape {t.shape}, net expects {p.shape}")
            self.params[k] = t
        for k, st in self.states.items():
            self.states[k] = BatchNormState(
                tensors[f"state.{k}.mean"].numpy(), tensors[f"state.{k}.var"].numpy(), st.momentum, st.eps
            )
        return meta


def make_toy_net(
    kind: str = "i3d",
    depth: int = 1,
    width: int = 8,
    in_channels: int = 4,
    snippets: int = 4,
    beta: float = 1 / 8,
    alpha: int = 2,
    kernel_size: int = 3,
    position: str = "II",
    temporal_kernel: int = 1,
    num_classes: int = 2,
    seed: int = 0,
) -> ToyNet:
    """Stack of ``depth`` identical blocks, each carrying one DSA module.

    ``beta=0`` gives the snippet-independent baseline with the same weights
    layout (the DSA MLP exists but never runs).
    """
    mid = max(width // 2, 1) if kind == "i3d" else None
    probe = BlockSpec(kind, width, mid, temporal_kernel)
    cfg = DsaConfig(
        channels=probe.host_channels(position),
        snippets=snippets,
        kernel_size=kernel_size,
        alpha=alpha,
        beta=beta,
    )
    spec = BlockSpec(kind, width, mid, temporal_kernel, DsaPlacement(position, cfg))
    return ToyNet.build(in_channels, width, [spec] * depth, num_classes, seed)


# ---------------------------------------------------------------------------
# Synthetic order task


@dataclass
class OrderDataset:
    x: np.ndarray  # (n, C, U, T, H, W)
    y: np.ndarray  # (n,) int
    amplitudes: np.ndarray  # (n, U) int

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "OrderDataset":
        return OrderDataset(self.x[idx], self.y[idx], self.amplitudes[idx])


ORDER_SHAPE = dict(channels=4, snippets=4, frames=2, height=4, width=4)


def render_order_sample(amplitudes, center, rng: np.random.Generator, noise: float = 0.1) -> np.ndarray:
    """One sample: a Gaussian blob scaled by ``amplitudes[u]`` in snippet u, plus noise."""
    c, u, t = ORDER_SHAPE["channels"], ORDER_SHAPE["snippets"], ORDER_SHAPE["frames"]
    hh, ww = np.mgrid[0 : ORDER_SHAPE["height"], 0 : ORDER_SHAPE["width"]]
    blob = np.exp(-((hh - center[0]) ** 2 + (ww - center[1]) ** 2) / 2.0)
    amps = np.asarray(amplitudes, dtype=np.float64)
    clean = np.broadcast_to(amps[None, :, None, None, None] * blob, (c, u, t) + blob.shape)
    return clean + rng.normal(0.0, noise, size=clean.shape)


def make_order_dataset(n: int, seed: int = 0, noise: float = 0.1) -> OrderDataset:
    """Balanced binary task: label 1 iff blob amplitudes increase across snippets.

    Every sample's amplitudes are a permutation of 1..4; positives are the
    identity permutation, negatives one of the other 23 drawn uniformly.
    """
    if n % 2:
        raise ValueError(f"make_order_dataset: n must be even, got {n}")
    rng = np.random.default_rng(seed)
    ident = np.arange(1, 5)
    perms = [np.array(p) for p in _permutations(ident) if not np.array_equal(p, ident)]
    labels = np.array([1] * (n // 2) + [0] * (n // 2))
    rng.shuffle(labels)
    xs, amps = [], []
    for lab in labels:
        a = ident if lab == 1 else perms[rng.integers(len(perms))]
        center = rng.uniform(0.0, ORDER_SHAPE["height"] - 1, size=2)
        xs.append(render_order_sample(a, center, rng, noise))
        amps.append(a)
    return OrderDataset(np.stack(xs), labels.astype(np.int64), np.stack(amps).astype(np.int64))


def _permutations(items):
    return [tuple(p) for p in itertools.permutations(items)]


def save_order_dataset(directory: str | Path, ds: OrderDataset, meta: dict | None = None) -> Path:
    tensors = {"x": Tensor(ds.x), "y": Tensor(ds.y.astype(np.float64)), "amplitudes": Tensor(ds.amplitudes.astype(np.float64))}
    return io.save_bundle(directory, tensors, meta)


def load_order_dataset(directory: str | Path) -> OrderDataset:
    tensors, _ = io.load_bundle(directory)
    return OrderDataset(
        tensors["x"].numpy(), tensors["y"].numpy().astype(np.int64), tensors["amplitudes"].numpy().astype(np.int64)
    )


def split_dataset(ds: OrderDataset, holdout: float = 0.25) -> tuple[OrderDataset, OrderDataset]:
    cut = len(ds) - int(round(holdout * len(ds)))
    idx = np.arange(len(ds))
    return ds.subset(idx[:cut]), ds.subset(idx[cut:])


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainResult:
    history: list[dict]
    params: dict[str, Tensor]

    @property
    def final(self) -> dict:
        return self.history[-1]


def accuracy(net: ToyNet, ds: OrderDataset, batch_size: int = 256) -> float:
    correct = 0
    for lo in range(0, len(ds), batch_size):
        logits = net(Tensor(ds.x[lo : lo + batch_size]), mode="eval")
        correct += int((logits.data.argmax(axis=1) == ds.y[lo : lo + batch_size]).sum())
    return correct / len(ds)


def loss_and_grads(net: ToyNet, x: Tensor, y, mode: str = "train"):
    with GradTape() as tape:
        loss = tc.cross_entropy(net(x, mode=mode), y)
    grads = backward(tape, loss)
    return loss.item(), {k: grads[p] for k, p in net.params.items()}


def sgd_step(net: ToyNet, grads: dict[str, Tensor], lr: float) -> None:
    for k, g in grads.items():
        net.params[k] = Tensor._wrap(net.params[k].data - lr * g.data)


def train_toy(
    net: ToyNet,
    train: OrderDataset,
    holdout: OrderDataset,
    epochs: int,
    lr: float,
    seed: int = 0,
    batch_size: int = 32,
) -> TrainResult:
    """Plain minibatch SGD on video-level cross-entropy; mutates ``net``.

    History has one entry per epoch (entry 0 is the untrained net).
    """
    rng = np.random.default_rng(seed)
    history = [
        {"epoch": 0, "loss": None, "train_acc": accuracy(net, train), "holdout_acc": accuracy(net, holdout)}
    ]
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for step, lo in enumerate(range(0, len(train), batch_size)):
            idx = order[lo : lo + batch_size]
            loss, grads = loss_and_grads(net, Tensor(train.x[idx]), train.y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch}, step {step} (lr={lr})")
            sgd_step(net, grads, lr)
            losses.append(loss)
        rec = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "train_acc": accuracy(net, train),
            "holdout_acc": accuracy(net, holdout),
        }
        log.debug("epoch %d loss %.4f train %.3f holdout %.3f", epoch, rec["loss"], rec["train_acc"], rec["holdout_acc"])
        history.append(rec)
    return TrainResult(history, dict(net.params))
