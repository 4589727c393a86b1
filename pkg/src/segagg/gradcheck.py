"""Central finite-difference checks for every differentiable op.

Each case builds named float64 arrays and a function of the corresponding
tensors; the scalar probe is ``sum(out * R)`` for a fixed random ``R``, which
avoids the degenerate all-ones direction (e.g. softmax rows summing to 1).
The relative error is ``||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-4)``;
the floor keeps exactly-zero gradients (a bias feeding batch norm) from
dividing finite-difference noise by itself.

The ToyNet cases perturb a seeded sample of at most ``SAMPLED_COORDS``
coordinates per tensor; every other case perturbs every coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import backbone as bb
from . import tensor as tc
from .dsa import DsaConfig, DsaParams, dsa_forward, generate_kernel, pool_context, segment_conv
from .tensor import BatchNormState, GradTape, Tensor

STEP = 1e-5
TOLERANCE = 1e-4
NORM_FLOOR = 1e-4
SAMPLED_COORDS = 24

Build = Callable[[np.random.Generator], tuple[dict[str, np.ndarray], Callable[[dict[str, Tensor]], Tensor]]]


@dataclass
class CaseResult:
    name: str
    seed: int
    error: float


@dataclass
class OpSummary:
    name: str
    worst_error: float
    worst_seed: int
    seeds: int

    @property
    def passed(self) -> bool:
        return self.worst_error < TOLERANCE


def _u(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def _video(rng, n=2, c=3, u=3, t=2, h=3, w=3):
    return _u(rng, n, c, u, t, h, w)


def _case_add(rng):
    return {"a": _u(rng, 3, 4), "b": _u(rng, 3, 4)}, lambda p: tc.add(p["a"], p["b"])


def _case_mul(rng):
    return {"a": _u(rng, 3, 4), "b": _u(rng, 3, 4)}, lambda p: tc.mul(p["a"], p["b"])


def _case_add_bias(rng):
    return {"x": _u(rng, 5, 3), "b": _u(rng, 3)}, lambda p: tc.add_bias(p["x"], p["b"])


def _case_matmul(rng):
    return {"a": _u(rng, 3, 4), "b": _u(rng, 4, 2)}, lambda p: tc.matmul(p["a"], p["b"])


def _case_relu(rng):
    x = _u(rng, 4, 5)
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the kink
    return {"x": x}, lambda p: tc.relu(p["x"])


def _case_softmax(rng):
    return {"x": _u(rng, 4, 3)}, lambda p: tc.softmax(p["x"], axis=1)


def _case_pool(rng):
    return {"x": _video(rng)}, lambda p: tc.global_avg_pool(p["x"], (3, 4, 5))


def _case_bn_train(rng):
    def fn(p):
        return tc.batch_norm(p["x"], p["gamma"], p["beta"], BatchNormState.fresh(3), "train")

    return {"x": _u(rng, 6, 3), "gamma": _u(rng, 3), "beta": _u(rng, 3)}, fn


def _case_bn_video(rng):
    def fn(p):
        return tc.batch_norm(p["x"], p["gamma"], p["beta"], BatchNormState.fresh(3), "train")

    return {"x": _video(rng), "gamma": _u(rng, 3), "beta": _u(rng, 3)}, fn


def _case_bn_eval(rng):
    state = BatchNormState(_u(rng, 3), rng.uniform(0.5, 2.0, size=3))

    def fn(p):
        return tc.batch_norm(p["x"], p["gamma"], p["beta"], state, "eval")

    return {"x": _u(rng, 6, 3), "gamma": _u(rng, 3), "beta": _u(rng, 3)}, fn


def _case_conv_spatial(rng):
    return {"x": _video(rng, n=1), "w": _u(rng, 2, 3, 3, 3)}, lambda p: tc.conv_spatial(p["x"], p["w"], 1, 1)


def _case_conv_spatial_strided(rng):
    return {"x": _video(rng, n=1, h=5, w=4), "w": _u(rng, 2, 3, 3, 3)}, lambda p: tc.conv_spatial(p["x"], p["w"], 2, 1)


def _case_conv_temporal(rng):
    return {"x": _video(rng, n=1, t=3), "w": _u(rng, 2, 3, 3)}, lambda p: tc.conv_temporal(p["x"], p["w"], 1, 1)


def _case_split_concat(rng):
    def fn(p):
        a, b = tc.split_channels(p["x"], 1)
        return tc.concat_channels(tc.scale(b, 2.0), a)

    return {"x": _video(rng)}, fn


def _case_reshape_transpose(rng):
    return {"x": _u(rng, 2, 3, 4)}, lambda p: tc.reshape(tc.transpose(p["x"], (2, 0, 1)), (4, 6))


def _case_cross_entropy(rng):
    labels = rng.integers(0, 3, size=5)
    return {"x": _u(rng, 5, 3)}, lambda p: tc.cross_entropy(p["x"], labels)


def _case_segment_conv(rng):
    k = rng.uniform(0.1, 1.0, size=(2, 3, 3))
    return {"v": _video(rng), "k": k}, lambda p: segment_conv(p["v"], p["k"])


def _dsa_arrays(rng, cfg: DsaConfig):
    params = DsaParams.init(cfg, rng)
    arrays = {f"dsa.{k}": t.numpy() for k, t in params.tensors().items()}
    arrays["dsa.b1"] = _u(rng, cfg.hidden) * 0.1
    arrays["dsa.bn_weight"] = rng.uniform(0.5, 1.5, size=cfg.hidden)
    arrays["dsa.bn_bias"] = _u(rng, cfg.hidden) * 0.1
    arrays["dsa.b2"] = _u(rng, cfg.kernel_size) * 0.1
    return arrays


def _dsa_params(p: dict[str, Tensor]) -> DsaParams:
    return DsaParams(**{k[4:]: v for k, v in p.items() if k.startswith("dsa.")})


def _case_generate_kernel(rng):
    cfg = DsaConfig(channels=3, snippets=3)
    arrays = _dsa_arrays(rng, cfg)
    arrays["ctx"] = _u(rng, 2, 3, 3)
    return arrays, lambda p: generate_kernel(p["ctx"], _dsa_params(p), cfg, "train")


def _case_pool_context(rng):
    return {"v": _video(rng)}, lambda p: pool_context(p["v"])


def _case_dsa_forward(rng):
    cfg = DsaConfig(channels=4, snippets=3, beta=0.5)
    arrays = _dsa_arrays(rng, cfg)
    arrays["v"] = _video(rng, c=4)
    return arrays, lambda p: dsa_forward(p["v"], _dsa_params(p), cfg, "train")


def _case_dsa_forward_full(rng):
    cfg = DsaConfig(channels=4, snippets=3, beta=0.5, context="full")
    arrays = _dsa_arrays(rng, cfg)
    arrays["v"] = _video(rng, c=4)
    return arrays, lambda p: dsa_forward(p["v"], _dsa_params(p), cfg, "train")


def _case_temporal_shift(rng):
    return {"x": _video(rng, c=8, t=3)}, lambda p: bb.temporal_shift(p["x"], 1 / 8)


def _case_consensus(rng):
    return {"x": _u(rng, 2, 4, 3)}, lambda p: bb.consensus(p["x"])


def _toynet_case(kind: str):
    def build(rng):
        seed = int(rng.integers(2**31))
        net = bb.make_toy_net(kind=kind, depth=2, width=4, in_channels=2, beta=0.5, seed=seed)
        arrays = {k: t.numpy() for k, t in net.params.items()}
        # Non-trivial BN affine parameters so every path carries signal.
        for k in arrays:
            if k.endswith(".weight") and "bn" in k:
                arrays[k] = rng.uniform(0.5, 1.5, size=arrays[k].shape)
            elif k.endswith(".bias") or k.endswith(".b1") or k.endswith(".b2"):
                arrays[k] = _u(rng, *arrays[k].shape) * 0.1
        arrays["input"] = _video(rng, c=2, u=4, h=3, w=3)

        def fn(p):
            trial = net.copy()
            trial.params = {k: p[k] for k in net.params}
            return trial(p["input"], mode="train")

        return arrays, fn

    return build


CASES: dict[str, Build] = {
    "add": _case_add,
    "mul": _case_mul,
    "add_bias": _case_add_bias,
    "matmul": _case_matmul,
    "relu": _case_relu,
    "softmax": _case_softmax,
    "global_avg_pool": _case_pool,
    "batch_norm_train": _case_bn_train,
    "batch_norm_video": _case_bn_video,
    "batch_norm_eval": _case_bn_eval,
    "conv_spatial": _case_conv_spatial,
    "conv_spatial_stride2": _case_conv_spatial_strided,
    "conv_temporal": _case_conv_temporal,
    "split_concat": _case_split_concat,
    "reshape_transpose": _case_reshape_transpose,
    "cross_entropy": _case_cross_entropy,
    "segment_conv": _case_segment_conv,
    "pool_context": _case_pool_context,
    "generate_kernel": _case_generate_kernel,
    "dsa_forward": _case_dsa_forward,
    "dsa_forward_full_context": _case_dsa_forward_full,
    "temporal_shift": _case_temporal_shift,
    "consensus": _case_consensus,
    "toynet_i3d": _toynet_case("i3d"),
    "toynet_tsm": _toynet_case("tsm"),
}


SAMPLED = {"toynet_i3d", "toynet_tsm"}


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), NORM_FLOOR)
    return float(np.linalg.norm(a - b) / denom)


def _coords(shape, limit, rng):
    coords = list(np.ndindex(shape))
    if limit is None or len(coords) <= limit:
        return coords
    pick = rng.choice(len(coords), size=limit, replace=False)
    return [coords[i] for i in sorted(pick)]


def check_case(build: Build, seed: int, h: float = STEP, max_coords: int | None = None) -> float:
    """Worst relative error over all inputs of one case at one seed."""
    rng = np.random.default_rng(seed)
    arrays, fn = build(rng)
    probe_rng = np.random.default_rng([seed, 1])

    def as_tensors(arrs):
        return {k: Tensor(v) for k, v in arrs.items()}

    tensors = as_tensors(arrays)
    with GradTape() as tape:
        out = fn(tensors)
        probe = probe_rng.uniform(-1.0, 1.0, size=out.shape)
        loss = tc.weighted_sum(out, probe)
    grads = tc.backward(tape, loss)

    def value(arrs) -> float:
        return float((fn(as_tensors(arrs)).data * probe).sum())

    coord_rng = np.random.default_rng([seed, 2])
    worst = 0.0
    for name, arr in arrays.items():
        coords = _coords(arr.shape, max_coords, coord_rng)
        numeric = np.zeros(len(coords))
        for i, idx in enumerate(coords):
            plus = dict(arrays)
            minus = dict(arrays)
            plus[name] = arr.copy()
            minus[name] = arr.copy()
            plus[name][idx] += h
            minus[name][idx] -= h
            numeric[i] = (value(plus) - value(minus)) / (2 * h)
        analytic = grads[tensors[name]].data
        analytic = np.array([analytic[idx] for idx in coords])
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def run_case(name: str, seeds, h: float = STEP) -> OpSummary:
    limit = SAMPLED_COORDS if name in SAMPLED else None
    results = [CaseResult(name, s, check_case(CASES[name], s, h, limit)) for s in seeds]
    worst = max(results, key=lambda r: r.error)
    return OpSummary(name, worst.error, worst.seed, len(results))


def run_suite(seeds, names=None, h: float = STEP, jobs: int = 1) -> list[OpSummary]:
    names = list(CASES) if names is None else list(names)
    seeds = list(seeds)
    if jobs <= 1:
        return [run_case(n, seeds, h) for n in names]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(jobs) as pool:
        return list(pool.map(run_case, names, [seeds] * len(names), [h] * len(names)))
