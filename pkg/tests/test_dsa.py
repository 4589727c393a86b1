import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segagg import tensor as tc
from segagg.dsa import (
    DsaConfig,
    DsaParams,
    dsa_cost_items,
    dsa_forward,
    dsa_param_count,
    generate_kernel,
    load_dsa_params,
    pool_context,
    save_dsa_params,
    segment_conv,
)
from segagg.tensor import BatchNormState, Tensor


def features(rng, n=2, c=4, u=4, t=2, h=2, w=2):
    return Tensor(rng.uniform(-1, 1, size=(n, c, u, t, h, w)))


# -- config -------------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(kernel_size=2),
        dict(kernel_size=0),
        dict(snippets=0),
        dict(beta=1.5),
        dict(beta=-0.1),
        dict(alpha=0),
        dict(context="global"),
    ],
)
def test_config_rejects(kwargs):
    with pytest.raises(ValueError):
        DsaConfig(channels=8, **kwargs)


def test_config_defaults_and_split():
    cfg = DsaConfig(channels=64)
    assert (cfg.snippets, cfg.kernel_size, cfg.alpha, cfg.beta) == (4, 3, 2, 1 / 8)
    assert cfg.split == 8 and cfg.hidden == 8
    assert DsaConfig(channels=4, beta=1 / 8).split == 0  # round(0.5) is 0
    assert DsaConfig(channels=12, beta=1 / 8).split == 2  # round(1.5) is 2


@given(st.integers(0, 512), st.floats(0, 1))
def test_split_in_range(c, beta):
    assert 0 <= DsaConfig(channels=c, beta=beta).split <= c


# -- pool_context ---------------------------------------------------------------


def test_pool_context_examples():
    assert np.array_equal(pool_context(Tensor(np.full((1, 2, 4, 2, 3, 3), 3.0))).data, np.full((1, 2, 4), 3.0))
    v = np.zeros((1, 2, 4, 2, 3, 3))
    for u in range(4):
        v[:, :, u] = u
    assert pool_context(Tensor(v)).shape == (1, 2, 4)
    np.testing.assert_array_equal(pool_context(Tensor(v)).data[0, 0], [0, 1, 2, 3])


# -- generate_kernel ---------------------------------------------------------------


def test_zero_params_give_uniform_rows():
    cfg = DsaConfig(channels=3)
    ctx = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)))
    k = generate_kernel(ctx, DsaParams.zeros(cfg), cfg, "train")
    np.testing.assert_allclose(k.data, 1 / 3, rtol=0, atol=1e-15)


def test_kernel_matches_hand_evaluation():
    cfg = DsaConfig(channels=1, snippets=2, kernel_size=3, alpha=1, beta=1.0)
    params = DsaParams(
        w1=Tensor([[0.5, -0.25], [0.1, 0.3]]),
        b1=Tensor([0.05, -0.02]),
        bn_weight=Tensor([1.2, 0.8]),
        bn_bias=Tensor([0.1, 0.0]),
        w2=Tensor([[0.2, -0.1, 0.4], [0.3, 0.5, -0.2]]),
        b2=Tensor([0.01, 0.02, -0.03]),
        bn_state=BatchNormState(np.array([0.1, -0.05]), np.array([0.9, 1.1])),
    )
    ctx = [0.7, -0.4]
    # Scalar walk-through: affine, BN (eval), ReLU, affine, softmax.
    w1 = [[0.5, -0.25], [0.1, 0.3]]
    hid = [ctx[0] * w1[0][j] + ctx[1] * w1[1][j] for j in range(2)]
    hid = [hid[0] + 0.05, hid[1] - 0.02]
    mean, var, gam, bet = [0.1, -0.05], [0.9, 1.1], [1.2, 0.8], [0.1, 0.0]
    hid = [gam[j] * (hid[j] - mean[j]) / math.sqrt(var[j] + 1e-5) + bet[j] for j in range(2)]
    hid = [max(h, 0.0) for h in hid]
    w2 = [[0.2, -0.1, 0.4], [0.3, 0.5, -0.2]]
    b2 = [0.01, 0.02, -0.03]
    logits = [hid[0] * w2[0][l] + hid[1] * w2[1][l] + b2[l] for l in range(3)]
    z = sum(math.exp(a) for a in logits)
    expect = [math.exp(a) / z for a in logits]
    got = generate_kernel(Tensor([[ctx]]), params, cfg, "eval").data[0, 0]
    np.testing.assert_allclose(got, expect, rtol=0, atol=1e-10)


def test_kernel_rejects_param_shape_mismatch():
    cfg = DsaConfig(channels=2, snippets=4)
    bad = DsaParams.zeros(DsaConfig(channels=2, snippets=3))
    with pytest.raises(ValueError, match="w1"):
        generate_kernel(Tensor.zeros((1, 2, 4)), bad, cfg)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["train", "eval"]), st.sampled_from([1, 3, 5]))
def test_kernel_rows_normalized(seed, mode, taps):
    rng = np.random.default_rng(seed)
    cfg = DsaConfig(channels=3, kernel_size=taps)
    params = DsaParams.init(cfg, rng)
    k = generate_kernel(Tensor(rng.normal(0, 3, size=(2, 3, 4))), params, cfg, mode).data
    np.testing.assert_allclose(k.sum(axis=2), 1.0, rtol=0, atol=1e-12)
    assert np.all(k > 0)


# -- segment_conv ---------------------------------------------------------------------


def test_centered_delta_is_exact_identity():
    v = features(np.random.default_rng(0))
    k = np.zeros((2, 4, 3))
    k[:, :, 1] = 1.0
    assert np.array_equal(segment_conv(v, Tensor(k)).data, v.data)


def test_uniform_kernel_moving_average():
    v = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 4, 1, 1, 1))
    out = segment_conv(v, Tensor(np.full((1, 1, 3), 1 / 3))).data.ravel()
    np.testing.assert_allclose(out, [1.0, 2.0, 3.0, 7 / 3], rtol=0, atol=1e-15)


def test_segment_conv_rejects_even_taps():
    with pytest.raises(ValueError, match="even"):
        segment_conv(features(np.random.default_rng(0)), Tensor.ones((2, 4, 2)))


def test_segment_conv_rejects_mismatched_kernel():
    with pytest.raises(ValueError):
        segment_conv(features(np.random.default_rng(0)), Tensor.ones((2, 3, 3)))


def test_segment_conv_taps_follow_offset_convention():
    # tap 0 reads u-1, tap 2 reads u+1
    v = Tensor(np.array([10.0, 20.0, 30.0]).reshape(1, 1, 3, 1, 1, 1))
    left = segment_conv(v, Tensor([[[1.0, 0.0, 0.0]]])).data.ravel()
    right = segment_conv(v, Tensor([[[0.0, 0.0, 1.0]]])).data.ravel()
    np.testing.assert_array_equal(left, [0, 10, 20])
    np.testing.assert_array_equal(right, [20, 30, 0])


# -- dsa_forward -------------------------------------------------------------------------


def test_beta_zero_is_bitwise_identity():
    rng = np.random.default_rng(1)
    cfg = DsaConfig(channels=4, beta=0.0)
    v = features(rng)
    assert np.array_equal(dsa_forward(v, DsaParams.init(cfg, rng), cfg).data, v.data)


def test_beta_one_zero_params_moving_average():
    rng = np.random.default_rng(2)
    cfg = DsaConfig(channels=4, beta=1.0)
    v = features(rng)
    got = dsa_forward(v, DsaParams.zeros(cfg), cfg, "train").data
    x = v.data
    pad = np.concatenate([np.zeros_like(x[:, :, :1]), x, np.zeros_like(x[:, :, :1])], axis=2)
    expect = (pad[:, :, :-2] + pad[:, :, 1:-1] + pad[:, :, 2:]) / 3
    np.testing.assert_allclose(got, expect, rtol=0, atol=1e-15)


def test_beta_half_split_ordering():
    rng = np.random.default_rng(3)
    cfg = DsaConfig(channels=4, beta=0.5)
    v = features(rng)
    params = DsaParams.init(cfg, rng)
    out = dsa_forward(v, params, cfg, "eval").data
    assert np.array_equal(out[:, 2:], v.data[:, 2:])
    v1 = Tensor(v.data[:, :2])
    k = generate_kernel(pool_context(v1), params, cfg, "eval")
    assert np.array_equal(out[:, :2], segment_conv(v1, k).data)


def test_full_context_changes_only_the_kernel_population():
    rng = np.random.default_rng(4)
    split = DsaConfig(channels=4, beta=0.5)
    full = DsaConfig(channels=4, beta=0.5, context="full")
    v = features(rng)
    params = DsaParams.init(split, rng)
    a = dsa_forward(v, params, split, "eval").data
    b = dsa_forward(v, params, full, "eval").data
    # eval-mode BN is per row, so the aggregated channels' kernels coincide
    np.testing.assert_array_equal(a, b)
    a = dsa_forward(v, DsaParams.init(split, np.random.default_rng(5)), split, "train").data
    b = dsa_forward(v, DsaParams.init(split, np.random.default_rng(5)), full, "train").data
    assert not np.array_equal(a[:, :2], b[:, :2])
    assert np.array_equal(a[:, 2:], b[:, 2:])


def test_dsa_forward_rejects_shape():
    cfg = DsaConfig(channels=4)
    with pytest.raises(ValueError):
        dsa_forward(features(np.random.default_rng(0), c=3), DsaParams.zeros(cfg), cfg)


def test_dsa_mixes_snippets():
    rng = np.random.default_rng(6)
    cfg = DsaConfig(channels=4, beta=1.0)
    v = features(rng)
    params = DsaParams.init(cfg, rng)
    base = dsa_forward(v, params, cfg, "eval").data
    bumped = v.data.copy()
    bumped[:, :, 0] += 1.0
    out = dsa_forward(Tensor(bumped), params, cfg, "eval").data
    assert not np.allclose(out[:, :, 1], base[:, :, 1])


# -- cost ----------------------------------------------------------------------------------


def test_param_counts():
    assert dsa_param_count(DsaConfig(channels=8, alpha=2)) == 83
    assert dsa_param_count(DsaConfig(channels=8, alpha=1)) == 16 + 4 + 8 + 12 + 3 == 43
    assert dsa_param_count(DsaConfig(channels=8, alpha=2)) == sum(
        t.size for t in DsaParams.zeros(DsaConfig(channels=8)).tensors().values()
    )
    ratio = dsa_param_count(DsaConfig(channels=8, alpha=8)) / dsa_param_count(DsaConfig(channels=8, alpha=4))
    assert 1.9 < ratio < 2.1


def test_cost_items():
    cfg = DsaConfig(channels=16, beta=1 / 8)
    items = dsa_cost_items(cfg, (2, 16, 4, 3, 5, 5))
    assert items["segment_conv"] == 2 * 2 * 4 * 3 * 5 * 5 * 3
    assert items["total"] == sum(v for k, v in items.items() if k != "total")
    zero = dsa_cost_items(DsaConfig(channels=16, beta=0.0), (2, 16, 4, 3, 5, 5))
    assert zero["total"] == 0 and zero["pool"] == 0


# -- serialization --------------------------------------------------------------------------


def test_params_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    cfg = DsaConfig(channels=16, context="full")
    params = DsaParams.init(cfg, rng)
    tc.batch_norm(Tensor(rng.normal(size=(10, 8))), params.bn_weight, params.bn_bias, params.bn_state, "train")
    save_dsa_params(tmp_path, params, cfg)
    back, cfg2 = load_dsa_params(tmp_path)
    assert cfg2 == cfg
    for name, t in params.tensors().items():
        assert np.array_equal(back.tensors()[name].data, t.data)
    assert np.array_equal(back.bn_state.var, params.bn_state.var)
