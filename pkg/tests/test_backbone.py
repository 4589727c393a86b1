import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segagg import backbone as bb
from segagg import tensor as tc
from segagg.dsa import DsaConfig
from segagg.tensor import GradTape, Tensor, backward


def video(seed, n=2, c=8, u=4, t=3, h=3, w=3):
    return Tensor(np.random.default_rng(seed).normal(size=(n, c, u, t, h, w)))


# -- temporal shift -------------------------------------------------------------


def test_shift_zero_fraction_is_identity():
    x = video(0)
    assert np.array_equal(bb.temporal_shift(x, 0.0).data, x.data)


def test_shift_single_frame_zeroes_shifted_channels():
    x = video(1, t=1)
    out = bb.temporal_shift(x, 1 / 8).data
    assert not out[:, :2].any()
    assert np.array_equal(out[:, 2:], x.data[:, 2:])


def test_shift_channel_contract():
    x = video(2)
    out = bb.temporal_shift(x, 1 / 8).data
    np.testing.assert_array_equal(out[:, 0, :, 1:], x.data[:, 0, :, :-1])
    assert not out[:, 0, :, 0].any()
    np.testing.assert_array_equal(out[:, 1, :, :-1], x.data[:, 1, :, 1:])
    assert not out[:, 1, :, -1].any()
    assert np.array_equal(out[:, 2:], x.data[:, 2:])


def test_shift_rejects_bad_fraction():
    with pytest.raises(ValueError):
        bb.temporal_shift(video(0), 0.6)


# -- consensus ----------------------------------------------------------------------


def test_consensus_examples():
    same = Tensor(np.tile([[0.3, -1.2]], (1, 3, 1)))
    np.testing.assert_array_equal(bb.consensus(same).data, [[0.3, -1.2]])
    np.testing.assert_array_equal(bb.consensus(Tensor([[[1.0, 0.0], [0.0, 1.0]]])).data, [[0.5, 0.5]])


def test_consensus_argmax_agrees_with_unanimous_snippets():
    # Exhaustive 2-class, U=2 grid: a disagreement with every snippet needs a split vote.
    grid = np.linspace(-2, 2, 9)
    for a0, a1, b0, b1 in itertools.product(grid, repeat=4):
        logits = np.array([[[a0, a1], [b0, b1]]])
        votes = logits[0].argmax(axis=1)
        winner = bb.consensus(Tensor(logits)).data[0].argmax()
        if winner not in votes:
            assert votes[0] != votes[1] or a0 == a1 or b0 == b1


@given(st.permutations(range(5)), st.integers(0, 2**32 - 1))
def test_consensus_permutation_invariant_bitwise(perm, seed):
    x = np.random.default_rng(seed).normal(size=(3, 5, 4))
    a = bb.consensus(Tensor(x)).data
    b = bb.consensus(Tensor(x[:, list(perm)])).data
    assert a.tobytes() == b.tobytes()


# -- blocks -----------------------------------------------------------------------------


def spec_with(kind, position, beta, width=8, mid=4, kt=1):
    probe = bb.BlockSpec(kind, width, mid, kt)
    cfg = DsaConfig(channels=probe.host_channels(position), beta=beta)
    return bb.BlockSpec(kind, width, mid, kt, bb.DsaPlacement(position, cfg))


def test_position_three_rejected_on_tsm():
    with pytest.raises(ValueError, match="III"):
        spec_with("tsm", "III", 0.5)


def test_dsa_width_must_match_host():
    with pytest.raises(ValueError):
        bb.BlockSpec("i3d", 8, 4, 1, bb.DsaPlacement("II", DsaConfig(channels=8)))


@pytest.mark.parametrize("kind", ["i3d", "tsm"])
def test_zero_branch_gives_relu_of_input(kind):
    spec = bb.BlockSpec(kind, 8, 4)
    params, states = bb.init_block(spec, np.random.default_rng(0))
    params = {k: (Tensor.zeros(v.shape) if k.startswith("conv") else v) for k, v in params.items()}
    x = video(3)
    out = bb.run_block(x, spec, params, states, "train")
    assert np.array_equal(out.data, np.maximum(x.data, 0.0))


@pytest.mark.parametrize(
    "kind,position", [("i3d", p) for p in bb.POSITIONS] + [("tsm", p) for p in ("I", "II", "IV")]
)
def test_beta_zero_block_equals_plain_block(kind, position):
    spec = spec_with(kind, position, 0.0, kt=3)
    plain = bb.BlockSpec(kind, 8, 4, 3)
    params, states = bb.init_block(spec, np.random.default_rng(4))
    x = video(5)
    with_dsa = bb.run_block(x, spec, params, states, "eval").data
    without = bb.run_block(x, plain, params, states, "eval").data
    assert np.array_equal(with_dsa, without)


def test_positions_are_wired_differently():
    x = video(6)
    outs = {}
    for pos in ("I", "II"):
        spec = spec_with("i3d", pos, 1.0, mid=8)
        params, states = bb.init_block(spec, np.random.default_rng(7))
        outs[pos] = bb.run_block(x, spec, params, states, "eval").data
    assert not np.allclose(outs["I"], outs["II"])


# -- ToyNet ---------------------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["i3d", "tsm"])
def test_snippet_batching_is_bitwise(kind):
    net = bb.make_toy_net(kind=kind, depth=2, width=8, beta=0.0, temporal_kernel=3 if kind == "i3d" else 1, seed=1)
    x = video(8, c=4)
    batched = net.snippet_logits(x, "eval").data
    for u in range(4):
        single = bb.make_toy_net(
            kind=kind, depth=2, width=8, beta=0.0, snippets=1, temporal_kernel=3 if kind == "i3d" else 1, seed=1
        )
        # DSA weights are sized by U; at beta=0 they never run, so only the rest is shared.
        single.params = {k: (v if ".dsa." in k else net.params[k]) for k, v in single.params.items()}
        one = single.snippet_logits(Tensor(x.data[:, :, u : u + 1]), "eval").data
        assert np.array_equal(one[:, 0], batched[:, u])


def test_baseline_is_order_blind_and_dsa_is_not():
    x = video(9, c=4)
    perm = [2, 0, 3, 1]
    base = bb.make_toy_net(width=16, beta=0.0, seed=2)
    a = base(x).data
    b = base(Tensor(x.data[:, :, perm])).data
    assert a.tobytes() == b.tobytes()
    assert np.array_equal(base.snippet_logits(Tensor(x.data[:, :, perm])).data, base.snippet_logits(x).data[:, perm])
    dsa = bb.make_toy_net(width=16, beta=1 / 8, seed=2)
    assert not np.array_equal(dsa(x).data, dsa(Tensor(x.data[:, :, perm])).data)


def test_checkpoint_round_trip(tmp_path):
    net = bb.make_toy_net(width=16, seed=3)
    train, hold = bb.split_dataset(bb.make_order_dataset(40, seed=0))
    bb.train_toy(net, train, hold, epochs=1, lr=0.05)
    net.save(tmp_path, {"width": 16})
    fresh = bb.make_toy_net(width=16, seed=99)
    assert fresh.load(tmp_path) == {"width": 16}
    x = video(10, c=4)
    assert np.array_equal(fresh(x).data, net(x).data)
    with pytest.raises(ValueError):
        bb.make_toy_net(width=8).load(tmp_path)


# -- dataset --------------------------------------------------------------------------------


def test_dataset_labels_follow_order():
    ds = bb.make_order_dataset(200, seed=0)
    assert ds.x.shape == (200, 4, 4, 2, 4, 4)
    assert ds.y.sum() == 100
    for amps, y in zip(ds.amplitudes, ds.y):
        assert sorted(amps) == [1, 2, 3, 4]
        assert y == int(list(amps) == [1, 2, 3, 4])


def test_reversed_is_negative_and_shuffle_keeps_snippet_stats():
    center = (1.5, 1.5)
    pos = bb.render_order_sample([1, 2, 3, 4], center, np.random.default_rng(1), noise=0.0)
    perm = [3, 2, 1, 0]
    shuffled = pos[:, perm]
    neg = bb.render_order_sample([4, 3, 2, 1], center, np.random.default_rng(1), noise=0.0)
    assert np.array_equal(shuffled, neg)
    stats = lambda v: sorted(v[:, u].mean() for u in range(4))  # noqa: E731
    assert stats(shuffled) == stats(pos)


def test_dataset_deterministic_and_round_trip(tmp_path):
    a, b = bb.make_order_dataset(20, seed=5), bb.make_order_dataset(20, seed=5)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    bb.save_order_dataset(tmp_path, a, {"seed": 5})
    back = bb.load_order_dataset(tmp_path)
    assert np.array_equal(back.x, a.x) and np.array_equal(back.y, a.y)
    with pytest.raises(ValueError):
        bb.make_order_dataset(21)


# -- training ---------------------------------------------------------------------------------


def small_task():
    return bb.split_dataset(bb.make_order_dataset(64, seed=1))


def test_lr_zero_changes_nothing():
    net = bb.make_toy_net(width=16, seed=4)
    before = {k: v.data.copy() for k, v in net.params.items()}
    train, hold = small_task()
    res = bb.train_toy(net, train, hold, epochs=2, lr=0.0)
    for k, v in net.params.items():
        assert np.array_equal(v.data, before[k])
    assert 0.25 <= res.final["holdout_acc"] <= 0.75


def test_sgd_step_descends_along_directional_derivative():
    net = bb.make_toy_net(width=16, seed=5)
    train, _ = small_task()
    x, y = Tensor(train.x[:16]), train.y[:16]

    def loss_at(n):
        return tc.cross_entropy(n(x, mode="train"), y).item()

    probe = net.copy()
    loss0, grads = bb.loss_and_grads(probe, x, y)
    gnorm2 = sum(float((g.data**2).sum()) for g in grads.values())
    # Finite-difference directional derivative along -grad matches -|g|^2.
    h = 1e-6
    moved = net.copy()
    bb.sgd_step(moved, grads, h)
    fd = (loss_at(moved) - loss0) / h
    assert abs(fd + gnorm2) < 1e-3 * max(gnorm2, 1.0)
    stepped = net.copy()
    bb.sgd_step(stepped, grads, 1e-2)
    assert loss_at(stepped) < loss0


def test_training_is_deterministic():
    train, hold = small_task()
    runs = [bb.train_toy(bb.make_toy_net(width=16, seed=6), train, hold, epochs=2, lr=0.1, seed=3) for _ in range(2)]
    assert runs[0].history == runs[1].history


def test_divergence_aborts():
    train, hold = small_task()
    with np.errstate(all="ignore"), pytest.raises(bb.TrainingDiverged, match="non-finite"):
        bb.train_toy(bb.make_toy_net(width=16, seed=7), train, hold, epochs=5, lr=1e200)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_toynet_backward_matches_finite_difference_on_fc(seed):
    net = bb.make_toy_net(width=8, beta=0.5, seed=seed % 1000)
    x = video(seed % 997, n=2, c=4, t=2, h=2, w=2)
    y = np.array([0, 1])
    w = net.params["fc.weight"]
    with GradTape() as tape:
        loss = tc.cross_entropy(net(x, mode="eval"), y)
    g = backward(tape, loss)[w].data
    e = np.zeros_like(w.data)
    e[0, 1] = 1e-5
    plus, minus = net.copy(), net.copy()
    plus.params["fc.weight"] = Tensor(w.data + e)
    minus.params["fc.weight"] = Tensor(w.data - e)
    fd = (tc.cross_entropy(plus(x), y).item() - tc.cross_entropy(minus(x), y).item()) / 2e-5
    assert abs(fd - g[0, 1]) < 1e-6
