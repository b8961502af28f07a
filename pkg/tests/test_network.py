"""Tests for ST-GCN layers, blocks, the full network, and its registry."""

import numpy as np
import pytest

from sparse_stgcn import autodiff as ad
from sparse_stgcn.autodiff import ShapeError, Tensor, backward
from sparse_stgcn.data import SkeletonSequence
from sparse_stgcn.graph import build_graph, human17_parents
from sparse_stgcn.network import (
    BatchingError,
    NetConfig,
    SGCNLayer,
    STGCNNetwork,
    copy_network,
    count_params,
    stack_batch,
)

CHAIN2 = build_graph({0: 0, 1: 0})
TREE5 = build_graph({0: 0, 1: 0, 2: 1, 3: 1, 4: 0})


def tiny_config(**kw):
    defaults = dict(
        num_classes=3,
        num_joints=5,
        in_channels=2,
        channels=(4, 4),
        temporal_half_window=2,
    )
    defaults.update(kw)
    return NetConfig(**defaults)


def tiny_net(seed=0, **kw):
    return STGCNNetwork(tiny_config(**kw), TREE5, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# spatial convolution


def test_sgcn_two_joint_averaging():
    # normalized two-joint chain averages the joints; identity channel map
    layer = SGCNLayer("t", 1, 1, CHAIN2.normalized, np.random.default_rng(0))
    layer.theta.data = np.array([[1.0]])
    x = Tensor(np.array([2.0, 0.0]).reshape(1, 1, 1, 2))
    out = layer.forward(x)
    assert np.allclose(out.data.reshape(-1), [1.0, 1.0], atol=1e-15)


def test_sgcn_identity_adjacency_is_per_joint_linear():
    rng = np.random.default_rng(1)
    layer = SGCNLayer("t", 3, 2, np.eye(4), rng)
    x = rng.normal(size=(2, 3, 5, 4))
    out = layer.forward(Tensor(x)).data
    expected = np.einsum("bctn,co->botn", x, layer.theta.data)
    assert np.allclose(out, expected, atol=1e-12)


def test_sgcn_joint_count_mismatch():
    layer = SGCNLayer("t", 1, 1, CHAIN2.normalized, np.random.default_rng(0))
    with pytest.raises(ShapeError, match="joints"):
        layer.forward(Tensor(np.zeros((1, 1, 1, 3))))


def test_sgcn_linear_in_input():
    rng = np.random.default_rng(2)
    layer = SGCNLayer("t", 2, 3, TREE5.normalized, rng)
    x, y = rng.normal(size=(2, 2, 4, 5)), rng.normal(size=(2, 2, 4, 5))
    lhs = layer.forward(Tensor(x + y)).data
    rhs = layer.forward(Tensor(x)).data + layer.forward(Tensor(y)).data
    assert np.allclose(lhs, rhs, atol=1e-12)


# ---------------------------------------------------------------------------
# block semantics


def test_block_with_zeroed_convs_is_relu_bn_of_input():
    net = tiny_net()
    blk = net.blocks[1]  # 4 -> 4, residual active
    assert blk.residual
    blk.sgcn.theta.data = np.zeros_like(blk.sgcn.theta.data)
    blk.tgcn.omega.data = np.zeros_like(blk.tgcn.omega.data)
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 4, 6, 5)))
    out = blk.forward(x, training=True)
    expected = ad.relu(
        ad.batch_norm(
            Tensor(x.data),
            blk.bn2.gamma,
            blk.bn2.beta,
            blk.bn2.running_mean.copy(),
            blk.bn2.running_var.copy(),
            training=True,
        )
    ).data
    assert np.allclose(out.data, expected, atol=1e-12)


def test_block_without_matching_widths_has_no_residual():
    net = STGCNNetwork(
        tiny_config(channels=(4, 8)), TREE5, np.random.default_rng(0)
    )
    assert not net.blocks[0].residual  # 2 -> 4
    assert not net.blocks[1].residual  # 4 -> 8


def test_residual_flag_disables_skip():
    net = tiny_net(residual=False)
    assert not any(blk.residual for blk in net.blocks)


# ---------------------------------------------------------------------------
# network forward


def test_forward_shapes_and_determinism():
    net = tiny_net()
    x = Tensor(np.random.default_rng(4).normal(size=(3, 2, 6, 5)))
    a = net.forward(x, mode="eval").data
    b = net.forward(x, mode="eval").data
    assert a.shape == (3, 3)
    assert a.tobytes() == b.tobytes()


def test_eval_rows_are_independent_and_permutable():
    net = tiny_net()
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 2, 6, 5))
    perm = np.array([2, 0, 3, 1])
    out = net.forward(Tensor(x), mode="eval").data
    out_perm = net.forward(Tensor(x[perm]), mode="eval").data
    assert np.array_equal(out[perm], out_perm)


def test_forward_rejects_bad_mode_and_shape():
    net = tiny_net()
    with pytest.raises(ValueError, match="mode"):
        net.forward(Tensor(np.zeros((1, 2, 4, 5))), mode="test")
    with pytest.raises(ShapeError):
        net.forward(Tensor(np.zeros((1, 7, 4, 5))))


def param_finite_diff_err(net, tensor, x, labels, eps=1e-5):
    """Max relative error between a parameter's autodiff gradient and
    central differences of the training-mode cross-entropy."""
    for e in net.registry():
        e.tensor.grad = None

    def loss_value():
        return ad.softmax_cross_entropy(net.forward(Tensor(x), mode="train"), labels)

    backward(loss_value())
    analytic = (tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data))
    analytic = analytic.reshape(-1).copy()
    flat = tensor.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with ad.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_value().item()
            flat[i] = orig - eps
            lo = loss_value().item()
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def test_network_gradients_match_finite_differences():
    net = tiny_net()
    labels = np.array([0, 2])
    x = np.random.default_rng(6).normal(size=(2, 2, 4, 5))
    for entry in net.registry():
        err = param_finite_diff_err(net, entry.tensor, x, labels)
        assert err <= 1e-4, f"{entry.name}: {err}"


# ---------------------------------------------------------------------------
# registry


def test_registry_counts_small_theta_example():
    net = STGCNNetwork(
        NetConfig(num_classes=2, num_joints=5, in_channels=3, channels=(8,),
                  temporal_half_window=2),
        TREE5,
        np.random.default_rng(0),
    )
    reg = net.registry()
    theta = reg.by_name["block1.sgcn.theta"]
    assert theta.maskable and theta.tensor.size == 24
    omega = reg.by_name["block1.tgcn.omega"]
    assert omega.maskable and omega.tensor.size == 8 * 3
    assert all(e.maskable == (e.kind in ("theta", "omega")) for e in reg)


def test_registry_total_matches_manual_sum():
    net = tiny_net()
    reg = net.registry()
    assert count_params(reg) == sum(e.tensor.size for e in reg)
    assert count_params(reg, maskable_only=True) == sum(
        e.tensor.size for e in reg if e.maskable
    )


def test_two_constructions_same_counts_and_names():
    a, b = tiny_net(seed=1), tiny_net(seed=2)
    assert [e.name for e in a.registry()] == [e.name for e in b.registry()]
    assert count_params(a.registry()) == count_params(b.registry())


def test_same_seed_same_init():
    a, b = tiny_net(seed=7), tiny_net(seed=7)
    for ea, eb in zip(a.registry(), b.registry()):
        assert ea.tensor.data.tobytes() == eb.tensor.data.tobytes()


def test_copy_network_is_deep():
    net = tiny_net()
    twin = copy_network(net)
    for e, f in zip(net.registry(), twin.registry()):
        assert e.tensor.data.tobytes() == f.tensor.data.tobytes()
        assert e.tensor.data is not f.tensor.data
    twin.registry().by_name["head.weight"].tensor.data[:] = 0.0
    assert not np.array_equal(
        net.registry().by_name["head.weight"].tensor.data,
        twin.registry().by_name["head.weight"].tensor.data,
    )


# ---------------------------------------------------------------------------
# batching


def test_stack_batch_layout():
    rng = np.random.default_rng(8)
    seqs = [SkeletonSequence(rng.normal(size=(5, 6, 2)), i % 3) for i in range(4)]
    x, labels = stack_batch(seqs)
    assert x.shape == (4, 2, 6, 5)
    assert labels.tolist() == [0, 1, 2, 0]
    # (N, T, d) -> (d, T, N)
    assert x.data[1, 0, 3, 2] == seqs[1].features[2, 3, 0]


def test_stack_batch_rejects_mixed_shapes():
    seqs = [
        SkeletonSequence(np.zeros((5, 6, 2)), 0),
        SkeletonSequence(np.zeros((5, 7, 2)), 0),
    ]
    with pytest.raises(BatchingError, match="inconsistent"):
        stack_batch(seqs)


def test_stack_batch_rejects_empty():
    with pytest.raises(BatchingError, match="empty"):
        stack_batch([])


def test_default_config_is_desk_scale():
    cfg = NetConfig(num_classes=8)
    assert cfg.channels == (32, 32, 64, 64)
    assert cfg.in_channels == 3
    assert cfg.num_joints == 17
    net = STGCNNetwork(cfg, build_graph(human17_parents()), np.random.default_rng(0))
    assert count_params(net.registry(), maskable_only=True) == 7264 + 5 * 192
