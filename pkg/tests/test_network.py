"""Forward/backward/jvp correctness, rescaling constructions, serialization."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from gradscale.init import init_network
from gradscale.linalg import Rng, qm_norm
from gradscale.network import (
    ArchitectureSpec,
    Block,
    Layer,
    LayerKind,
    NetworkState,
    backward,
    forward,
    jvp,
    load_network,
    rescale_network,
    resnet_architecture,
    save_network,
    scaled_reparam_network,
    vanilla_architecture,
)


def bare_net(layers, input_dim, label_dim=1):
    spec = ArchitectureSpec(tuple(layers), input_dim=input_dim, label_dim=label_dim)
    return NetworkState(spec=spec, initial={}, residual={}, skips={})


def randomized(spec, seed, jitter=0.1):
    """Init a network and push some mass into the residual parts."""
    rng = Rng(seed)
    net = init_network(spec, "gaussian", rng)
    for l in net.residual:
        net.residual[l] = jitter * rng.split("res", l).standard_normal(net.residual[l].shape)
    return net


# ---------------------------------------------------------------------------
# architecture layout


def test_vanilla_layout_and_dims():
    spec = vanilla_architecture("relu", depth=3, width=6, input_dim=5, label_dim=6)
    kinds = [l.kind for l in spec.layers]
    assert kinds == [
        LayerKind.DOT_ERROR,
        LayerKind.LINEAR,
        LayerKind.RELU,
        LayerKind.LINEAR,
        LayerKind.RELU,
        LayerKind.LINEAR,
    ]
    assert spec.dims() == (1, 6, 6, 6, 6, 6, 5)
    assert spec.linear_indices() == (1, 3, 5)


def test_vanilla_xent_has_softmax_on_top():
    spec = vanilla_architecture("tanh", depth=2, width=4, input_dim=4, label_dim=3, error="xent", last_width=3)
    kinds = [l.kind for l in spec.layers]
    assert kinds[:2] == [LayerKind.XENT_ERROR, LayerKind.SOFTMAX]
    assert spec.dims()[2] == 3  # prediction width follows last_width


def test_resnet_layout_blocks():
    spec = resnet_architecture("relu", "layer", n_blocks=2, linears_per_block=2, width=6, input_dim=6, label_dim=6)
    assert len(spec.blocks) == 2
    for b in spec.blocks:
        assert spec.layers[b.top].kind == LayerKind.LINEAR
        assert spec.layers[b.bottom - 1].kind == LayerKind.LAYER_NORM
    # top block sits above the bottom block
    tops = sorted(b.top for b in spec.blocks)
    assert spec.blocks[0].bottom - spec.blocks[0].top == 6
    assert tops[0] >= 2  # error + final norm above everything


def test_validate_rejects_bad_specs():
    with pytest.raises(ValueError):
        ArchitectureSpec((Layer(LayerKind.LINEAR, 3), Layer(LayerKind.DOT_ERROR)), 3, 3).validate()
    with pytest.raises(ValueError):
        ArchitectureSpec((Layer(LayerKind.LINEAR),), 3, 3).validate()
    with pytest.raises(ValueError):
        ArchitectureSpec(
            (Layer(LayerKind.DOT_ERROR), Layer(LayerKind.LINEAR, 3), Layer(LayerKind.LINEAR, 3)),
            3,
            3,
            blocks=(Block(1, 3), Block(2, 3)),
        ).validate()
    with pytest.raises(ValueError):
        # dot-product error must see a prediction of label width
        vanilla_architecture("relu", depth=2, width=4, input_dim=4, label_dim=3)


# ---------------------------------------------------------------------------
# forward anchors


def test_layer_norm_values():
    net = bare_net([Layer(LayerKind.LAYER_NORM)], input_dim=3)
    tr = forward(net, np.array([[1.0, 2.0, 3.0]]))
    assert_allclose(tr.acts[0], [[-1.22474, 0.0, 1.22474]], atol=1e-5)


def test_batch_norm_values_and_batch_of_one():
    net = bare_net([Layer(LayerKind.BATCH_NORM)], input_dim=1)
    tr = forward(net, np.array([[1.0], [3.0]]))
    assert_allclose(tr.acts[0], [[-1.0], [1.0]], atol=1e-12)
    with pytest.raises(ValueError):
        forward(net, np.array([[1.0]]))


def test_selu_values():
    net = bare_net([Layer(LayerKind.SELU)], input_dim=3)
    tr = forward(net, np.array([[0.0, 1.0, -1.0]]))
    expect = [[0.0, 1.0507, 1.0507 * 1.6733 * np.expm1(-1.0)]]
    assert_allclose(tr.acts[0], expect, atol=1e-12)


def test_softmax_rows_and_stability():
    net = bare_net([Layer(LayerKind.SOFTMAX)], input_dim=4)
    x = np.array([[1e3, 1e3 - 1.0, 0.0, -5.0], [0.1, 0.2, 0.3, 0.4]])
    tr = forward(net, x)
    assert np.all(np.isfinite(tr.acts[0]))
    assert_allclose(tr.acts[0].sum(axis=1), [1.0, 1.0], atol=1e-12)
    assert tr.acts[0][0, 0] > tr.acts[0][0, 1]


def test_error_layer_values():
    dot = bare_net([Layer(LayerKind.DOT_ERROR)], input_dim=2, label_dim=2)
    tr = forward(dot, np.array([[1.0, 2.0]]), np.array([[3.0, -1.0]]))
    assert_allclose(tr.error, [1.0], atol=1e-12)
    xent = bare_net([Layer(LayerKind.XENT_ERROR)], input_dim=2)
    tr = forward(xent, np.array([[0.2, 0.8]]), np.array([1]))
    assert_allclose(tr.error, [-np.log(0.8)], atol=1e-12)


def test_forward_input_validation():
    spec = vanilla_architecture("relu", depth=2, width=4, input_dim=4, label_dim=4)
    net = randomized(spec, 0)
    with pytest.raises(ValueError):
        forward(net, np.zeros((2, 3)), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        forward(net, np.zeros((2, 4)))  # labels required


def test_residual_split_matches_plain_weights():
    spec = vanilla_architecture("relu", depth=3, width=6, input_dim=6, label_dim=6)
    net = randomized(spec, 3)
    merged = net.copy()
    for l in merged.initial:
        merged.initial[l] = net.weight(l)
        merged.residual[l][:] = 0.0
    rng = Rng(11)
    x = rng.standard_normal((5, 6))
    y = rng.standard_normal((5, 6))
    ta = forward(net, x, y)
    tb = forward(merged, x, y)
    assert np.array_equal(ta.acts[0], tb.acts[0])


# ---------------------------------------------------------------------------
# backward: finite-difference oracle

FD_CASES = {
    "relu-dot": lambda: vanilla_architecture("relu", depth=5, width=8, input_dim=8, label_dim=8),
    "leaky-dot": lambda: vanilla_architecture("leaky_relu", depth=4, width=8, input_dim=8, label_dim=8, leak=0.2),
    "tanh-layer-dot": lambda: vanilla_architecture("tanh", norm="layer", depth=4, width=8, input_dim=8, label_dim=8),
    "selu-dot": lambda: vanilla_architecture("selu", depth=4, width=8, input_dim=8, label_dim=8),
    "relu-batch-xent": lambda: vanilla_architecture(
        "relu", norm="batch", depth=4, width=8, input_dim=8, label_dim=5, error="xent", last_width=5
    ),
    "resnet-relu-layer": lambda: resnet_architecture(
        "relu", "layer", n_blocks=2, linears_per_block=2, width=8, input_dim=8, label_dim=8
    ),
    "resnet-tanh-batch-gauss-skip": lambda: resnet_architecture(
        "tanh", "batch", n_blocks=2, linears_per_block=1, width=8, input_dim=8, label_dim=8, skip_kind="gaussian"
    ),
}


def make_labels(spec, rng, n):
    if spec.layers[0].kind == LayerKind.XENT_ERROR:
        return rng.integers(0, spec.label_dim, n)
    return rng.standard_normal((n, spec.label_dim))


@pytest.mark.parametrize("name", sorted(FD_CASES))
def test_param_grads_match_finite_differences(name):
    spec = FD_CASES[name]()
    net = randomized(spec, seed=hash(name) % 2**32)
    rng = Rng(17)
    x = rng.standard_normal((6, spec.input_dim))
    y = make_labels(spec, rng, 6)
    tr = forward(net, x, y)
    backward(net, tr)
    eps = 1e-5
    for l in spec.linear_indices():
        shape = net.residual[l].shape
        coords = {(int(i), int(j)) for i, j in zip(rng.integers(0, shape[0], 8), rng.integers(0, shape[1], 8))}
        for i, j in coords:
            up = net.copy()
            up.residual[l][i, j] += eps
            dn = net.copy()
            dn.residual[l][i, j] -= eps
            fd = (forward(up, x, y).mean_error - forward(dn, x, y).mean_error) / (2 * eps)
            got = tr.param_grads[l][i, j]
            assert abs(fd - got) <= 1e-4 * max(abs(fd), 1e-3), (name, l, i, j, fd, got)


@pytest.mark.parametrize("name", ["relu-dot", "relu-batch-xent", "resnet-relu-layer"])
def test_input_grads_match_finite_differences(name):
    spec = FD_CASES[name]()
    net = randomized(spec, seed=5)
    rng = Rng(23)
    x = rng.standard_normal((4, spec.input_dim))
    y = make_labels(spec, rng, 4)
    tr = forward(net, x, y)
    backward(net, tr)
    eps = 1e-5
    L = spec.bottom_index
    for i, j in [(0, 0), (1, 3), (3, 5)]:
        up = x.copy()
        up[i, j] += eps
        dn = x.copy()
        dn[i, j] -= eps
        # grads hold d(sum of errors); mean-error differences scale by 1/n
        fd = (forward(net, up, y).mean_error - forward(net, dn, y).mean_error) / (2 * eps) * 4
        got = tr.grads[L + 1][i, j]
        assert abs(fd - got) <= 1e-4 * max(abs(fd), 1e-3), (name, i, j, fd, got)


def test_dot_error_param_grad_structure():
    # one linear layer under a dot-product error: dE/dW = sum(y x^T) / n
    spec = ArchitectureSpec(
        (Layer(LayerKind.DOT_ERROR), Layer(LayerKind.LINEAR, out_width=2)), input_dim=2, label_dim=2
    )
    w = np.array([[0.5, -1.0], [2.0, 0.25]])
    net = NetworkState(spec=spec, initial={1: w}, residual={1: np.zeros((2, 2))}, skips={})
    x = np.array([[1.0, 2.0], [-3.0, 0.5]])
    y = np.array([[1.0, -1.0], [2.0, 4.0]])
    tr = forward(net, x, y)
    backward(net, tr)
    expect = (y[0][:, None] * x[0][None, :] + y[1][:, None] * x[1][None, :]) / 2.0
    assert_allclose(tr.param_grads[1], expect, atol=1e-12)


def test_relu_backward_zeroes_negative_preactivations():
    spec = vanilla_architecture("relu", depth=2, width=6, input_dim=6, label_dim=6)
    net = randomized(spec, 9)
    rng = Rng(31)
    x = rng.standard_normal((5, 6))
    y = rng.standard_normal((5, 6))
    tr = forward(net, x, y)
    backward(net, tr)
    pre = tr.acts[3]  # input of the relu at layer 2
    assert np.all(tr.grads[3][pre < 0.0] == 0.0)
    assert_allclose(tr.grads[3][pre > 0.0], tr.grads[2][pre > 0.0], atol=1e-15)


# ---------------------------------------------------------------------------
# jvp


def test_jvp_identity_and_linear():
    spec = ArchitectureSpec(
        (Layer(LayerKind.DOT_ERROR), Layer(LayerKind.LINEAR, out_width=3)), input_dim=3, label_dim=3
    )
    rng = Rng(2)
    w = rng.standard_normal((3, 3))
    net = NetworkState(spec=spec, initial={1: w}, residual={1: np.zeros((3, 3))}, skips={})
    x = rng.standard_normal((2, 3))
    y = rng.standard_normal((2, 3))
    tr = forward(net, x, y)
    u = rng.standard_normal((2, 3))
    out = jvp(net, tr, 2, u)
    assert np.array_equal(out[2], u)
    assert_allclose(out[1], u @ w.T, atol=1e-12)


@pytest.mark.parametrize("name", ["relu-dot", "tanh-layer-dot", "relu-batch-xent", "resnet-relu-layer"])
def test_jvp_matches_finite_differences_and_adjoint(name):
    spec = FD_CASES[name]()
    net = randomized(spec, seed=13)
    rng = Rng(41)
    n = 4
    x = rng.standard_normal((n, spec.input_dim))
    y = make_labels(spec, rng, n)
    tr = forward(net, x, y)
    backward(net, tr)
    L = spec.bottom_index
    d = rng.standard_normal((n, spec.input_dim))
    out = jvp(net, tr, L + 1, d)
    eps = 1e-6
    fd = (forward(net, x + eps * d, y).mean_error - forward(net, x - eps * d, y).mean_error) / (2 * eps)
    assert_allclose(out[0].sum() / n, fd, rtol=5e-5)
    # adjoint identity against backward, at the input and at an interior level
    assert_allclose(out[0].sum(), (d * tr.grads[L + 1]).sum(), rtol=1e-10)
    mid = L // 2
    dm = rng.standard_normal(tr.acts[mid].shape)
    assert_allclose(jvp(net, tr, mid, dm)[0].sum(), (dm * tr.grads[mid]).sum(), rtol=1e-9)


# ---------------------------------------------------------------------------
# residual blocks


def test_block_forward_is_chain_plus_skip():
    spec = resnet_architecture("relu", "layer", n_blocks=2, linears_per_block=2, width=6, input_dim=6, label_dim=6)
    net = randomized(spec, 7)
    rng = Rng(3)
    x = rng.standard_normal((4, 6))
    y = rng.standard_normal((4, 6))
    tr = forward(net, x, y)
    for b in spec.blocks:
        assert_allclose(
            tr.acts[b.top], tr.block_chain_out[b.top] + tr.block_skip_out[b.top], atol=1e-15
        )
        assert np.array_equal(tr.block_skip_out[b.top], tr.acts[b.bottom])  # identity skip


def test_block_backward_splits_chain_and_skip():
    spec = resnet_architecture(
        "relu", "layer", n_blocks=1, linears_per_block=2, width=6, input_dim=6, label_dim=6, skip_kind="gaussian"
    )
    net = randomized(spec, 21)
    rng = Rng(4)
    x = rng.standard_normal((4, 6))
    y = rng.standard_normal((4, 6))
    tr = forward(net, x, y)
    backward(net, tr)
    (b,) = spec.blocks
    skip_grad = tr.grads[b.top] @ net.skips[b.top]
    assert_allclose(tr.grads[b.bottom], tr.block_chain_grad_in[b.top] + skip_grad, rtol=1e-12)


# ---------------------------------------------------------------------------
# rescaling constructions


def full_jacobian(net, tr, k, l):
    """J^l_k for datapoint 0 by pushing basis vectors through jvp."""
    d_k = tr.acts[k].shape[1]
    cols = []
    for j in range(d_k):
        e = np.zeros((tr.n, d_k))
        e[0, j] = 1.0
        cols.append(jvp(net, tr, k, e)[l][0])
    return np.stack(cols, axis=1)


def gsc(net, tr, k, l):
    jac = full_jacobian(net, tr, k, l)
    fk = np.linalg.norm(tr.acts[k][0])
    fl = np.linalg.norm(tr.acts[l][0])
    return qm_norm(jac) * fk / fl


def test_rescale_identity_factor():
    spec = vanilla_architecture("relu", depth=3, width=5, input_dim=5, label_dim=5)
    net = randomized(spec, 6)
    out, tf = rescale_network(net, 1.0)
    rng = Rng(8)
    x = rng.standard_normal((3, 5))
    y = rng.standard_normal((3, 5))
    assert_allclose(forward(out, x, y).acts[0], forward(net, x, y).acts[0], atol=1e-15)
    assert tf.factor == 1.0


def test_rescale_preserves_outputs_and_scales_jacobians():
    # leaky units keep every Jacobian nonzero, so the ratios are well defined
    spec = vanilla_architecture("leaky_relu", depth=3, width=5, input_dim=5, label_dim=5, leak=0.2)
    net = randomized(spec, 19)
    R = 2.0
    out, _ = rescale_network(net, R)
    rng = Rng(14)
    x = rng.standard_normal((1, 5))
    y = rng.standard_normal((1, 5))
    ta = forward(net, x, y)
    tb = forward(out, x, y)
    assert_allclose(tb.acts[1], ta.acts[1], rtol=1e-9)
    assert_allclose(tb.acts[0], ta.acts[0], rtol=1e-9)
    backward(net, ta)
    backward(out, tb)
    L = spec.bottom_index
    # between-layer Jacobian norms gain R^(k-l); the (1,0) pair and the input
    # level are excluded because those values are pinned to match f
    pairs = [(k, l) for l in range(0, L + 1) for k in range(max(2, l + 1), L + 1) if l != 1]
    assert pairs
    for k, l in pairs:
        ja = qm_norm(full_jacobian(net, ta, k, l))
        jb = qm_norm(full_jacobian(out, tb, k, l))
        assert_allclose(jb / ja, R ** (k - l), rtol=1e-9, err_msg=f"pair {(k, l)}")
    # the scale coefficient is invariant for every pair
    for k in range(1, L + 2):
        for l in range(0, k):
            assert_allclose(gsc(out, tb, k, l), gsc(net, ta, k, l), rtol=1e-9, err_msg=f"pair {(k, l)}")


def test_rescale_training_equivalence():
    spec = vanilla_architecture("relu", depth=3, width=5, input_dim=5, label_dim=5)
    base = randomized(spec, 25)
    R = 2.0
    scaled, tf = rescale_network(base, R)
    rng = Rng(33)
    x = rng.standard_normal((6, 5))
    y = rng.standard_normal((6, 5))
    lr = 0.05
    for _ in range(3):
        ta = forward(base, x, y)
        backward(base, ta)
        tb = forward(scaled, x, y)
        backward(scaled, tb)
        for l in spec.linear_indices():
            # the equivalent run sees the original gradient
            assert_allclose(tf.gradient_in(l, tb.param_grads[l]), ta.param_grads[l], rtol=1e-9)
            base.residual[l] = base.residual[l] - lr * ta.param_grads[l]
            scaled.residual[l] = scaled.residual[l] - lr * tf.descent_direction(l, tb.param_grads[l])
    ta = forward(base, x, y)
    tb = forward(scaled, x, y)
    assert_allclose(tb.acts[1], ta.acts[1], rtol=1e-9)


def test_rescale_rejects_unsupported():
    tanh_spec = vanilla_architecture("tanh", depth=3, width=4, input_dim=4, label_dim=4)
    with pytest.raises(ValueError):
        rescale_network(randomized(tanh_spec, 0), 2.0)
    r_spec = resnet_architecture("relu", "layer", n_blocks=1, linears_per_block=1, width=4, input_dim=4, label_dim=4)
    with pytest.raises(ValueError):
        rescale_network(randomized(r_spec, 0), 2.0)


def test_scaled_reparam_keeps_error_and_gsc():
    spec = vanilla_architecture("tanh", depth=3, width=5, input_dim=5, label_dim=5)
    net = randomized(spec, 29)
    L = spec.bottom_index
    rng = Rng(55)
    c = {l: float(rng.uniform(0.5, 2.0)) for l in range(2, L + 1)}
    gamma = {l: float(rng.uniform(0.5, 2.0)) for l in spec.linear_indices()}
    out = scaled_reparam_network(net, c, gamma)
    x = rng.standard_normal((1, 5))
    y = rng.standard_normal((1, 5))
    ta = forward(net, x, y)
    tb = forward(out, x, y)
    assert_allclose(tb.acts[0], ta.acts[0], rtol=1e-9)
    assert_allclose(tb.acts[1], ta.acts[1], rtol=1e-9)
    for l in range(2, L + 1):
        assert_allclose(tb.acts[l], c[l] * ta.acts[l], rtol=1e-9)
    for k in range(1, L + 2):
        for l in range(0, k):
            assert_allclose(gsc(out, tb, k, l), gsc(net, ta, k, l), rtol=1e-9, err_msg=f"pair {(k, l)}")
    with pytest.raises(ValueError):
        scaled_reparam_network(net, {1: 2.0}, {})


# ---------------------------------------------------------------------------
# serialization


def test_save_load_round_trip(tmp_path):
    spec = resnet_architecture(
        "tanh", "batch", n_blocks=2, linears_per_block=1, width=6, input_dim=6, label_dim=6, skip_kind="orthogonal"
    )
    net = randomized(spec, 44)
    net.scales = {2: (1.0, 2.0, 0.5)}
    path = tmp_path / "net.gscl"
    save_network(net, path)
    back = load_network(path)
    assert back.spec == spec
    for l in net.initial:
        assert np.array_equal(back.initial[l], net.initial[l])
        assert np.array_equal(back.residual[l], net.residual[l])
    for t in net.skips:
        assert np.array_equal(back.skips[t], net.skips[t])
    assert back.scales == net.scales
    rng = Rng(1)
    x = rng.standard_normal((3, 6))
    y = rng.standard_normal((3, 6))
    assert np.array_equal(forward(back, x, y).acts[0], forward(net, x, y).acts[0])


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.gscl"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError):
        load_network(path)
