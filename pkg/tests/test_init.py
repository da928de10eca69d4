"""Initialization schemes: variances, structure, looks-linear signal identity."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from gradscale.init import (
    correlated_gaussian,
    init_network,
    looks_linear,
    neg_ctc,
    skew_symmetric,
)
from gradscale.linalg import Rng, qm_norm
from gradscale.network import (
    ArchitectureSpec,
    Block,
    Layer,
    LayerKind,
    forward,
    resnet_architecture,
    vanilla_architecture,
)


def test_gaussian_relu_variances():
    spec = vanilla_architecture("relu", depth=5, width=100, input_dim=100, label_dim=100)
    net = init_network(spec, "gaussian", Rng(0))
    lin = spec.linear_indices()
    for l in lin[:-1]:  # fed by a relu: He variance 2/100
        assert_allclose(net.weight(l).var(), 2.0 / 100.0, rtol=0.05)
    # the bottom layer reads the raw input, so no sqrt(2) gain
    assert_allclose(net.weight(lin[-1]).var(), 1.0 / 100.0, rtol=0.05)
    for l in lin:
        assert np.all(net.residual[l] == 0.0)


def test_gaussian_tanh_and_selu_variances():
    for nonlin in ("tanh", "selu"):
        spec = vanilla_architecture(nonlin, depth=4, width=100, input_dim=100, label_dim=100)
        net = init_network(spec, "gaussian", Rng(1))
        for l in spec.linear_indices():
            assert_allclose(net.weight(l).var(), 1.0 / 100.0, rtol=0.05)


def test_batch_relu_keeps_he_gain():
    spec = vanilla_architecture("relu", norm="batch", depth=4, width=100, input_dim=100, label_dim=100)
    net = init_network(spec, "gaussian", Rng(2))
    lin = spec.linear_indices()
    for l in lin[:-1]:
        assert_allclose(net.weight(l).var(), 2.0 / 100.0, rtol=0.05)


def test_orthogonal_scheme_qm_norms():
    spec = vanilla_architecture("tanh", depth=4, width=60, input_dim=60, label_dim=60)
    net = init_network(spec, "orthogonal", Rng(3))
    for l in spec.linear_indices():
        assert_allclose(qm_norm(net.weight(l)), 1.0, atol=1e-12)
    relu_spec = vanilla_architecture("relu", depth=4, width=60, input_dim=60, label_dim=60)
    relu_net = init_network(relu_spec, "orthogonal", Rng(3))
    lin = relu_spec.linear_indices()
    for l in lin[:-1]:
        assert_allclose(qm_norm(relu_net.weight(l)), np.sqrt(2.0), atol=1e-12)
    assert_allclose(qm_norm(relu_net.weight(lin[-1])), 1.0, atol=1e-12)


def test_skew_symmetric_construction():
    w = skew_symmetric(80, Rng(4))
    assert np.max(np.abs(w + w.T)) < 1e-12
    assert_allclose(qm_norm(w), 1.0, atol=1e-12)


def test_neg_ctc_construction():
    w = neg_ctc(60, Rng(5))
    assert_allclose(w, w.T, atol=1e-12)
    assert np.max(np.linalg.eigvalsh(w)) <= 1e-12  # negative semidefinite
    assert_allclose(qm_norm(w), 1.0, atol=1e-12)


def test_correlated_gaussian_pearson():
    rng = Rng(6)
    prev = rng.standard_normal((100, 100)) / 10.0
    prev = prev / qm_norm(prev)
    w = correlated_gaussian(prev, rng.split("mix"))
    assert_allclose(qm_norm(w), 1.0, atol=1e-12)
    r = np.corrcoef(w.ravel(), prev.ravel())[0, 1]
    assert abs(r - 0.5) < 0.03


def test_correlated_scheme_chains_and_falls_back():
    spec = vanilla_architecture("tanh", depth=4, width=100, input_dim=100, label_dim=100)
    net = init_network(spec, "corr-gaussian", Rng(7))
    gauss = init_network(spec, "gaussian", Rng(7))
    lin = spec.linear_indices()
    bottom = lin[-1]
    # nothing below the bottom layer to correlate with: plain Gaussian
    assert np.array_equal(net.weight(bottom), gauss.weight(bottom))
    for above, below in zip(lin[:-1], lin[1:]):
        r = np.corrcoef(net.weight(above).ravel(), net.weight(below).ravel())[0, 1]
        assert abs(r - 0.5) < 0.03, (above, below, r)
        assert_allclose(qm_norm(net.weight(above)), 1.0, atol=1e-12)


def test_square_only_schemes_reject_rectangles():
    spec = vanilla_architecture("tanh", depth=3, width=8, input_dim=6, label_dim=8)
    for scheme in ("skew", "negctc", "corr-gaussian"):
        with pytest.raises(ValueError):
            init_network(spec, scheme, Rng(0))
    with pytest.raises(ValueError):
        init_network(spec, "not-a-scheme", Rng(0))


def test_overrides_pin_layers():
    spec = vanilla_architecture("tanh", depth=3, width=20, input_dim=20, label_dim=20)
    lin = spec.linear_indices()
    net = init_network(spec, "skew", Rng(8), overrides={lin[-1]: "gaussian"})
    assert np.max(np.abs(net.weight(lin[0]) + net.weight(lin[0]).T)) < 1e-12
    w_bottom = net.weight(lin[-1])
    assert np.max(np.abs(w_bottom + w_bottom.T)) > 0.01  # not skew-symmetric


# ---------------------------------------------------------------------------
# looks-linear


def test_looks_linear_structure():
    rng = Rng(9)
    low = looks_linear(8, 3, "lowest", rng)
    assert np.array_equal(low[0::2], -low[1::2])
    high = looks_linear(5, 8, "highest", rng)  # odd output width is fine here
    assert np.array_equal(high[:, 0::2], -high[:, 1::2])
    mid = looks_linear(8, 6, "intermediate", rng)
    core = mid[0::2, 0::2]
    assert np.array_equal(mid[1::2, 1::2], core)
    assert np.array_equal(mid[0::2, 1::2], -core)
    assert np.array_equal(mid[1::2, 0::2], -core)


def test_looks_linear_rejects_odd_paired_dims():
    rng = Rng(10)
    with pytest.raises(ValueError):
        looks_linear(7, 4, "lowest", rng)
    with pytest.raises(ValueError):
        looks_linear(4, 7, "highest", rng)
    with pytest.raises(ValueError):
        looks_linear(7, 4, "intermediate", rng)
    with pytest.raises(ValueError):
        looks_linear(4, 4, "middle", rng)


def paired_signal(a):
    return a[:, 0::2] - a[:, 1::2]


def test_looks_linear_net_signal_identity():
    # the net starts out computing an orthogonal map of a projected signal:
    # the stitched pair signal keeps its geometry through every relu layer
    depth, width = 10, 8
    spec = vanilla_architecture("relu", depth=depth, width=width, input_dim=width, label_dim=width)
    net = init_network(spec, "looks-linear", Rng(11))
    rng = Rng(12)
    x = rng.standard_normal((5, width))
    y = rng.standard_normal((5, width))
    tr = forward(net, x, y)
    relu_levels = spec.nonlin_indices()  # a relu at layer l emits level l
    chis = [paired_signal(tr.acts[lvl]) for lvl in sorted(relu_levels)]
    grams = [c @ c.T for c in chis]
    for g in grams[1:]:
        assert_allclose(g, grams[0], rtol=1e-9, atol=1e-12)


def test_looks_linear_deep_net_prediction_norm():
    # square widths: the top layer contributes a factor sqrt(2) on the signal
    depth, width = 50, 100
    spec = vanilla_architecture("relu", depth=depth, width=width, input_dim=width, label_dim=width)
    net = init_network(spec, "looks-linear", Rng(13))
    rng = Rng(14)
    x = rng.standard_normal((3, width))
    y = rng.standard_normal((3, width))
    tr = forward(net, x, y)
    first_relu_out = tr.acts[max(spec.nonlin_indices())]
    chi = paired_signal(first_relu_out)
    pred = tr.acts[1]
    assert_allclose(
        np.linalg.norm(pred, axis=1), np.sqrt(2.0) * np.linalg.norm(chi, axis=1), rtol=1e-9
    )


def test_looks_linear_positions_in_network():
    spec = vanilla_architecture("relu", depth=3, width=8, input_dim=8, label_dim=8)
    net = init_network(spec, "looks-linear", Rng(15))
    lin = spec.linear_indices()
    top, mid, bottom = (net.weight(l) for l in lin)
    assert np.array_equal(bottom[0::2], -bottom[1::2])  # lowest: row pairs
    assert np.array_equal(top[:, 0::2], -top[:, 1::2])  # highest: column pairs
    assert np.array_equal(mid[0::2, 0::2], mid[1::2, 1::2])  # intermediate: both


# ---------------------------------------------------------------------------
# skip connections


def test_skip_initialization_kinds():
    for kind, check in [
        ("gaussian", lambda s: abs(s.var() - 1.0 / s.shape[1]) < 0.2 / s.shape[1]),
        ("orthogonal", lambda s: abs(qm_norm(s) - 1.0) < 1e-12),
    ]:
        spec = resnet_architecture(
            "relu", "layer", n_blocks=2, linears_per_block=1, width=50, input_dim=50, label_dim=50, skip_kind=kind
        )
        net = init_network(spec, "gaussian", Rng(16))
        for b in spec.blocks:
            assert net.skips[b.top] is not None
            assert check(net.skips[b.top])


def test_identity_skip_is_none_and_width_change_rejected():
    spec = resnet_architecture("relu", "layer", n_blocks=2, linears_per_block=1, width=20, input_dim=20, label_dim=20)
    net = init_network(spec, "gaussian", Rng(17))
    assert all(net.skips[b.top] is None for b in spec.blocks)
    bad = ArchitectureSpec(
        (
            Layer(LayerKind.LINEAR, out_width=4),
            Layer(LayerKind.RELU),
            Layer(LayerKind.LINEAR, out_width=6),
        ),
        input_dim=6,
        label_dim=4,
        blocks=(Block(0, 2, "identity"),),
    )
    with pytest.raises(ValueError):
        init_network(bad, "gaussian", Rng(18))


def test_init_is_deterministic_per_seed():
    spec = vanilla_architecture("relu", depth=3, width=10, input_dim=10, label_dim=10)
    a = init_network(spec, "gaussian", Rng(19))
    b = init_network(spec, "gaussian", Rng(19))
    c = init_network(spec, "gaussian", Rng(20))
    for l in spec.linear_indices():
        assert np.array_equal(a.weight(l), b.weight(l))
    assert not np.array_equal(a.weight(1), c.weight(1))
