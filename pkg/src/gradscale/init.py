"""Weight initialization schemes.

All schemes draw from the network's Rng via per-layer split streams, so a
given (seed, architecture, scheme) triple always produces the same state.
The sqrt(2) gain is applied after scheme generation to any linear layer whose
input comes straight from a ReLU (not under looks-linear, which builds the
factor into its top matrix).
"""

import numpy as np

from .linalg import qm_norm, random_gaussian_matrix, random_orthogonal_matrix
from .network import LayerKind, NetworkState

SCHEMES = ("gaussian", "orthogonal", "looks-linear", "skew", "negctc", "corr-gaussian")

_SQUARE_ONLY = ("skew", "negctc", "corr-gaussian")


def gaussian_fan_in(rows, cols, rng):
    return random_gaussian_matrix(rows, cols, 1.0 / cols, rng)


def skew_symmetric(n, rng):
    c = rng.standard_normal((n, n))
    s = c - c.T
    return s / qm_norm(s)


def neg_ctc(n, rng):
    c = rng.standard_normal((n, n))
    m = -(c.T @ c)
    return m / qm_norm(m)


def correlated_gaussian(prev, rng):
    """Fresh Gaussian mixed with the layer below for entrywise Pearson 0.5."""
    rows, cols = prev.shape
    c = gaussian_fan_in(rows, cols, rng)
    mix = np.sqrt(0.75) * c + 0.5 * prev
    return mix / qm_norm(mix)


def looks_linear(rows, cols, position, rng):
    """Mirrored orthogonal init; the network starts out computing a linear map.

    position is "lowest", "intermediate" or "highest" depending on which
    sides of the matrix face ReLU pairs. Paired dimensions must be even.
    """
    if position == "lowest":
        if rows % 2:
            raise ValueError("looks-linear lowest layer needs an even output width")
        k = max(rows // 2, cols)
        base = random_orthogonal_matrix(k, k, rng)
        s = max(np.sqrt(rows / (2.0 * cols)), 1.0)
        w = np.empty((rows, cols))
        w[0::2, :] = s * base[: rows // 2, :cols]
        w[1::2, :] = -s * base[: rows // 2, :cols]
        return w
    if position == "highest":
        if cols % 2:
            raise ValueError("looks-linear highest layer needs an even input width")
        k = max(rows, cols // 2)
        base = random_orthogonal_matrix(k, k, rng)
        s = max(np.sqrt(2.0 * rows / cols), 1.0)
        w = np.empty((rows, cols))
        w[:, 0::2] = s * base[:rows, : cols // 2]
        w[:, 1::2] = -s * base[:rows, : cols // 2]
        return w
    if position == "intermediate":
        if rows % 2 or cols % 2:
            raise ValueError("looks-linear intermediate layer needs even widths")
        k = max(rows // 2, cols // 2)
        base = random_orthogonal_matrix(k, k, rng)
        s = max(np.sqrt(rows / cols), 1.0)
        core = s * base[: rows // 2, : cols // 2]
        w = np.empty((rows, cols))
        w[0::2, 0::2] = core
        w[1::2, 0::2] = -core
        w[0::2, 1::2] = -core
        w[1::2, 1::2] = core
        return w
    raise ValueError(f"unknown looks-linear position {position!r}")


def _ll_position(order, count):
    if order == count - 1:
        return "lowest"
    if order == 0:
        return "highest"
    return "intermediate"


def init_network(spec, scheme, rng, overrides=None):
    """Initialize all linear layers and skip matrices of an architecture.

    overrides maps layer index -> scheme name for layers that deviate from
    the main scheme (the dynamical-systems nets pin their first and last
    linear layers to Gaussian, for example). The correlated scheme falls
    back to Gaussian whenever the layer below it did not itself use the
    scheme, which also covers the lowest such layer.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    overrides = overrides or {}
    dims = spec.dims()
    lin = spec.linear_indices()
    initial = {}
    prev_correlated = None  # weight of the linear below, if it used corr-gaussian
    for order, l in enumerate(reversed(lin)):  # bottom-up, data-flow order
        this = overrides.get(l, scheme)
        rows, cols = dims[l], dims[l + 1]
        lrng = rng.split("layer", l)
        if this in _SQUARE_ONLY and rows != cols:
            raise ValueError(f"scheme {this!r} needs a square matrix at layer {l}")
        if this == "gaussian":
            w = gaussian_fan_in(rows, cols, lrng)
        elif this == "orthogonal":
            w = random_orthogonal_matrix(rows, cols, lrng)
        elif this == "skew":
            w = skew_symmetric(rows, lrng)
        elif this == "negctc":
            w = neg_ctc(rows, lrng)
        elif this == "corr-gaussian":
            if prev_correlated is None:
                w = gaussian_fan_in(rows, cols, lrng)
            else:
                w = correlated_gaussian(prev_correlated, lrng)
        elif this == "looks-linear":
            w = looks_linear(rows, cols, _ll_position(len(lin) - 1 - order, len(lin)), lrng)
        prev_correlated = w if this == "corr-gaussian" else None
        if this != "looks-linear" and l + 1 <= spec.bottom_index:
            if spec.layers[l + 1].kind == LayerKind.RELU:
                w = w * np.sqrt(2.0)
        initial[l] = w
    residual = {l: np.zeros_like(initial[l]) for l in lin}
    skips = {}
    for b in spec.blocks:
        srng = rng.split("skip", b.top)
        rows, cols = dims[b.top], dims[b.bottom]
        if b.skip_kind == "identity":
            if rows != cols:
                raise ValueError("identity skip needs matching widths")
            skips[b.top] = None
        elif b.skip_kind == "gaussian":
            skips[b.top] = gaussian_fan_in(rows, cols, srng)
        elif b.skip_kind == "orthogonal":
            skips[b.top] = random_orthogonal_matrix(rows, cols, srng)
        else:
            raise ValueError(f"unknown skip kind {b.skip_kind!r}")
    return NetworkState(spec=spec, initial=initial, residual=residual, skips=skips)
