"""Fused elementwise kernels with a numba fast path.

The matmuls in this package go through BLAS and are not worth JIT-compiling.
What does show up in profiles is the elementwise forward/backward work of the
nonlinearity layers and the per-query-point recursion of the depth estimator,
so those live here. Set GRADSCALE_PURE_NUMPY=1 to force the numpy fallbacks
(the benchmark script compares both paths).
"""

import os

import numpy as np

SELU_POS = 1.0507
SELU_NEG = 1.0507 * 1.6733

_WANT_NUMBA = os.environ.get("GRADSCALE_PURE_NUMPY", "") != "1"

if _WANT_NUMBA:
    try:
        from numba import njit
    except ImportError:
        _WANT_NUMBA = False

USING_NUMBA = _WANT_NUMBA


def _relu_fwd_np(x):
    return np.maximum(x, 0.0)


def _relu_bwd_np(x, g):
    return np.where(x > 0.0, g, 0.0)


def _leaky_fwd_np(x, c):
    return np.where(x > 0.0, x, c * x)


def _leaky_bwd_np(x, g, c):
    return np.where(x > 0.0, g, c * g)


def _selu_fwd_np(x):
    return np.where(x > 0.0, SELU_POS * x, SELU_NEG * np.expm1(x))


def _selu_bwd_np(x, g):
    return np.where(x > 0.0, SELU_POS * g, SELU_NEG * np.exp(x) * g)


def _tanh_bwd_np(t, g):
    return (1.0 - t * t) * g


def _depth_step_np(arr, width, ratio, r_op):
    """One recursion step of the depth estimator, vectorized over query points.

    arr has shape (n_points, n_slots); slot j holds the running bound for
    gradient paths that crossed j residual matrices so far. width is the
    number of active slots before this step. ratio has shape (n_points,).
    """
    arr[:, width] = arr[:, width - 1] * r_op
    for i in range(width - 1, 0, -1):
        arr[:, i] = arr[:, i] * ratio + arr[:, i - 1] * r_op
    arr[:, 0] *= ratio


if USING_NUMBA:

    @njit(cache=True)
    def relu_fwd(x):
        out = np.empty_like(x)
        for i in range(x.size):
            v = x.flat[i]
            out.flat[i] = v if v > 0.0 else 0.0
        return out

    @njit(cache=True)
    def relu_bwd(x, g):
        out = np.empty_like(g)
        for i in range(x.size):
            out.flat[i] = g.flat[i] if x.flat[i] > 0.0 else 0.0
        return out

    @njit(cache=True)
    def leaky_fwd(x, c):
        out = np.empty_like(x)
        for i in range(x.size):
            v = x.flat[i]
            out.flat[i] = v if v > 0.0 else c * v
        return out

    @njit(cache=True)
    def leaky_bwd(x, g, c):
        out = np.empty_like(g)
        for i in range(x.size):
            out.flat[i] = g.flat[i] if x.flat[i] > 0.0 else c * g.flat[i]
        return out

    @njit(cache=True)
    def selu_fwd(x):
        out = np.empty_like(x)
        for i in range(x.size):
            v = x.flat[i]
            out.flat[i] = SELU_POS * v if v > 0.0 else SELU_NEG * (np.exp(v) - 1.0)
        return out

    @njit(cache=True)
    def selu_bwd(x, g):
        out = np.empty_like(g)
        for i in range(x.size):
            v = x.flat[i]
            out.flat[i] = SELU_POS * g.flat[i] if v > 0.0 else SELU_NEG * np.exp(v) * g.flat[i]
        return out

    @njit(cache=True)
    def tanh_bwd(t, g):
        out = np.empty_like(g)
        for i in range(t.size):
            v = t.flat[i]
            out.flat[i] = (1.0 - v * v) * g.flat[i]
        return out

    @njit(cache=True)
    def depth_step(arr, width, ratio, r_op):
        n = arr.shape[0]
        for p in range(n):
            arr[p, width] = arr[p, width - 1] * r_op
            for i in range(width - 1, 0, -1):
                arr[p, i] = arr[p, i] * ratio[p] + arr[p, i - 1] * r_op
            arr[p, 0] *= ratio[p]

else:
    relu_fwd = _relu_fwd_np
    relu_bwd = _relu_bwd_np
    leaky_fwd = _leaky_fwd_np
    leaky_bwd = _leaky_bwd_np
    selu_fwd = _selu_fwd_np
    selu_bwd = _selu_bwd_np
    tanh_bwd = _tanh_bwd_np
    depth_step = _depth_step_np
