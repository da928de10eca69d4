"""Norms, random matrices, and a splittable counter-based RNG.

All arrays are float64. Matrices are 2-D ndarrays indexed (row, col); a
matrix applied to an activation batch X of shape (n, d_in) acts as X @ W.T.

The quadratic-mean norm used throughout the package is
qm(A) = sqrt(sum(A^2) / n_cols), i.e. the Frobenius norm divided by the
square root of the column count. For a uniformly random unit vector u,
E||Au||^2 = qm(A)^2, which is why it is the natural per-layer scale measure.
"""

import hashlib

import numpy as np


class Rng:
    """Splittable deterministic RNG on top of the Philox counter-based engine.

    A stream is identified by (seed, path). split(*tags) derives an
    independent child stream by hashing the extended path into a fresh
    128-bit Philox key, so the same seed reproduces the same draws on any
    platform regardless of draw order in sibling streams.
    """

    def __init__(self, seed, path=()):
        self.seed = int(seed)
        self.path = tuple(str(t) for t in path)
        label = repr((self.seed,) + self.path).encode()
        key = int.from_bytes(hashlib.blake2b(label, digest_size=16).digest(), "little")
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, *tags):
        return Rng(self.seed, self.path + tuple(tags))

    def standard_normal(self, shape):
        return self.gen.standard_normal(shape)

    def normal(self, loc, scale, shape):
        return self.gen.normal(loc, scale, shape)

    def uniform(self, low, high, shape=None):
        return self.gen.uniform(low, high, shape)

    def integers(self, low, high, shape=None):
        return self.gen.integers(low, high, size=shape)

    def permutation(self, n):
        return self.gen.permutation(n)

    def unit_vector(self, dim):
        v = self.gen.standard_normal(dim)
        return v / np.linalg.norm(v)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"


def qm_norm(a):
    """Quadratic-mean norm: Frobenius norm over sqrt(column count).

    1-D input is treated as a single-row matrix (n_cols = its length),
    matching the use on gradient row vectors.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[-1]
    return float(np.sqrt(np.sum(a * a) / n))


def _power_iteration(a, v, tol, max_iters):
    sigma = 0.0
    for _ in range(max_iters):
        w = a @ v
        v_next = a.T @ w
        nrm = np.linalg.norm(v_next)
        if nrm == 0.0:
            return 0.0, True, v
        v_next /= nrm
        sigma_next = np.linalg.norm(a @ v_next)
        if abs(sigma_next - sigma) <= tol * max(1.0, sigma_next):
            return float(sigma_next), True, v_next
        sigma = sigma_next
        v = v_next
    return float(sigma), False, v


def operator_norm(a, tol=1e-10, max_iters=10000, rng=None, v0=None):
    """Largest singular value via power iteration on A^T A.

    Returns (value, converged). Convergence means the estimate moved by
    less than tol (relative) between iterations. v0 warm-starts the
    iteration.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        return float(np.linalg.norm(a)), True
    n = a.shape[1]
    if v0 is not None:
        v = np.asarray(v0, dtype=np.float64).copy()
    else:
        if rng is None:
            rng = Rng(0, ("operator_norm",))
        v = rng.standard_normal(n)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        v = np.ones(n)
        nv = np.sqrt(n)
    v /= nv
    sigma, converged, _ = _power_iteration(a, v, tol, max_iters)
    return sigma, converged


class OperatorNormTracker:
    """Warm-started operator norm for a matrix that changes a little per call.

    Keeps the right singular vector between calls, which makes per-update
    tracking of residual matrices during training cost a handful of matmuls.
    """

    def __init__(self, rng=None):
        self.rng = rng if rng is not None else Rng(0, ("opnorm_tracker",))
        self.v = None

    def __call__(self, a, tol=1e-10, max_iters=10000):
        a = np.asarray(a, dtype=np.float64)
        if self.v is None or self.v.shape[0] != a.shape[1]:
            self.v = self.rng.unit_vector(a.shape[1])
        sigma, _, self.v = _power_iteration(a, self.v, tol, max_iters)
        return sigma


def random_gaussian_matrix(rows, cols, variance, rng):
    return rng.standard_normal((rows, cols)) * np.sqrt(variance)


def random_orthogonal_matrix(rows, cols, rng):
    """Slice of a Haar-orthogonal matrix, scaled so the qm norm is exactly 1.

    The square sample uses QR of a Gaussian with the R-diagonal sign
    correction (otherwise QR output is not Haar). Wide slices get the
    sqrt(cols/rows) factor; tall slices need none because their columns are
    already orthonormal.
    """
    k = max(rows, cols)
    g = rng.standard_normal((k, k))
    q, r = np.linalg.qr(g)
    d = np.sign(np.diag(r))
    d[d == 0.0] = 1.0
    q = q * d
    w = q[:rows, :cols]
    return w * max(1.0, np.sqrt(cols / rows))
