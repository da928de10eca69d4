"""Monte-Carlo and closed-form checks of the scale-analysis identities.

Each check sets up its own small experiment, measures the quantity the
identity predicts, and returns a CheckResult recording prediction,
measurement, and the tolerance the comparison ran under. Checks are
deterministic given their Rng: randomness comes from named split streams,
and Monte-Carlo accumulation folds order-independent sums over fixed-size
chunks so chunks could run in any order (or in parallel) without changing
the result. Default trial counts are sized so three standard errors of the
estimator stay below half the declared tolerance.
"""

from dataclasses import dataclass

import numpy as np

from .init import init_network
from .linalg import Rng, qm_norm, random_orthogonal_matrix
from .metrics import gsc_values
from .network import (
    EvalTrace,
    LayerKind,
    _layer_forward,
    _layer_jvp,
    backward,
    forward,
    rescale_network,
    scaled_reparam_network,
    vanilla_architecture,
)

_CHUNK = 20000


@dataclass
class CheckResult:
    """Outcome of one verification experiment.

    mode declares how measured is compared to predicted: "abs" and "rel"
    bound the (relative) deviation, "lower" asserts measured >= predicted
    minus tolerance, for one-sided bounds.
    """

    name: str
    predicted: float
    measured: float
    tolerance: float
    passed: bool
    trials: int
    mode: str = "abs"
    note: str = ""

    def to_dict(self):
        return {
            "name": self.name,
            "predicted": self.predicted,
            "measured": self.measured,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "trials": self.trials,
            "mode": self.mode,
            "note": self.note,
        }


@dataclass
class SpectrumStats:
    """Absolute-singular-value statistics of a Jacobian, plus the slack
    terms of the entropy lower bound."""

    mu_abs_sv: float
    sigma_abs_sv: float
    eps: float
    delta: float

    def __post_init__(self):
        if self.sigma_abs_sv < 0:
            raise ValueError("singular value spread must be nonnegative")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta is a probability")


def _finish(name, predicted, measured, tolerance, trials, mode="abs", note=""):
    predicted = float(predicted)
    measured = float(measured)
    tolerance = float(tolerance)
    if mode == "abs":
        ok = abs(measured - predicted) <= tolerance
    elif mode == "rel":
        ok = abs(measured - predicted) <= tolerance * abs(predicted)
    elif mode == "lower":
        ok = measured >= predicted - tolerance
    else:
        raise ValueError(f"unknown comparison mode {mode!r}")
    return CheckResult(name, predicted, measured, tolerance, bool(ok), int(trials), mode, note)


def _vanilla(arch, depth, width, error="dot"):
    """Architecture from a token like "tanh" or "layer-relu".

    Input, hidden, and label dims all equal width so every level above the
    error has the same dimensionality.
    """
    if "-" in arch:
        norm, nonlin = arch.split("-", 1)
    else:
        norm, nonlin = None, arch
    return vanilla_architecture(
        nonlin,
        norm=norm,
        depth=depth,
        width=width,
        input_dim=width,
        label_dim=width,
        error=error,
    )


def _require_pointwise_rows(spec):
    """Checks that replicate one point across batch rows need every layer to
    act on rows independently, which batch norm does not."""
    if spec.blocks:
        raise ValueError("per-level Jacobians are implemented for plain chains")
    for lay in spec.layers:
        if lay.kind == LayerKind.BATCH_NORM:
            raise ValueError("per-point Jacobians are undefined under batch norm")


def _replicated_forward(net, x_row, y_row, rows):
    x = np.repeat(np.asarray(x_row, dtype=np.float64)[None, :], rows, axis=0)
    y = np.repeat(np.asarray(y_row, dtype=np.float64)[None, :], rows, axis=0)
    return forward(net, x, y)


def _segment_qm(net, trace, top, bottom):
    """qm norm of the Jacobian from level `bottom` down to level `top`.

    The trace must hold one data point replicated across n rows with
    n == d_bottom; each row then carries one basis direction through the
    per-row layer linearizations, so the stacked rows are the transposed
    Jacobian and the Frobenius norm is exact.
    """
    n = trace.n
    m = np.eye(n)
    for l in range(bottom - 1, top - 1, -1):
        m = _layer_jvp(net, trace, l, m)
    return float(np.linalg.norm(m) / np.sqrt(n))


# ---------------------------------------------------------------------------
# qm-norm identities


def check_qm_frobenius(rows=40, cols=25, rng=None):
    """The qm norm computed from singular values equals Frobenius/sqrt(cols)."""
    rng = rng or Rng(0, ("qm-frobenius",))
    a = rng.standard_normal((rows, cols))
    s = np.linalg.svd(a, compute_uv=False)
    predicted = float(np.sqrt(np.sum(s * s) / cols))
    measured = qm_norm(a)
    return _finish("qm-frobenius", predicted, measured, 1e-12, trials=1)


def check_qm_random_vector(rows=50, cols=50, trials=10000, rng=None):
    """The qm norm is the quadratic mean of |Au| over uniform unit u."""
    rng = rng or Rng(0, ("qm-random-vector",))
    a = rng.split("matrix").standard_normal((rows, cols))
    sumsq = 0.0
    done = 0
    chunk_id = 0
    while done < trials:
        m = min(_CHUNK, trials - done)
        u = rng.split("dirs", chunk_id).standard_normal((m, cols))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        sumsq += float(np.sum((u @ a.T) ** 2))
        done += m
        chunk_id += 1
    measured = float(np.sqrt(sumsq / trials))
    predicted = qm_norm(a)
    return _finish("qm-random-vector", predicted, measured, 0.02, trials, mode="rel")


# ---------------------------------------------------------------------------
# sensitivity readings of the gradient scale coefficient


def check_sensitivity(depth=6, width=16, level=None, delta=1e-5, trials=200000, rng=None, arch="tanh"):
    """GSC(k,0) equals the quadratic-mean relative error response to a small
    relative perturbation of the level-k activation.

    The perturbed forward reuses the network's own layer evaluations from
    level k downward, with all trial directions batched as rows.
    """
    rng = rng or Rng(0, ("sensitivity",))
    spec = _vanilla(arch, depth, width)
    _require_pointwise_rows(spec)
    net = init_network(spec, "gaussian", rng.split("init"))
    x = rng.split("point").standard_normal((1, width))
    y = rng.split("label").unit_vector(width)[None, :]
    base = forward(net, x, y)
    backward(net, base)
    L = spec.bottom_index
    k = L + 1 if level is None else int(level)
    if not 1 <= k <= L + 1:
        raise ValueError(f"perturbation level must lie in 1..{L + 1}")
    predicted = gsc_values(net, base)[k]
    err0 = float(base.acts[0][0, 0])
    eps_abs = delta * float(np.linalg.norm(base.acts[k][0]))
    sumsq = 0.0
    done = 0
    chunk_id = 0
    while done < trials:
        m = min(_CHUNK, trials - done)
        u = rng.split("dirs", chunk_id).standard_normal((m, base.acts[k].shape[1]))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        tr = EvalTrace(m)
        tr.acts[k] = base.acts[k] + eps_abs * u
        y_rep = np.repeat(y, m, axis=0)
        for l in range(k - 1, -1, -1):
            tr.acts[l] = _layer_forward(net, tr, l, y_rep)
        ratio = (np.abs(tr.acts[0][:, 0] - err0) / abs(err0)) / delta
        sumsq += float(np.sum(ratio * ratio))
        done += m
        chunk_id += 1
    measured = float(np.sqrt(sumsq / trials))
    return _finish("sensitivity", predicted, measured, 0.02, trials, mode="rel")


def check_param_sensitivity(depth=4, width=10, layer=None, delta=1e-5, trials=50000, rng=None, arch="tanh"):
    """Response to weight perturbations of one linear layer.

    For a bias-free linear layer k, the quadratic mean over unit Frobenius
    directions of (relative error change / relative weight change) equals
    GSC(k,0) * ||theta_k|| * ||f_{k+1}|| / (||f_k|| * sqrt(d_{k+1})).
    """
    rng = rng or Rng(0, ("param-sensitivity",))
    spec = _vanilla(arch, depth, width)
    _require_pointwise_rows(spec)
    net = init_network(spec, "gaussian", rng.split("init"))
    x = rng.split("point").standard_normal((1, width))
    y = rng.split("label").unit_vector(width)[None, :]
    base = forward(net, x, y)
    backward(net, base)
    lins = spec.linear_indices()
    k = lins[len(lins) // 2] if layer is None else int(layer)
    if k not in lins:
        raise ValueError(f"layer {k} is not linear")
    w = net.weight(k)
    d_out, d_in = w.shape
    theta_norm = float(np.linalg.norm(w))
    f_k = float(np.linalg.norm(base.acts[k][0]))
    f_below = float(np.linalg.norm(base.acts[k + 1][0]))
    predicted = gsc_values(net, base)[k] * theta_norm * f_below / (f_k * np.sqrt(d_in))
    err0 = float(base.acts[0][0, 0])
    eps_abs = delta * theta_norm
    z = base.acts[k + 1][0]
    sumsq = 0.0
    done = 0
    chunk_id = 0
    while done < trials:
        m = min(5000, trials - done)
        u = rng.split("dirs", chunk_id).standard_normal((m, d_out, d_in))
        u /= np.linalg.norm(u.reshape(m, -1), axis=1)[:, None, None]
        tr = EvalTrace(m)
        # weight perturbations enter the linear output exactly linearly
        tr.acts[k] = base.acts[k] + eps_abs * (u @ z)
        y_rep = np.repeat(y, m, axis=0)
        for l in range(k - 1, -1, -1):
            tr.acts[l] = _layer_forward(net, tr, l, y_rep)
        ratio = (np.abs(tr.acts[0][:, 0] - err0) / abs(err0)) / delta
        sumsq += float(np.sum(ratio * ratio))
        done += m
        chunk_id += 1
    measured = float(np.sqrt(sumsq / trials))
    return _finish("param-sensitivity", predicted, measured, 0.02, trials, mode="rel")


def check_param_qinverse(d_out=50, d_in=50, trials=4000, rng=None):
    """Isotropy identity behind the parameter-sensitivity constant.

    For a radially symmetric random matrix W and fixed v, the mean of
    ||Wv||^2 / ||W||_F^2 equals ||v||^2 / d_in, i.e. the harmonic-style
    quadratic mean of the per-direction gain is exactly one.
    """
    rng = rng or Rng(0, ("param-qinverse",))
    v = rng.split("vector").standard_normal(d_in)
    total = 0.0
    done = 0
    chunk_id = 0
    while done < trials:
        m = min(1000, trials - done)
        w = rng.split("mats", chunk_id).standard_normal((m, d_out, d_in))
        num = np.sum((w @ v) ** 2, axis=1)
        den = np.sum(w * w, axis=(1, 2))
        total += float(np.sum(num / den))
        done += m
        chunk_id += 1
    measured = total / trials
    predicted = float(v @ v) / d_in
    return _finish("param-qinverse", predicted, measured, 0.02, trials, mode="rel")


# ---------------------------------------------------------------------------
# invariance and equivalence of rescaled networks


def check_scaling_invariance(depth=6, width=10, points=4, rng=None):
    """GSC values are unchanged under output-preserving rescalings.

    Applies a random positive constant to every hidden level and a random
    reparametrization gain to every linear layer, then compares GSC at all
    levels and the error itself.
    """
    rng = rng or Rng(0, ("scaling-invariance",))
    spec = _vanilla("layer-tanh", depth, width)
    net = init_network(spec, "gaussian", rng.split("init"))
    x = rng.split("x").standard_normal((points, width))
    y = rng.split("y").standard_normal((points, width))
    y /= np.linalg.norm(y, axis=1, keepdims=True)
    tr1 = forward(net, x, y)
    backward(net, tr1)
    g1 = gsc_values(net, tr1)
    L = spec.bottom_index
    stream = rng.split("constants")
    c_levels = {l: float(np.exp(stream.uniform(-1.0, 1.0))) for l in range(2, L + 1)}
    gamma = {l: float(np.exp(stream.uniform(-1.0, 1.0))) for l in spec.linear_indices()}
    net2 = scaled_reparam_network(net, c_levels, gamma)
    tr2 = forward(net2, x, y)
    backward(net2, tr2)
    g2 = gsc_values(net2, tr2)
    dev = abs(tr2.mean_error - tr1.mean_error) / abs(tr1.mean_error)
    for l in g1:
        dev = max(dev, abs(g2[l] - g1[l]) / abs(g1[l]))
    return _finish("scaling-invariance", 0.0, dev, 1e-9, trials=points)


def check_rescaled_training_equivalence(
    depth=4, width=8, steps=10, factor=1.2, step_size=0.05, points=16, rng=None
):
    """A rescaled companion network trains along the same trajectory.

    The companion multiplies layer l's parameters by factor^(-l); running
    SGD on it with step sizes factor^(-2l) * eta must reproduce the original
    errors and (after undoing the parameter scaling) the original weights at
    every step.
    """
    rng = rng or Rng(0, ("rescaled-training",))
    spec = _vanilla("relu", depth, width)
    net1 = init_network(spec, "gaussian", rng.split("init"))
    net2, tf = rescale_network(net1, factor)
    x = rng.split("x").standard_normal((points, width))
    y = rng.split("y").standard_normal((points, width))
    y /= np.linalg.norm(y, axis=1, keepdims=True)
    lins = spec.linear_indices()
    dev = 0.0
    for _ in range(steps):
        tr1 = forward(net1, x, y)
        backward(net1, tr1)
        tr2 = forward(net2, x, y)
        backward(net2, tr2)
        dev = max(dev, abs(tr2.mean_error - tr1.mean_error) / abs(tr1.mean_error))
        for l in lins:
            net1.residual[l] -= step_size * tr1.param_grads[l]
            net2.residual[l] -= tf.descent_direction(l, step_size) * tr2.param_grads[l]
        for l in lins:
            w1 = net1.weight(l)
            w2 = net2.weight(l) * factor**l
            dev = max(dev, float(np.linalg.norm(w2 - w1) / np.linalg.norm(w1)))
    return _finish("rescaled-training-equivalence", 0.0, dev, 1e-9, trials=steps)


# ---------------------------------------------------------------------------
# multiplicative structure across levels


def check_decomposition(
    arch="layer-tanh", depth=50, width=100, first_layer=5, seeds=5, batch=64, rng=None
):
    """Log-linear growth of GSC with depth in exploding networks.

    When the qm norm of a deep Jacobian decomposes approximately into the
    product of per-layer qm norms, log GSC(l, 0) is close to linear in the
    layer index at initialization. Fits a least-squares line through
    (layer, log10 GSC) sampled at each layer's linear level and reports
    the mean coefficient of determination over seeds.
    """
    rng = rng or Rng(0, ("decomposition",))
    if not 1 <= first_layer < depth:
        raise ValueError("first_layer must leave at least two layers to fit")
    spec = _vanilla(arch, depth, width)
    lins = spec.linear_indices()
    layers = np.arange(first_layer, depth + 1, dtype=np.float64)
    r2 = []
    for i in range(seeds):
        net = init_network(spec, "gaussian", rng.split("init", i))
        x = rng.split("data", i).standard_normal((batch, width))
        y = rng.split("labels", i).standard_normal((batch, width))
        y /= np.linalg.norm(y, axis=1, keepdims=True)
        tr = forward(net, x, y)
        backward(net, tr)
        gsc = gsc_values(net, tr)
        logs = np.array([np.log10(gsc[lins[j - 1]]) for j in range(first_layer, depth + 1)])
        slope, intercept = np.polyfit(layers, logs, 1)
        resid = logs - (slope * layers + intercept)
        r2.append(1.0 - float(np.sum(resid**2)) / float(np.sum((logs - logs.mean()) ** 2)))
    measured = float(np.mean(r2))
    return _finish("decomposition", 1.0, measured, 0.02, trials=seeds, mode="lower")


def _lo_orthogonal_product(depth, width, seeds, rng):
    """Product identity on a chain of length-normalized orthogonal maps.

    Activations stay on the unit sphere and every block Jacobian projects
    out exactly one direction, so the width-corrected identity holds
    exactly at any width down to 2, where the sqrt(2) correction is
    material on both sides.
    """
    if width < 2:
        raise ValueError("the width correction needs dimension at least 2")
    x0 = rng.split("input").unit_vector(width)
    eye = np.eye(width)
    lhs_sq = 0.0
    seg_sq = np.zeros(depth)
    for i in range(seeds):
        st = rng.split("net", i)
        x = x0
        m = eye
        for b in range(depth):
            w = random_orthogonal_matrix(width, width, st.split("w", b))
            z = w @ x
            scale = float(np.linalg.norm(z))
            x = z / scale
            block = (eye - np.outer(x, x)) @ w / scale
            seg_sq[b] += np.sum(block * block) / width
            m = block @ m
        lhs_sq += np.sum(m * m) / width
    corr = np.sqrt(width / (width - 1.0))
    measured = corr * float(np.sqrt(lhs_sq / seeds))
    predicted = 1.0
    for b in range(depth):
        predicted *= corr * np.sqrt(seg_sq[b] / seeds)
    return float(predicted), measured


def check_gsc_product(arch="layer-tanh", seeds=30, dims=(20, 100), rng=None, levels=None):
    """Quadratic-mean-over-seeds GSC against the product over blocks.

    With the width correction sqrt(d/(d-1)) on each factor, the
    coefficient over the whole span should match the product of per-block
    coefficients. The identity is exact only for length-normalizing layers
    with isotropically oriented outputs; it applies approximately to
    practical MLPs, which is what this check measures for network
    architectures. The arch token "lo-orthogonal" instead builds the chain
    the identity is exact for, which is the honest configuration at width 2
    where normalization layers inside networks lose their Jacobian.

    The default span runs from the prediction down to the input. The
    scalar error level is excluded: its coefficient carries a 1/|error|
    factor that is heavy-tailed across seeds, and the width correction is
    undefined at dimension 1.
    """
    depth, width = dims
    rng = rng or Rng(0, ("gsc-product",))
    if arch == "lo-orthogonal":
        if levels is not None:
            raise ValueError("levels applies to network architectures only")
        predicted, measured = _lo_orthogonal_product(depth, width, seeds, rng)
        return _finish(
            "gsc-product",
            predicted,
            measured,
            0.10,
            trials=seeds,
            mode="rel",
            note="length-normalized orthogonal chain meets the identity's conditions exactly",
        )
    spec = _vanilla(arch, depth, width)
    _require_pointwise_rows(spec)
    L = spec.bottom_index
    if levels is None:
        bounds = [l for l, lay in enumerate(spec.layers) if lay.kind == LayerKind.LAYER_NORM]
        if not bounds:
            bounds = list(spec.linear_indices())
        bounds = sorted(bounds) + [L + 1]
    else:
        bounds = sorted(set(int(l) for l in levels))
        if len(bounds) < 2 or bounds[0] < 0 or bounds[-1] > L + 1:
            raise ValueError("levels must name at least two levels in 0..L+1")
    d = spec.dims()
    if any(d[b] < 2 for b in bounds):
        raise ValueError(
            "every boundary level needs dimension at least 2 for the width "
            "correction; the scalar error level does not qualify"
        )
    x_row = rng.split("x").standard_normal(width)
    y_row = rng.split("y").unit_vector(width)
    lhs_sq = 0.0
    seg_sq = np.zeros(len(bounds) - 1)
    for i in range(seeds):
        net = init_network(spec, "gaussian", rng.split("init", i))
        tr = _replicated_forward(net, x_row, y_row, width)
        norms = {l: float(np.linalg.norm(tr.acts[l][0])) for l in bounds}
        whole = _segment_qm(net, tr, bounds[0], bounds[-1])
        if not np.isfinite(whole) or whole <= 0.0:
            raise ValueError(
                "the Jacobian vanishes on this span, so the identity is "
                "vacuous; layer normalization at width 2 is the usual cause"
            )
        lhs_sq += (whole * norms[bounds[-1]] / norms[bounds[0]]) ** 2
        for m in range(1, len(bounds)):
            part = _segment_qm(net, tr, bounds[m - 1], bounds[m])
            seg_sq[m - 1] += (part * norms[bounds[m]] / norms[bounds[m - 1]]) ** 2
    corr = lambda n: np.sqrt(n / (n - 1.0))
    measured = corr(d[bounds[-1]]) * np.sqrt(lhs_sq / seeds)
    predicted = 1.0
    for m in range(1, len(bounds)):
        predicted *= corr(d[bounds[m]]) * np.sqrt(seg_sq[m - 1] / seeds)
    return _finish(
        "gsc-product",
        predicted,
        measured,
        0.10,
        trials=seeds,
        mode="rel",
        note="applies approximately to practical MLPs",
    )


# ---------------------------------------------------------------------------
# entropy lower bound (linear case)


def _stats_from_singular_values(s, eps):
    mu = float(np.mean(s))
    sigma = float(np.std(s))
    cap = -mu + np.sqrt(mu * mu + sigma * sigma)
    if eps is None:
        eps = cap
    elif eps < 0:
        raise ValueError("eps is a magnitude")
    delta = 1.0 if eps <= cap * (1.0 + 1e-12) else 0.0
    return SpectrumStats(mu, sigma, float(eps), delta)


def spectrum_stats(a, eps=None):
    """Singular-value statistics of a matrix plus the largest slack eps
    satisfying sigma^2 >= eps(eps + 2 mu), used by the entropy bound."""
    s = np.linalg.svd(np.asarray(a, dtype=np.float64), compute_uv=False)
    return _stats_from_singular_values(s, eps)


def check_entropy_bound_linear(a, eps=None, trials=0, rng=None):
    """Entropy lower bound on the qm norm, for a fixed linear map on
    Gaussian input.

    The Jacobian is constant, so the bound reduces to
    qm_norm(A) >= eps * delta + |det A|^(1/d), with the entropy change
    log|det A| known in closed form. Only this linear case is checked; the
    general nonlinear form needs a density model and stays unchecked.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("the bound compares input and output entropy of a square map")
    d = a.shape[0]
    s = np.linalg.svd(a, compute_uv=False)
    st = _stats_from_singular_values(s, eps)
    note = "linear case only; the nonlinear form is unchecked"
    if np.any(s <= 0.0):
        geo = 0.0
        note += "; singular map, geometric-mean term vanishes and the bound is loose"
    else:
        geo = float(np.exp(np.sum(np.log(s)) / d))
    predicted = st.eps * st.delta + geo
    measured = qm_norm(a)
    return _finish(
        "entropy-bound-linear", predicted, measured, 1e-12, trials=trials, mode="lower", note=note
    )


# ---------------------------------------------------------------------------
# skip connections dilute gradient growth


def check_dilution_rate(dim=200, k=3.0, r=1.1, trials=10000, rng=None):
    """Growth-rate reduction from adding an orthogonal skip to a residual
    branch whose own growth rate is r.

    The residual branch is a Gaussian linear map, with forward and backward
    actions sampled independently; acting on an independent vector, a
    Gaussian matrix produces exactly an isotropic Gaussian of matching
    scale, which is what the trial draws. Prediction is the first-order
    rate 1 + (r-1)/(k^2+1); the tolerance adds the exact-formula gap
    sqrt((k^2+r^2)/(k^2+1)) to three standard errors.
    """
    if dim < 10:
        raise ValueError("dilution experiments need dim >= 10")
    if k <= 0:
        raise ValueError("dilution k must be positive")
    if r < 1.0:
        raise ValueError("pre-dilution growth rate must be at least 1")
    rng = rng or Rng(0, ("dilution-rate",))
    s_mat = random_orthogonal_matrix(dim, dim, rng.split("skip"))
    sigma_f = 1.0 / (k * np.sqrt(dim))
    sigma_b = r * sigma_f
    bwd_sq = np.empty(trials)
    v_sq = np.empty(trials)
    fwd_sq = np.empty(trials)
    g_sq = np.empty(trials)
    done = 0
    chunk_id = 0
    while done < trials:
        m = min(_CHUNK, trials - done)
        stream = rng.split("chunk", chunk_id)
        v = stream.standard_normal((m, dim))
        g = stream.standard_normal((m, dim))
        zf = stream.standard_normal((m, dim))
        zb = stream.standard_normal((m, dim))
        v_norm = np.linalg.norm(v, axis=1, keepdims=True)
        g_norm = np.linalg.norm(g, axis=1, keepdims=True)
        fwd = sigma_f * v_norm * zf + v @ s_mat.T
        bwd = sigma_b * g_norm * zb + g @ s_mat
        sl = slice(done, done + m)
        bwd_sq[sl] = np.sum(bwd * bwd, axis=1)
        v_sq[sl] = v_norm[:, 0] ** 2
        fwd_sq[sl] = np.sum(fwd * fwd, axis=1)
        g_sq[sl] = g_norm[:, 0] ** 2
        done += m
        chunk_id += 1

    def ratio(idx):
        return float(
            np.sqrt(np.mean(bwd_sq[idx]) * np.mean(v_sq[idx]))
            / np.sqrt(np.mean(fwd_sq[idx]) * np.mean(g_sq[idx]))
        )

    measured = ratio(slice(None))
    groups = 20
    edges = np.linspace(0, trials, groups + 1, dtype=int)
    parts = [ratio(slice(a, b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]
    sigma = float(np.std(parts, ddof=1) / np.sqrt(len(parts)))
    exact = float(np.sqrt((k * k + r * r) / (k * k + 1.0)))
    predicted = 1.0 + (r - 1.0) / (k * k + 1.0)
    tolerance = abs(exact - predicted) + 3.0 * sigma
    return _finish(
        "dilution-rate",
        predicted,
        measured,
        tolerance,
        trials,
        mode="abs",
        note=f"exact rate {exact:.6f}; tolerance is linearization gap plus 3 standard errors",
    )


def check_dilution_composition(B=4, k_list=5.0, dim=200, trials=1000, rng=None):
    """Dilution of a composition of B skip-plus-residual blocks.

    Blocks use fresh orthogonal skip matrices and Gaussian residual actions;
    the composite's dilution against the whole-composition skip product is
    compared to ((prod_b (1 + 1/k_b^2)) - 1)^(-1/2).
    """
    if B < 1:
        raise ValueError("need at least one block")
    ks = np.full(B, float(k_list)) if np.isscalar(k_list) else np.asarray(k_list, dtype=np.float64)
    if ks.shape != (B,):
        raise ValueError("k_list must be a scalar or one value per block")
    if np.any(ks <= 0):
        raise ValueError("dilution constants must be positive")
    rng = rng or Rng(0, ("dilution-composition",))
    predicted = float((np.prod(1.0 + 1.0 / ks**2) - 1.0) ** -0.5)
    rho_sq = 0.0
    skip_sq = 0.0
    for t in range(trials):
        stream = rng.split("trial", t)
        u = stream.unit_vector(dim)
        v = u
        s = u
        for b in range(B):
            s_mat = random_orthogonal_matrix(dim, dim, stream.split("skip", b))
            z = stream.split("res", b).standard_normal(dim)
            rho = (np.linalg.norm(v) / (ks[b] * np.sqrt(dim))) * z
            v = s_mat @ v + rho
            s = s_mat @ s
        diff = v - s
        rho_sq += float(diff @ diff)
        skip_sq += float(s @ s)
    measured = float(np.sqrt(skip_sq / rho_sq))
    return _finish("dilution-composition", predicted, measured, 0.05, trials, mode="rel")


# ---------------------------------------------------------------------------
# batteries


CHECK_BUILDERS = {
    "qm-frobenius": lambda seed: check_qm_frobenius(rng=Rng(seed, ("qm-frobenius",))),
    "qm-random-vector": lambda seed: check_qm_random_vector(rng=Rng(seed, ("qm-random-vector",))),
    "sensitivity": lambda seed: check_sensitivity(rng=Rng(seed, ("sensitivity",))),
    "param-sensitivity": lambda seed: check_param_sensitivity(rng=Rng(seed, ("param-sensitivity",))),
    "param-qinverse": lambda seed: check_param_qinverse(rng=Rng(seed, ("param-qinverse",))),
    "scaling-invariance": lambda seed: check_scaling_invariance(rng=Rng(seed, ("scaling-invariance",))),
    "rescaled-training-equivalence": lambda seed: check_rescaled_training_equivalence(
        rng=Rng(seed, ("rescaled-training",))
    ),
    "decomposition": lambda seed: check_decomposition(rng=Rng(seed, ("decomposition",))),
    "gsc-product": lambda seed: check_gsc_product(rng=Rng(seed, ("gsc-product",))),
    "entropy-bound-linear": lambda seed: check_entropy_bound_linear(np.diag([2.0, 0.5])),
    "dilution-rate": lambda seed: check_dilution_rate(rng=Rng(seed, ("dilution-rate",))),
    "dilution-composition": lambda seed: check_dilution_composition(
        rng=Rng(seed, ("dilution-composition",))
    ),
}


def standard_checks(seed=0):
    """Run every check at its default setting. Returns a list of results in
    a fixed order, one per check."""
    return [build(seed) for build in CHECK_BUILDERS.values()]
