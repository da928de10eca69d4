"""Network representation, evaluation, and exact differentiation.

Layer indexing runs from the top: layer 0 is the error layer (when present),
layer L is the bottom layer, and level L+1 is the input. The value at level l
is the output of layer l, so a forward pass walks indices L, L-1, ..., 0.
d_0 = 1 for error layers.

Parametrized (linear) layers store their weights as initial + residual; the
residual part is what training moves, the initial part is frozen. Residual
blocks add a skip path: for a block with chain layers top..bottom-1, the
output at level top is chain(f_bottom) + skip(f_bottom).
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K

VAR_FLOOR = 1e-12
LOG_FLOOR = 1e-300


class LayerKind(enum.Enum):
    LINEAR = "linear"
    RELU = "relu"
    LEAKY_RELU = "leaky_relu"
    TANH = "tanh"
    SELU = "selu"
    BATCH_NORM = "batch_norm"
    LAYER_NORM = "layer_norm"
    SOFTMAX = "softmax"
    DOT_ERROR = "dot_error"
    XENT_ERROR = "xent_error"


ERROR_KINDS = (LayerKind.DOT_ERROR, LayerKind.XENT_ERROR)
NONLIN_KINDS = (LayerKind.RELU, LayerKind.LEAKY_RELU, LayerKind.TANH, LayerKind.SELU)
NORM_KINDS = (LayerKind.BATCH_NORM, LayerKind.LAYER_NORM)


@dataclass(frozen=True)
class Layer:
    kind: LayerKind
    out_width: int | None = None  # linear layers only
    leak: float | None = None  # leaky relu only


@dataclass(frozen=True)
class Block:
    """Residual block: chain layers top..bottom-1, skip from level bottom to level top."""

    top: int
    bottom: int
    skip_kind: str = "identity"  # identity | gaussian | orthogonal


@dataclass(frozen=True)
class ArchitectureSpec:
    layers: tuple[Layer, ...]
    input_dim: int
    label_dim: int
    blocks: tuple[Block, ...] = ()

    @property
    def top_index(self):
        return 0

    @property
    def bottom_index(self):
        return len(self.layers) - 1

    @property
    def has_error(self):
        return self.layers[0].kind in ERROR_KINDS

    def dims(self):
        """d_l for levels l = 0..L+1, index l = level."""
        n = len(self.layers)
        d = [0] * (n + 1)
        d[n] = self.input_dim
        for l in range(n - 1, -1, -1):
            kind = self.layers[l].kind
            if kind == LayerKind.LINEAR:
                d[l] = self.layers[l].out_width
            elif kind in ERROR_KINDS:
                d[l] = 1
            else:
                d[l] = d[l + 1]
        return tuple(d)

    def linear_indices(self):
        return tuple(l for l, lay in enumerate(self.layers) if lay.kind == LayerKind.LINEAR)

    def nonlin_indices(self):
        return tuple(l for l, lay in enumerate(self.layers) if lay.kind in NONLIN_KINDS)

    def block_at_top(self, l):
        for b in self.blocks:
            if b.top == l:
                return b
        return None

    def validate(self):
        for l, lay in enumerate(self.layers):
            if lay.kind in ERROR_KINDS and l != 0:
                raise ValueError(f"error layer must sit at index 0, found at {l}")
            if lay.kind == LayerKind.LINEAR and not lay.out_width:
                raise ValueError(f"linear layer {l} needs out_width")
        seen = set()
        for b in self.blocks:
            if not (0 <= b.top < b.bottom <= len(self.layers)):
                raise ValueError(f"bad block span ({b.top}, {b.bottom})")
            span = set(range(b.top, b.bottom))
            if span & seen:
                raise ValueError("blocks must be disjoint")
            seen |= span
        if self.has_error and self.layers[0].kind == LayerKind.DOT_ERROR:
            if self.label_dim != self.dims()[1]:
                raise ValueError("dot error needs label_dim == prediction dim")


@dataclass
class NetworkState:
    spec: ArchitectureSpec
    initial: dict[int, np.ndarray]
    residual: dict[int, np.ndarray]
    skips: dict[int, np.ndarray | None] = field(default_factory=dict)
    # per-layer (in_scale, param_scale, out_scale); None means all ones
    scales: dict[int, tuple[float, float, float]] | None = None

    def weight(self, l):
        return self.initial[l] + self.residual[l]

    def layer_scales(self, l):
        if self.scales is None:
            return 1.0, 1.0, 1.0
        return self.scales.get(l, (1.0, 1.0, 1.0))

    def copy(self):
        return NetworkState(
            spec=self.spec,
            initial={l: w.copy() for l, w in self.initial.items()},
            residual={l: w.copy() for l, w in self.residual.items()},
            skips={l: (None if s is None else s.copy()) for l, s in self.skips.items()},
            scales=None if self.scales is None else dict(self.scales),
        )

    def zero_residual_copy(self):
        out = self.copy()
        for l in out.residual:
            out.residual[l][:] = 0.0
        return out


class EvalTrace:
    """Activations, layer stats, and (after backward) gradients for one batch."""

    def __init__(self, n):
        self.n = n
        self.acts = {}  # level -> (n, d_l)
        self.stats = {}  # layer -> small per-layer cache (norm std etc.)
        self.grads = {}  # level -> d(sum f_0)/d f_l, (n, d_l)
        self.param_grads = {}  # linear layer -> d(mean f_0)/d theta, (d_l, d_l+1)
        self.block_chain_out = {}  # block top -> chain output before skip add
        self.block_skip_out = {}  # block top -> skip output
        self.block_chain_grad_in = {}  # block top -> chain-only gradient at level bottom
        self.labels = None

    @property
    def error(self):
        return self.acts[0][:, 0]

    @property
    def mean_error(self):
        return float(np.mean(self.acts[0]))


def _scaled_input(net, trace, l):
    in_s, _, _ = net.layer_scales(l)
    x = trace.acts[l + 1]
    return x if in_s == 1.0 else in_s * x


def _layer_forward(net, trace, l, y):
    lay = net.spec.layers[l]
    in_s, p_s, out_s = net.layer_scales(l)
    z = _scaled_input(net, trace, l)
    kind = lay.kind
    if kind == LayerKind.LINEAR:
        out = z @ (p_s * net.weight(l)).T
    elif kind == LayerKind.RELU:
        out = K.relu_fwd(z)
    elif kind == LayerKind.LEAKY_RELU:
        out = K.leaky_fwd(z, lay.leak)
    elif kind == LayerKind.TANH:
        out = np.tanh(z)
    elif kind == LayerKind.SELU:
        out = K.selu_fwd(z)
    elif kind == LayerKind.BATCH_NORM:
        if z.shape[0] < 2:
            raise ValueError("batch norm needs a batch of at least 2")
        mu = z.mean(axis=0)
        std = np.sqrt(np.maximum(z.var(axis=0), VAR_FLOOR))
        out = (z - mu) / std
        trace.stats[l] = std
    elif kind == LayerKind.LAYER_NORM:
        mu = z.mean(axis=1, keepdims=True)
        std = np.sqrt(np.maximum(z.var(axis=1, keepdims=True), VAR_FLOOR))
        out = (z - mu) / std
        trace.stats[l] = std
    elif kind == LayerKind.SOFTMAX:
        e = np.exp(z - z.max(axis=1, keepdims=True))
        out = e / e.sum(axis=1, keepdims=True)
    elif kind == LayerKind.DOT_ERROR:
        trace._dot_y = y
        out = np.sum(z * y, axis=1, keepdims=True)
    elif kind == LayerKind.XENT_ERROR:
        p = z[np.arange(z.shape[0]), trace.labels]
        out = -np.log(np.maximum(p, LOG_FLOOR))[:, None]
    else:
        raise ValueError(f"unhandled layer kind {kind}")
    return out if out_s == 1.0 else out_s * out


def forward(net, x, y=None):
    """Evaluate the network on a batch. x is (n, input_dim).

    y is the label batch: (n, label_dim) for dot-product error, integer class
    array (n,) for cross-entropy. Nets with an error layer require y.
    """
    spec = net.spec
    spec.validate()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"input must be (n, {spec.input_dim})")
    trace = EvalTrace(x.shape[0])
    if spec.has_error:
        if y is None:
            raise ValueError("this network has an error layer; labels required")
        if spec.layers[0].kind == LayerKind.XENT_ERROR:
            trace.labels = np.asarray(y)
            if trace.labels.ndim != 1:
                raise ValueError("cross-entropy labels must be a 1-D class array")
        else:
            y = np.asarray(y, dtype=np.float64)
    L = spec.bottom_index
    trace.acts[L + 1] = x
    for l in range(L, -1, -1):
        out = _layer_forward(net, trace, l, y)
        blk = spec.block_at_top(l)
        if blk is not None:
            skip_in = trace.acts[blk.bottom]
            s = net.skips.get(blk.top)
            skip_out = skip_in if s is None else skip_in @ s.T
            trace.block_chain_out[blk.top] = out
            trace.block_skip_out[blk.top] = skip_out
            out = out + skip_out
        trace.acts[l] = out
    return trace


def _layer_vjp(net, trace, l, g, want_param_grads=True):
    """Gradient through layer l: returns (g_input, param_grad_sum or None)."""
    lay = net.spec.layers[l]
    in_s, p_s, out_s = net.layer_scales(l)
    if out_s != 1.0:
        g = out_s * g
    kind = lay.kind
    pg = None
    if kind == LayerKind.LINEAR:
        gx = g @ (p_s * net.weight(l))
        if want_param_grads:
            z = _scaled_input(net, trace, l)
            pg = p_s * (g.T @ z)
    elif kind == LayerKind.RELU:
        z = _scaled_input(net, trace, l)
        gx = K.relu_bwd(z, g)
    elif kind == LayerKind.LEAKY_RELU:
        z = _scaled_input(net, trace, l)
        gx = K.leaky_bwd(z, g, lay.leak)
    elif kind == LayerKind.TANH:
        gx = K.tanh_bwd(_postact_raw(net, trace, l), g)
    elif kind == LayerKind.SELU:
        z = _scaled_input(net, trace, l)
        gx = K.selu_bwd(z, g)
    elif kind == LayerKind.BATCH_NORM:
        xhat = _postact_raw(net, trace, l)
        std = trace.stats[l]
        gx = (g - g.mean(axis=0) - xhat * np.mean(g * xhat, axis=0)) / std
    elif kind == LayerKind.LAYER_NORM:
        xhat = _postact_raw(net, trace, l)
        std = trace.stats[l]
        gx = (g - g.mean(axis=1, keepdims=True) - xhat * np.mean(g * xhat, axis=1, keepdims=True)) / std
    elif kind == LayerKind.SOFTMAX:
        s = _postact_raw(net, trace, l)
        gx = s * (g - np.sum(g * s, axis=1, keepdims=True))
    elif kind == LayerKind.DOT_ERROR:
        gx = g * trace._dot_y
    elif kind == LayerKind.XENT_ERROR:
        z = _scaled_input(net, trace, l)
        n = z.shape[0]
        p = np.maximum(z[np.arange(n), trace.labels], LOG_FLOOR)
        gx = np.zeros_like(z)
        gx[np.arange(n), trace.labels] = -g[:, 0] / p
    else:
        raise ValueError(f"unhandled layer kind {kind}")
    if in_s != 1.0:
        gx = in_s * gx
    return gx, pg


def _postact_raw(net, trace, l):
    """Layer l's own output before out-scaling and before any skip add."""
    blk = net.spec.block_at_top(l)
    out = trace.block_chain_out[l] if blk is not None else trace.acts[l]
    _, _, out_s = net.layer_scales(l)
    return out if out_s == 1.0 else out / out_s


def backward(net, trace, seed=None, keep_grads=None, param_grads=True):
    """Fill trace.grads with d(sum_i f_0(x_i))/d f_l and trace.param_grads
    with d(mean error)/d theta_l.

    Per-datapoint gradients are the rows of trace.grads[l]; under batch norm
    they include the cross-datapoint terms of the full-batch backward. For
    nets without an error layer, seed supplies d(objective)/d f_0.
    keep_grads limits which levels stay in trace.grads (default: all);
    the pass itself is unchanged, only the retention, which bounds memory
    on large batches. param_grads=False skips the weight gradients.
    """
    spec = net.spec
    L = spec.bottom_index
    n = trace.n
    if spec.has_error:
        g0 = np.ones((n, 1))
    else:
        if seed is None:
            raise ValueError("no error layer: supply a seed gradient")
        g0 = np.asarray(seed, dtype=np.float64)
    keep = None if keep_grads is None else frozenset(keep_grads)
    acc = {0: g0}
    for l in range(0, L + 1):
        g = acc.pop(l)
        if keep is None or l in keep:
            trace.grads[l] = g
        gx, pg_sum = _layer_vjp(net, trace, l, g, want_param_grads=param_grads)
        if pg_sum is not None:
            trace.param_grads[l] = pg_sum / n
        blk = spec.block_at_top(l)
        if blk is not None:
            s = net.skips.get(blk.top)
            g_skip = g if s is None else g @ s
            _accumulate(acc, blk.bottom, g_skip)
        top = _chain_bottom_of(spec, l)
        if top is not None:
            trace.block_chain_grad_in[top] = gx
        _accumulate(acc, l + 1, gx)
    if keep is None or L + 1 in keep:
        trace.grads[L + 1] = acc.pop(L + 1)
    return trace


def _chain_bottom_of(spec, l):
    """If layer l is the lowest chain layer of a block, return that block's top index."""
    for b in spec.blocks:
        if l == b.bottom - 1:
            return b.top
    return None


def _accumulate(acc, level, g):
    if level in acc:
        acc[level] = acc[level] + g
    else:
        acc[level] = g


def _layer_jvp(net, trace, l, d):
    """Directional derivative through layer l at the traced activations."""
    lay = net.spec.layers[l]
    in_s, p_s, out_s = net.layer_scales(l)
    if in_s != 1.0:
        d = in_s * d
    kind = lay.kind
    if kind == LayerKind.LINEAR:
        out = d @ (p_s * net.weight(l)).T
    elif kind == LayerKind.RELU:
        z = _scaled_input(net, trace, l)
        out = K.relu_bwd(z, d)
    elif kind == LayerKind.LEAKY_RELU:
        z = _scaled_input(net, trace, l)
        out = K.leaky_bwd(z, d, lay.leak)
    elif kind == LayerKind.TANH:
        out = K.tanh_bwd(_postact_raw(net, trace, l), d)
    elif kind == LayerKind.SELU:
        z = _scaled_input(net, trace, l)
        out = K.selu_bwd(z, d)
    elif kind == LayerKind.BATCH_NORM:
        xhat = _postact_raw(net, trace, l)
        std = trace.stats[l]
        out = (d - d.mean(axis=0) - xhat * np.mean(xhat * d, axis=0)) / std
    elif kind == LayerKind.LAYER_NORM:
        xhat = _postact_raw(net, trace, l)
        std = trace.stats[l]
        out = (d - d.mean(axis=1, keepdims=True) - xhat * np.mean(xhat * d, axis=1, keepdims=True)) / std
    elif kind == LayerKind.SOFTMAX:
        s = _postact_raw(net, trace, l)
        out = s * (d - np.sum(s * d, axis=1, keepdims=True))
    elif kind == LayerKind.DOT_ERROR:
        out = np.sum(d * trace._dot_y, axis=1, keepdims=True)
    elif kind == LayerKind.XENT_ERROR:
        z = _scaled_input(net, trace, l)
        n = z.shape[0]
        p = np.maximum(z[np.arange(n), trace.labels], LOG_FLOOR)
        out = (-d[np.arange(n), trace.labels] / p)[:, None]
    else:
        raise ValueError(f"unhandled layer kind {kind}")
    return out if out_s == 1.0 else out_s * out


def jvp(net, trace, level, delta):
    """Push a perturbation of f_level forward to all levels above it.

    Returns {l: d f_l} for l = level..0 (or down to the top layer for nets
    without an error layer). The linearization is taken at the activations
    stored in trace, so run forward first.
    """
    spec = net.spec
    deltas = {level: np.asarray(delta, dtype=np.float64)}
    for l in range(level - 1, -1, -1):
        out = _layer_jvp(net, trace, l, deltas[l + 1])
        blk = spec.block_at_top(l)
        if blk is not None and blk.bottom <= level:
            s = net.skips.get(blk.top)
            out = out + (deltas[blk.bottom] if s is None else deltas[blk.bottom] @ s.T)
        deltas[l] = out
    return deltas


# ---------------------------------------------------------------------------
# architecture builders


def _norm_layer(norm):
    if norm == "batch":
        return Layer(LayerKind.BATCH_NORM)
    if norm == "layer":
        return Layer(LayerKind.LAYER_NORM)
    raise ValueError(f"unknown norm {norm!r}")


def _nonlin_layer(nonlin, leak=None):
    table = {
        "relu": Layer(LayerKind.RELU),
        "tanh": Layer(LayerKind.TANH),
        "selu": Layer(LayerKind.SELU),
    }
    if nonlin == "leaky_relu":
        return Layer(LayerKind.LEAKY_RELU, leak=leak if leak is not None else 0.2)
    if nonlin in table:
        return table[nonlin]
    raise ValueError(f"unknown nonlinearity {nonlin!r}")


def vanilla_architecture(
    nonlin,
    norm=None,
    depth=50,
    width=100,
    input_dim=100,
    label_dim=100,
    error="dot",
    last_width=None,
    leak=None,
):
    """Plain MLP: depth linear layers with nonlinearities between them.

    When norm is given, one normalization layer follows every linear layer.
    error is "dot", "xent" (which also inserts a softmax on top), or None.
    """
    bottom_up = []
    for i in range(1, depth + 1):
        out_w = width if (i < depth or last_width is None) else last_width
        bottom_up.append(Layer(LayerKind.LINEAR, out_width=out_w))
        if norm is not None:
            bottom_up.append(_norm_layer(norm))
        if i < depth:
            bottom_up.append(_nonlin_layer(nonlin, leak))
    if error == "xent":
        bottom_up.append(Layer(LayerKind.SOFTMAX))
        bottom_up.append(Layer(LayerKind.XENT_ERROR))
    elif error == "dot":
        bottom_up.append(Layer(LayerKind.DOT_ERROR))
    elif error is not None:
        raise ValueError(f"unknown error kind {error!r}")
    layers = tuple(reversed(bottom_up))
    spec = ArchitectureSpec(layers, input_dim=input_dim, label_dim=label_dim)
    spec.validate()
    return spec


def resnet_architecture(
    nonlin,
    norm,
    n_blocks=25,
    linears_per_block=2,
    width=100,
    input_dim=100,
    label_dim=100,
    error="dot",
    skip_kind="identity",
    last_width=None,
    leak=None,
):
    """First a linear layer, then n_blocks residual blocks, then a final norm.

    Each block chains linears_per_block repetitions of (norm, nonlinearity,
    linear). last_width reshapes the final block's last linear layer and its
    skip; a width-changing identity skip is promoted to an orthogonal one.
    """
    bottom_up = []
    spans = []
    bottom_up.append(Layer(LayerKind.LINEAR, out_width=width))
    for b in range(1, n_blocks + 1):
        start = len(bottom_up)
        for j in range(1, linears_per_block + 1):
            out_w = width
            if b == n_blocks and j == linears_per_block and last_width is not None:
                out_w = last_width
            bottom_up.append(_norm_layer(norm))
            bottom_up.append(_nonlin_layer(nonlin, leak))
            bottom_up.append(Layer(LayerKind.LINEAR, out_width=out_w))
        end = len(bottom_up) - 1
        kind = skip_kind
        if last_width is not None and b == n_blocks and kind == "identity":
            kind = "orthogonal"
        spans.append((start, end, kind))
    bottom_up.append(_norm_layer(norm))
    if error == "xent":
        bottom_up.append(Layer(LayerKind.SOFTMAX))
        bottom_up.append(Layer(LayerKind.XENT_ERROR))
    elif error == "dot":
        bottom_up.append(Layer(LayerKind.DOT_ERROR))
    elif error is not None:
        raise ValueError(f"unknown error kind {error!r}")
    total = len(bottom_up)
    layers = tuple(reversed(bottom_up))
    blocks = tuple(
        Block(top=total - 1 - end, bottom=total - start, skip_kind=kind)
        for start, end, kind in spans
    )
    spec = ArchitectureSpec(layers, input_dim=input_dim, label_dim=label_dim, blocks=blocks)
    spec.validate()
    return spec


# ---------------------------------------------------------------------------
# rescaling (scale-and-reparametrize constructions)


@dataclass
class RescaleTransform:
    """Companion transforms that keep SGD on a rescaled net equivalent.

    The construction multiplies layer l's parameters by factor^l, so the
    equivalent run feeds the gradient through factor^(-l) before the update
    rule and scales the resulting update by factor^(-l) again.
    """

    factor: float
    exponents: dict[int, int]

    def gradient_in(self, l, grad):
        return grad * self.factor ** (-self.exponents[l])

    def update_out(self, l, update):
        return update * self.factor ** (-self.exponents[l])

    def descent_direction(self, l, raw_grad):
        return raw_grad * self.factor ** (-2 * self.exponents[l])


_HOMOGENEOUS = (LayerKind.LINEAR, LayerKind.RELU, LayerKind.LEAKY_RELU)


def rescale_network(net, factor):
    """Build the exploding-Jacobian companion of a ReLU/leaky/linear chain.

    The returned net computes identical predictions and error, but every
    between-layer Jacobian from level k to level l is scaled by factor^(k-l).
    Returns (rescaled_net, transform).
    """
    spec = net.spec
    if spec.blocks:
        raise ValueError("rescaling is defined for plain chains, not blocks")
    if factor <= 0:
        raise ValueError("rescale factor must be positive")
    if not spec.has_error:
        raise ValueError("rescaling assumes an error layer at index 0")
    L = spec.bottom_index
    for l in range(1, L + 1):
        if spec.layers[l].kind not in _HOMOGENEOUS:
            raise ValueError(
                f"unsupported nonlinearity for exact scaling: {spec.layers[l].kind.value}"
            )
    if spec.layers[L].kind != LayerKind.LINEAR:
        raise ValueError("bottom layer must be linear")
    R = float(factor)
    scales = {}
    exponents = {}
    for l in range(1, L + 1):
        if l == 1:
            scales[l] = (R * R, R, 1.0)
        elif l == L:
            scales[l] = (1.0, R**L, R ** (-L))
        else:
            scales[l] = (R ** (l + 1), R**l, R ** (-l))
        if spec.layers[l].kind == LayerKind.LINEAR:
            exponents[l] = l
    out = net.copy()
    out.scales = scales
    for l in exponents:
        out.initial[l] = net.initial[l] * R ** (-exponents[l])
        out.residual[l] = net.residual[l] * R ** (-exponents[l])
    return out, RescaleTransform(factor=R, exponents=exponents)


def scaled_reparam_network(net, c_levels, gamma):
    """General scaling reparametrization (any layer kinds).

    Layer l becomes c_l * f_l(gamma_l * theta, F / c_{l+1}) with parameters
    theta / gamma_l, which leaves every scale coefficient unchanged.
    c_levels maps level -> constant and must have c_0 = c_1 = c_{L+1} = 1.
    """
    spec = net.spec
    if spec.blocks:
        raise ValueError("reparametrization is defined for plain chains")
    L = spec.bottom_index
    c = {l: float(c_levels.get(l, 1.0)) for l in range(0, L + 2)}
    for fixed in (0, 1, L + 1):
        if c[fixed] != 1.0:
            raise ValueError("c_0, c_1 and the input constant must be 1")
    scales = {}
    for l in range(1, L + 1):
        g = float(gamma.get(l, 1.0)) if spec.layers[l].kind == LayerKind.LINEAR else 1.0
        scales[l] = (1.0 / c[l + 1], g, c[l])
    out = net.copy()
    out.scales = scales
    for l in out.initial:
        g = float(gamma.get(l, 1.0))
        out.initial[l] = net.initial[l] / g
        out.residual[l] = net.residual[l] / g
    return out


# ---------------------------------------------------------------------------
# serialization: GSCL container, little-endian, length-prefixed records

_MAGIC = b"GSCL"
_VERSION = 1


def _pack_record(payload):
    return struct.pack("<I", len(payload)) + payload


def _pack_matrix(m):
    if m is None:
        return _pack_record(b"")
    m = np.ascontiguousarray(m, dtype="<f8")
    head = struct.pack("<II", m.shape[0], m.shape[1])
    return _pack_record(head + m.tobytes())


def _spec_to_json(spec):
    return json.dumps(
        {
            "layers": [
                {"kind": lay.kind.value, "out_width": lay.out_width, "leak": lay.leak}
                for lay in spec.layers
            ],
            "input_dim": spec.input_dim,
            "label_dim": spec.label_dim,
            "blocks": [[b.top, b.bottom, b.skip_kind] for b in spec.blocks],
        },
        sort_keys=True,
    ).encode()


def _spec_from_json(raw):
    d = json.loads(raw.decode())
    layers = tuple(
        Layer(LayerKind(e["kind"]), out_width=e["out_width"], leak=e["leak"])
        for e in d["layers"]
    )
    blocks = tuple(Block(t, b, k) for t, b, k in d["blocks"])
    return ArchitectureSpec(layers, d["input_dim"], d["label_dim"], blocks)


def save_network(net, path):
    spec = net.spec
    lin = spec.linear_indices()
    parts = [_MAGIC, struct.pack("<I", _VERSION), _pack_record(_spec_to_json(spec))]
    scales = net.scales or {}
    meta = json.dumps(
        {"linear": list(lin), "skips": sorted(net.skips), "scales": {str(k): v for k, v in sorted(scales.items())}},
        sort_keys=True,
    ).encode()
    parts.append(_pack_record(meta))
    for l in lin:
        parts.append(_pack_matrix(net.initial[l]))
        parts.append(_pack_matrix(net.residual[l]))
    for t in sorted(net.skips):
        parts.append(_pack_matrix(net.skips[t]))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise ValueError("truncated network file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def record(self):
        (n,) = struct.unpack("<I", self.take(4))
        return self.take(n)

    def matrix(self):
        raw = self.record()
        if not raw:
            return None
        rows, cols = struct.unpack("<II", raw[:8])
        return np.frombuffer(raw[8:], dtype="<f8").reshape(rows, cols).copy()


def load_network(path):
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if rd.take(4) != _MAGIC:
        raise ValueError("not a GSCL network file")
    (version,) = struct.unpack("<I", rd.take(4))
    if version != _VERSION:
        raise ValueError(f"unsupported version {version}")
    spec = _spec_from_json(rd.record())
    meta = json.loads(rd.record().decode())
    initial, residual = {}, {}
    for l in meta["linear"]:
        initial[l] = rd.matrix()
        residual[l] = rd.matrix()
    skips = {t: rd.matrix() for t in meta["skips"]}
    scales = {int(k): tuple(v) for k, v in meta["scales"].items()} or None
    return NetworkState(spec=spec, initial=initial, residual=residual, skips=skips, scales=scales)
