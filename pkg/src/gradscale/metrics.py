"""Static pathology metrics over an evaluated batch.

Computes the gradient scale coefficient GSC(l,0) at every level, the
pre-activation statistics of each nonlinearity layer (std, quadratic
expectation, domain bias, sign diversity, linear-approximation error), and
the per-block dilution levels with a dilution-corrected GSC curve for nets
with skip connections.

All dataset expectations here are exact over the supplied batch. Training
code tracks the same quantities with exponential running averages instead
(see RunningStats).
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .network import NONLIN_KINDS, _postact_raw, backward, forward

_VAR_TINY = 1e-18

CSV_COLUMNS = (
    "layer_index",
    "layer_kind",
    "gsc",
    "pre_std",
    "pre_qexp",
    "domain_bias",
    "sign_div",
    "lin_err",
    "dilution_k",
    "gsc_corr",
)


def quadratic_mean(values):
    values = np.asarray(values, dtype=np.float64)
    return float(np.sqrt(np.mean(values * values)))


def level_norms(trace, level):
    return np.linalg.norm(trace.acts[level], axis=1)


def gsc_values(net, trace, levels=None):
    """GSC(l,0) for levels l = 0..L+1 from a backward-completed trace.

    With a scalar error layer the gradient rows are the Jacobians to the
    error, so the qm norm at level l is the row norm over sqrt(d_l).
    levels restricts the output to the given levels (default: all).
    """
    spec = net.spec
    if not spec.has_error:
        raise ValueError("scale coefficients need an error layer at the top")
    L = spec.bottom_index
    err_q = quadratic_mean(np.abs(trace.error))
    if err_q == 0.0:
        raise ValueError("degenerate network: error is identically zero")
    out = {}
    for level in range(0, L + 2) if levels is None else levels:
        acts = trace.acts[level]
        d = acts.shape[1]
        f_q = quadratic_mean(np.linalg.norm(acts, axis=1))
        if f_q == 0.0:
            raise ValueError(f"degenerate network: zero activations at level {level}")
        j_q = quadratic_mean(np.linalg.norm(trace.grads[level], axis=1) / np.sqrt(d))
        out[level] = j_q * f_q / err_q
    return out


def preactivation_stats(net, trace):
    """Per-nonlinearity-layer statistics of the feeding activations."""
    stats = {}
    for l in net.spec.nonlin_indices():
        pre = trace.acts[l + 1]
        e1 = pre.mean(axis=0)
        e2 = np.mean(pre * pre, axis=0)
        var = np.maximum(e2 - e1 * e1, 0.0)
        pos = np.mean(pre > 0.0, axis=0)
        neg = np.mean(pre < 0.0, axis=0)
        total = float(np.sum(e2))
        stats[l] = {
            "pre_std": float(np.sqrt(np.mean(var))),
            "pre_qexp": float(np.sqrt(np.mean(e2))),
            "domain_bias": 1.0 - float(np.sum(e1 * e1)) / total if total > 0.0 else 0.0,
            "sign_div": float(np.mean(np.minimum(pos, neg))),
        }
    return stats


def linear_fit_error(pre, post):
    """One minus the signal fraction captured by per-neuron least squares."""
    mp = pre.mean(axis=0)
    mq = post.mean(axis=0)
    cov = np.mean(pre * post, axis=0) - mp * mq
    var = np.mean(pre * pre, axis=0) - mp * mp
    a = np.where(var > _VAR_TINY, cov / np.where(var > _VAR_TINY, var, 1.0), 0.0)
    b = mq - a * mp
    fitted = a * pre + b
    denom = float(np.sum(post * post) / post.shape[0])
    if denom == 0.0:
        return 0.0
    captured = float(np.sum(fitted * fitted) / pre.shape[0])
    return 1.0 - captured / denom


def linear_approx_error(net, trace, layer):
    if net.spec.layers[layer].kind not in NONLIN_KINDS:
        raise ValueError(f"layer {layer} is not a nonlinearity")
    pre = trace.acts[layer + 1]
    post = _postact_raw(net, trace, layer)
    return linear_fit_error(pre, post)


def block_boundaries(spec):
    """Measurement levels for nets with blocks: every block output, the
    lowest block's input, and the network input."""
    tops = sorted(b.top for b in spec.blocks)
    lowest = max(spec.blocks, key=lambda b: b.top)
    levels = []
    for level in tops + [lowest.bottom, spec.bottom_index + 1]:
        if level not in levels:
            levels.append(level)
    return levels


def dilution_report(net, trace, gsc=None):
    """Per-block dilution level and the corrected scale-coefficient curve.

    The curve walks boundaries top-down; crossing block b multiplies the
    accumulated corrected value by 1 + (k_b^2+1)(ratio - 1) where ratio is
    the raw growth across the block. Segments without a skip (below the
    lowest block) keep their raw growth.
    """
    spec = net.spec
    if not spec.blocks:
        raise ValueError("dilution is defined for nets with residual blocks")
    if gsc is None:
        gsc = gsc_values(net, trace)
    k = {}
    for b in spec.blocks:
        skip_q = quadratic_mean(np.linalg.norm(trace.block_skip_out[b.top], axis=1))
        chain_q = quadratic_mean(np.linalg.norm(trace.block_chain_out[b.top], axis=1))
        k[b.top] = skip_q / chain_q if chain_q > 0.0 else np.inf
    levels = block_boundaries(spec)
    corrected = {levels[0]: gsc[levels[0]]}
    blocks_by_top = {b.top: b for b in spec.blocks}
    for above, below in zip(levels[:-1], levels[1:]):
        ratio = gsc[below] / gsc[above]
        blk = blocks_by_top.get(above)
        if blk is not None and np.isfinite(k[above]):
            factor = 1.0 + (k[above] ** 2 + 1.0) * (ratio - 1.0)
        else:
            factor = ratio
        corrected[below] = corrected[above] * factor
    return k, corrected


@dataclass
class GscReport:
    """Everything the per-layer CSV/JSON outputs carry."""

    kinds: dict[int, str]
    gsc: dict[int, float]
    nonlin: dict[int, dict[str, float]] = field(default_factory=dict)
    dilution: dict[int, float] = field(default_factory=dict)
    gsc_corr: dict[int, float] = field(default_factory=dict)

    def row(self, level):
        cells = {"layer_index": level, "layer_kind": self.kinds.get(level, "")}
        cells["gsc"] = self.gsc.get(level, "")
        for key in ("pre_std", "pre_qexp", "domain_bias", "sign_div", "lin_err"):
            cells[key] = self.nonlin.get(level, {}).get(key, "")
        cells["dilution_k"] = self.dilution.get(level, "")
        cells["gsc_corr"] = self.gsc_corr.get(level, "")
        return cells


def gsc_curve(net, x, y=None):
    """Forward, backward, and the full metric report on one batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("metrics need at least 2 datapoints")
    trace = forward(net, x, y)
    backward(net, trace)
    spec = net.spec
    L = spec.bottom_index
    kinds = {l: spec.layers[l].kind.value for l in range(0, L + 1)}
    kinds[L + 1] = "input"
    report = GscReport(kinds=kinds, gsc=gsc_values(net, trace))
    stats = preactivation_stats(net, trace)
    for l, entry in stats.items():
        entry = dict(entry)
        entry["lin_err"] = linear_approx_error(net, trace, l)
        report.nonlin[l] = entry
    if spec.blocks:
        k, corrected = dilution_report(net, trace, gsc=report.gsc)
        report.dilution = k
        report.gsc_corr = corrected
    return report


def report_to_csv(report, path):
    levels = sorted(report.kinds)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(CSV_COLUMNS))
        writer.writeheader()
        for level in levels:
            writer.writerow(report.row(level))


def report_to_json(report, path):
    levels = sorted(report.kinds)
    payload = [report.row(level) for level in levels]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def highest_nonlin(spec):
    """Index of the topmost nonlinearity layer."""
    idx = spec.nonlin_indices()
    if not idx:
        raise ValueError("no nonlinearity layers")
    return min(idx)


class RunningStats:
    """Exponential running averages of the training-time metrics.

    Tracks the squared quantities behind GSC(l,0) for requested levels and
    the per-neuron moments behind pre-activation std / sign diversity for
    requested nonlinearity layers. Averages are bias-corrected so the first
    batch already yields usable values.
    """

    def __init__(self, levels=(), nonlin_layers=(), decay=0.99):
        self.decay = decay
        self.levels = tuple(levels)
        self.nonlin_layers = tuple(nonlin_layers)
        self.steps = 0
        self._ema = {}
        self._dims = {}

    def _fold(self, key, value):
        if key not in self._ema:
            self._ema[key] = np.zeros_like(np.asarray(value, dtype=np.float64))
        self._ema[key] = self.decay * self._ema[key] + (1.0 - self.decay) * value

    def _get(self, key):
        corr = 1.0 - self.decay**self.steps
        return self._ema[key] / corr

    def update(self, trace):
        self.steps += 1
        self._fold("err2", np.mean(trace.error**2))
        for level in self.levels:
            g = trace.grads[level]
            f = trace.acts[level]
            self._dims[level] = f.shape[1]
            self._fold(("g2", level), np.mean(np.sum(g * g, axis=1)))
            self._fold(("f2", level), np.mean(np.sum(f * f, axis=1)))
        for l in self.nonlin_layers:
            pre = trace.acts[l + 1]
            self._fold(("e1", l), pre.mean(axis=0))
            self._fold(("e2", l), np.mean(pre * pre, axis=0))
            self._fold(("pos", l), np.mean(pre > 0.0, axis=0))
            self._fold(("neg", l), np.mean(pre < 0.0, axis=0))

    def gsc(self, level):
        g2 = self._get(("g2", level))
        f2 = self._get(("f2", level))
        e2 = self._get("err2")
        return float(np.sqrt(g2 / self._dims[level]) * np.sqrt(f2) / np.sqrt(e2))

    def pre_std(self, l):
        var = np.maximum(self._get(("e2", l)) - self._get(("e1", l)) ** 2, 0.0)
        return float(np.sqrt(np.mean(var)))

    def pre_qexp(self, l):
        return float(np.sqrt(np.mean(self._get(("e2", l)))))

    def sign_diversity(self, l):
        return float(np.mean(np.minimum(self._get(("pos", l)), self._get(("neg", l)))))
