"""Expansion of a network's bottom layers around the initialization path.

Everything below a chosen level is replaced by the initialization-path
activation plus residual deviations carried upward through the initial
Jacobians. Per-layer correction terms keep products of at most two residual
matrices, so the replaced region contributes compositional depth two no
matter how many layers it spans. Evaluating the untouched top of the network
on that value then measures how much of the trained behaviour survives the
depth reduction.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .network import (
    EvalTrace,
    LayerKind,
    _layer_forward,
    _layer_jvp,
    forward,
)

TAYLOR_CSV_COLUMNS = (
    "level",
    "compositional_depth",
    "depth_formula",
    "mean_error",
    "classification_error",
)


@dataclass
class TaylorEval:
    """Evaluation of the expanded network at one split level."""

    level: int
    expansion: np.ndarray  # value fed to the untouched top part, (n, d_level)
    predictions: np.ndarray
    error: np.ndarray  # per-point error, (n,)
    mean_error: float
    classification_error: float | None
    compositional_depth: int
    depth_formula: int


def expansion_levels(spec):
    """Levels the network can be split at: skip spans cannot be cut."""
    L = spec.bottom_index
    return [
        lv
        for lv in range(1, L + 1)
        if not any(b.top < lv < b.bottom for b in spec.blocks)
    ]


def _depth_metadata(spec, level):
    lin = spec.linear_indices()
    above = sum(1 for i in lin if i < level)
    total = len(lin)
    return above + min(2, total - above), max(above + 1, total)


class TaylorExpansion:
    """Initialization path and propagated deviations, cached for one batch.

    The walk runs once from the input to the top; evaluating several split
    levels on the same batch reuses it.
    """

    def __init__(self, net, x, y=None):
        spec = net.spec
        spec.validate()
        if not spec.has_error:
            raise ValueError("expansion evaluation needs an error layer")
        self.net = net
        self.inet = net.zero_residual_copy()
        self.y = y
        self.itrace = forward(self.inet, x, y)
        self._walk()

    def _walk(self):
        """Carry first-order deviations and the correction sum to each level.

        acc[l] collects residual images propagated along initial Jacobians
        only; dev[l] additionally routes acc through each residual matrix it
        passes, which is what keeps the pairwise products.
        """
        net = self.net
        spec = net.spec
        L = spec.bottom_index
        zero = np.zeros_like(self.itrace.acts[L + 1])
        acc = {L + 1: zero}
        dev = {L + 1: zero}
        for j in range(L, 0, -1):
            a = _layer_jvp(self.inet, self.itrace, j, acc[j + 1])
            d = _layer_jvp(self.inet, self.itrace, j, dev[j + 1])
            if spec.layers[j].kind == LayerKind.LINEAR:
                in_s, p_s, out_s = net.layer_scales(j)
                c = in_s * p_s * out_s
                r = net.residual[j]
                base = self.itrace.acts[j + 1]
                a = a + c * (base @ r.T)
                d = d + c * ((base + acc[j + 1]) @ r.T)
            blk = spec.block_at_top(j)
            if blk is not None:
                s = net.skips.get(blk.top)
                a = a + (acc[blk.bottom] if s is None else acc[blk.bottom] @ s.T)
                d = d + (dev[blk.bottom] if s is None else dev[blk.bottom] @ s.T)
            acc[j] = a
            dev[j] = d
        self._dev = dev

    def value(self, level):
        """Expanded activation batch at the given level."""
        self._check_level(level)
        return self.itrace.acts[level] + self._dev[level]

    def _check_level(self, level):
        spec = self.net.spec
        if not 1 <= level <= spec.bottom_index:
            raise ValueError(f"split level {level} out of range")
        for b in spec.blocks:
            if b.top < level < b.bottom:
                raise ValueError(
                    f"split level {level} sits inside a skip block; "
                    f"allowed levels are {expansion_levels(spec)}"
                )

    def evaluate(self, level):
        """Run the untouched layers above the split on the expanded value."""
        net = self.net
        spec = net.spec
        t_act = self.value(level)
        trace = EvalTrace(t_act.shape[0])
        y = self.y
        if spec.layers[0].kind == LayerKind.XENT_ERROR:
            trace.labels = np.asarray(y)
        else:
            y = np.asarray(y, dtype=np.float64)
        trace.acts[level] = t_act
        for l in range(level - 1, -1, -1):
            out = _layer_forward(net, trace, l, y)
            blk = spec.block_at_top(l)
            if blk is not None:
                skip_in = trace.acts[blk.bottom]
                s = net.skips.get(blk.top)
                out = out + (skip_in if s is None else skip_in @ s.T)
            trace.acts[l] = out
        predictions = trace.acts[1]
        class_err = None
        if trace.labels is not None:
            picked = np.argmax(predictions, axis=1)
            class_err = float(np.mean(picked != trace.labels))
        comp_depth, formula = _depth_metadata(spec, level)
        return TaylorEval(
            level=level,
            expansion=t_act,
            predictions=predictions,
            error=trace.acts[0][:, 0],
            mean_error=float(np.mean(trace.acts[0])),
            classification_error=class_err,
            compositional_depth=comp_depth,
            depth_formula=formula,
        )


def taylor_eval(net, level, x, y=None):
    """Expand the network below the level and evaluate the result."""
    return TaylorExpansion(net, x, y).evaluate(level)


def error_vs_depth_curve(net, x, y=None, levels=None):
    """Evaluate every split level on one batch, deepest expansion last.

    Returns TaylorEval rows ordered by decreasing compositional depth, i.e.
    from the unmodified bottom split down to replacing everything.
    """
    expansion = TaylorExpansion(net, x, y)
    if levels is None:
        levels = expansion_levels(net.spec)
    return [expansion.evaluate(lv) for lv in sorted(levels, reverse=True)]


def write_depth_error_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TAYLOR_CSV_COLUMNS)
        for r in rows:
            writer.writerow(
                [
                    r.level,
                    r.compositional_depth,
                    r.depth_formula,
                    repr(r.mean_error),
                    "" if r.classification_error is None else repr(r.classification_error),
                ]
            )
