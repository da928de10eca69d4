"""Effective depth accounting.

Training updates decompose into gradient terms by how many residual-matrix
Jacobians they contain. The per-update estimator walks the layers from the
error down to the queried layer, maintaining one running bound per residual
count: crossing a layer multiplies every slot by the observed per-point
gradient growth ratio and shifts mass up one slot weighted by the layer's
residual operator norm. Skip connections bound the joint effect of the skip
and the chain's initial path by the whole-block growth minus the chain-only
growth. The estimate is conservative by construction (all terms assumed
aligned), so accumulated slot sums upper-bound the true contribution of
high-order terms; effective depth is the largest residual count whose
accumulated bound still exceeds a threshold, plus one.
"""

import csv
import json

import numpy as np

from . import _kernels as K
from .linalg import OperatorNormTracker, qm_norm
from .network import LayerKind


def residual_opnorms(net, trackers=None):
    """Operator norm of each linear layer's residual map, scales included."""
    out = {}
    for l in net.spec.linear_indices():
        r = net.residual[l]
        if not r.any():
            out[l] = 0.0
            continue
        in_s, p_s, out_s = net.layer_scales(l)
        scale = abs(in_s * p_s * out_s)
        if trackers is not None:
            sigma = trackers[l](r)
        else:
            from .linalg import operator_norm

            sigma, _ = operator_norm(r)
        out[l] = scale * sigma
    return out


def _grad_norms(trace, upto):
    norms = [np.linalg.norm(trace.grads[k], axis=1) for k in range(upto + 1)]
    for k in range(upto):
        if np.any(norms[k] == 0.0):
            raise ValueError(f"zero gradient norm at level {k}")
    return norms


def _walk_tails(net, trace, layer, r_ops, use_blocks):
    """Per-point tail sums of the slot array after walking layers 0..layer-1.

    Returns (tails, clamped) where tails[p, lam] bounds the lam-or-more
    residual-term mass for query point p and clamped counts the block
    corrections that went negative and were floored at zero.
    """
    spec = net.spec
    norms = _grad_norms(trace, layer)
    n = trace.grads[0].shape[0]
    arr = np.zeros((n, layer + 1))
    arr[:, 0] = 1.0
    width = 1
    clamped = 0
    block_at_top = {}
    if use_blocks:
        block_at_top = {b.top: b for b in spec.blocks if b.bottom <= layer}
    k = 0
    while k < layer:
        blk = block_at_top.get(k)
        if blk is None:
            ratio = np.ascontiguousarray(norms[k + 1] / norms[k])
            K.depth_step(arr, width, ratio, r_ops.get(k, 0.0))
            width += 1
            k += 1
            continue
        top, m = blk.top, blk.bottom
        saved = arr[:, :width].copy()
        chain_m = np.linalg.norm(trace.block_chain_grad_in[top], axis=1)
        for kk in range(top, m):
            numer = chain_m if kk + 1 == m else norms[kk + 1]
            ratio = np.ascontiguousarray(numer / norms[kk])
            K.depth_step(arr, width, ratio, r_ops.get(kk, 0.0))
            width += 1
        corr = (norms[m] - chain_m) / norms[top]
        clamped += int(np.sum(corr < 0.0))
        np.maximum(corr, 0.0, out=corr)
        arr[:, : saved.shape[1]] += saved * corr[:, None]
        k = m
    tails = np.cumsum(arr[:, ::-1], axis=1)[:, ::-1]
    return tails, clamped


def lambda_contribution_estimate(
    net, trace, layer, step_size, r_ops=None, use_blocks=None
):
    """Upper bound on this batch's update mass at `layer`, per residual count.

    step_size scales the mean-over-batch gradient, so each query point
    enters with weight step_size / batch. Returns (array over lambda,
    number of clamped block corrections).
    """
    if net.spec.layers[layer].kind != LayerKind.LINEAR:
        raise ValueError(f"layer {layer} carries no parameters")
    if r_ops is None:
        r_ops = residual_opnorms(net)
    if use_blocks is None:
        use_blocks = bool(net.spec.blocks)
    tails, clamped = _walk_tails(net, trace, layer, r_ops, use_blocks)
    f_in = np.linalg.norm(trace.acts[layer + 1], axis=1)
    n = f_in.shape[0]
    contrib = (step_size / n) * (tails * f_in[:, None]).sum(axis=0)
    return contrib, clamped


def lambda_contribution_resnet(net, trace, layer, step_size, r_ops=None):
    """Block-aware variant; identical to the plain estimate on block-free nets."""
    return lambda_contribution_estimate(
        net, trace, layer, step_size, r_ops=r_ops, use_blocks=True
    )


class EffDepthLedger:
    """Accumulates per-layer contribution bounds across training updates.

    Thresholding uses contributions divided by the qm norm of the layer's
    initial matrix (captured at construction; initial matrices do not move
    during training), so the threshold is scale-free. Raw sums are kept and
    serialized alongside.
    """

    def __init__(self, net, h=1e-6):
        self.h = h
        self.updates_seen = 0
        self.clamp_events = 0
        self.layers = tuple(net.spec.linear_indices())
        self.contributions = {l: np.zeros(1) for l in self.layers}
        self.initial_qm = {l: qm_norm(net.initial[l]) for l in self.layers}
        self._trackers = {l: OperatorNormTracker() for l in self.layers}

    def accumulate(self, net, trace, step_sizes):
        """Fold one update's estimates in. step_sizes: scalar or {layer: step}.

        Estimates for every layer are computed before any is folded, so a
        failure (a dead gradient somewhere in the walk) leaves the ledger
        untouched.
        """
        r_ops = residual_opnorms(net, trackers=self._trackers)
        fresh = []
        for l in self.layers:
            step = step_sizes[l] if isinstance(step_sizes, dict) else step_sizes
            fresh.append(
                lambda_contribution_estimate(net, trace, l, step, r_ops=r_ops)
            )
        for l, (contrib, clamped) in zip(self.layers, fresh):
            self.clamp_events += clamped
            have = self.contributions[l]
            if have.shape[0] < contrib.shape[0]:
                have = np.concatenate([have, np.zeros(contrib.shape[0] - have.shape[0])])
            have[: contrib.shape[0]] += contrib
            self.contributions[l] = have
        self.updates_seen += 1

    def layer_contributions(self, layer, normalized=True):
        raw = self.contributions[layer]
        if not normalized:
            return raw.copy()
        return raw / self.initial_qm[layer]

    def effective_depth(self, h=None, normalized=True):
        h = self.h if h is None else h
        best = 0
        for l in self.layers:
            values = self.layer_contributions(l, normalized=normalized)
            above = np.nonzero(values > h)[0]
            if above.size:
                best = max(best, int(above[-1]))
        return best + 1

    def to_json(self, path):
        rows = []
        for l in self.layers:
            raw = self.contributions[l]
            rel = raw / self.initial_qm[l]
            for lam in range(raw.shape[0]):
                rows.append(
                    {
                        "layer": l,
                        "lambda": lam,
                        "cumulative_contribution": raw[lam],
                        "normalized_contribution": rel[lam],
                    }
                )
        payload = {
            "updates_seen": self.updates_seen,
            "threshold": self.h,
            "clamp_events": self.clamp_events,
            "contributions": rows,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")


def effective_depth(ledger, h=None, normalized=True):
    return ledger.effective_depth(h=h, normalized=normalized)


def write_depth_curve(path, rows):
    """CSV of effective depth over training: (epoch, depth, depth_raw) rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "effective_depth", "effective_depth_raw"])
        for row in rows:
            writer.writerow(list(row))
