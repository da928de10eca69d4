"""SGD training with per-layer step sizes and the staged step-size search.

Training updates only the residual matrices; the initialization stays frozen
so that update magnitudes and depth accounting always refer to the distance
from the starting point. Step sizes decay jointly by a fixed factor whenever
the end-of-epoch error stalls. The five-stage search (pre-training, per-layer
selection with rewind, optional clipped search, log-linear smoothing, joint
scaling) reproduces the custom step-size protocol; a 21-point grid handles
the single-step-size variant.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .effdepth import EffDepthLedger
from .metrics import RunningStats, highest_nonlin
from .network import LayerKind, backward, forward


class TrainingDiverged(RuntimeError):
    """Raised when the training error stops being finite."""


@dataclass
class TrainConfig:
    step_sizes: dict | float
    batch_size: int
    max_epochs: int = 500
    decay_factor: float = 1.0 / 3.0
    patience_epochs: int = 5
    max_decays: int = 11
    rel_update_cap: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be positive")
        if not 0.0 < self.decay_factor < 1.0:
            raise ValueError("decay_factor must lie in (0, 1)")
        if self.patience_epochs < 1 or self.max_decays < 0:
            raise ValueError("bad schedule bounds")
        if self.rel_update_cap <= 0.0:
            raise ValueError("rel_update_cap must be positive")
        sizes = self.step_sizes
        values = sizes.values() if isinstance(sizes, dict) else [sizes]
        if any(s < 0 for s in values):
            raise ValueError("step sizes must be nonnegative")

    def steps_for(self, linear_indices):
        if isinstance(self.step_sizes, dict):
            unknown = set(self.step_sizes) - set(linear_indices)
            if unknown:
                raise ValueError(f"step sizes given for non-linear layers {sorted(unknown)}")
            return {l: float(self.step_sizes.get(l, 0.0)) for l in linear_indices}
        return {l: float(self.step_sizes) for l in linear_indices}


def _coerce(text):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_config(path):
    """Read key=value lines; # starts a comment, blank lines are skipped."""
    out = {}
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key=value, got {raw.strip()!r}")
            key, _, value = line.partition("=")
            out[key.strip()] = _coerce(value.strip())
    return out


_CONFIG_KEYS = (
    "step_size", "step_sizes", "batch_size", "max_epochs", "decay_factor",
    "patience_epochs", "max_decays", "rel_update_cap",
)


def config_from_file(path):
    raw = parse_config(path)
    unknown = set(raw) - set(_CONFIG_KEYS)
    if unknown:
        raise ValueError(f"unknown config keys {sorted(unknown)}")
    kwargs = dict(raw)
    if "step_sizes" in kwargs:
        pairs = {}
        for item in str(kwargs.pop("step_sizes")).split(","):
            layer, _, size = item.partition(":")
            pairs[int(layer)] = float(size)
        kwargs["step_sizes"] = pairs
    elif "step_size" in kwargs:
        kwargs["step_sizes"] = float(kwargs.pop("step_size"))
    else:
        raise ValueError("config needs step_size or step_sizes")
    return TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# evaluation helpers


def _batch_slices(n, batch_size):
    """Fixed-order batch bounds; a trailing single point joins the last batch."""
    bounds = list(range(0, n, batch_size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]
    return list(zip(bounds[:-1], bounds[1:]))


def dataset_error(net, x, labels, batch_size):
    """Classification error for class-labelled nets, mean error otherwise."""
    is_xent = net.spec.layers[0].kind == LayerKind.XENT_ERROR
    wrong = 0.0
    total = 0.0
    for lo, hi in _batch_slices(x.shape[0], batch_size):
        trace = forward(net, x[lo:hi], labels[lo:hi])
        if is_xent:
            picked = np.argmax(trace.acts[1], axis=1)
            wrong += float(np.sum(picked != trace.labels))
        else:
            wrong += float(np.sum(trace.acts[0]))
        total += hi - lo
    return wrong / total


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    step_sizes: dict = field(default_factory=dict)
    decays: int = 0
    epochs_run: int = 0
    best_error: float = np.inf
    stats: RunningStats | None = None
    ledger: EffDepthLedger | None = None
    ledger_skips: int = 0
    max_rel_updates: dict = field(default_factory=dict)  # layer -> max over run


def sgd_train(net, data, config, *, trainable=None, track_stats=True,
              ledger=None, depth_curve=None):
    """Train residual matrices in place and return the per-epoch log.

    data is (x, labels). Batches are consecutive dataset slices in fixed
    order, so runs are bit-reproducible. When the end-of-epoch error has not
    improved for patience_epochs epochs, all step sizes decay jointly by
    decay_factor; training stops at max_epochs or when max_decays decays have
    been applied. A non-finite error aborts with the epoch and batch in the
    message. ledger, when given, accumulates depth contributions every batch;
    batches whose gradient dies at some level are counted in ledger_skips.
    depth_curve, when given with a ledger, receives one
    (epoch, depth, raw_depth) row per epoch.
    """
    x, labels = data
    spec = net.spec
    lins = list(spec.linear_indices())
    base_steps = config.steps_for(lins)
    if trainable is not None:
        trainable = set(trainable)
        base_steps = {l: (s if l in trainable else 0.0)
                      for l, s in base_steps.items()}
    steps = dict(base_steps)
    log = TrainLog(step_sizes=dict(steps), ledger=ledger)
    L = spec.bottom_index
    stats = None
    top_nonlin = None
    if track_stats and spec.has_error and spec.nonlin_indices():
        top_nonlin = highest_nonlin(spec)
        stats = RunningStats([L + 1], [top_nonlin])
        log.stats = stats
    slices = _batch_slices(x.shape[0], config.batch_size)
    best = np.inf
    stall = 0
    for epoch in range(1, config.max_epochs + 1):
        epoch_rel = {l: 0.0 for l in lins}
        for bi, (lo, hi) in enumerate(slices):
            trace = forward(net, x[lo:hi], labels[lo:hi])
            if not np.all(np.isfinite(trace.acts[0])):
                raise TrainingDiverged(
                    f"non-finite error at epoch {epoch}, batch {bi}"
                )
            backward(net, trace)
            if stats is not None:
                stats.update(trace)
            if ledger is not None:
                try:
                    ledger.accumulate(net, trace, steps)
                except ValueError:
                    log.ledger_skips += 1
            for l in lins:
                if steps[l] == 0.0:
                    continue
                delta = steps[l] * trace.param_grads[l]
                w_norm = np.linalg.norm(net.weight(l))
                if w_norm > 0.0:
                    rel = np.linalg.norm(delta) / w_norm
                    if rel > epoch_rel[l]:
                        epoch_rel[l] = rel
                net.residual[l] -= delta
        err = dataset_error(net, x, labels, config.batch_size)
        if not np.isfinite(err):
            raise TrainingDiverged(f"non-finite error at epoch {epoch}, batch -1")
        row = {"epoch": epoch, "error": err, "rel_update": dict(epoch_rel)}
        if stats is not None:
            row["gsc_top"] = stats.gsc(L + 1)
            row["pre_std_top"] = stats.pre_std(top_nonlin)
            row["sign_div_top"] = stats.sign_diversity(top_nonlin)
        log.rows.append(row)
        if depth_curve is not None and ledger is not None:
            depth_curve.append(
                (epoch, ledger.effective_depth(),
                 ledger.effective_depth(normalized=False))
            )
        log.epochs_run = epoch
        for l in lins:
            if epoch_rel[l] > log.max_rel_updates.get(l, 0.0):
                log.max_rel_updates[l] = epoch_rel[l]
        if err < best:
            best = err
            stall = 0
        else:
            stall += 1
            if stall >= config.patience_epochs:
                if log.decays >= config.max_decays:
                    break
                log.decays += 1
                steps = {l: s * config.decay_factor**log.decays
                         for l, s in base_steps.items()}
                stall = 0
                if log.decays >= config.max_decays:
                    break
    log.best_error = best
    log.step_sizes = steps
    return log


TRAIN_LOG_COLUMNS = ("epoch", "error", "gsc_top", "pre_std_top", "sign_div_top")


def write_train_log(path, log, linear_indices):
    lins = sorted(linear_indices)
    header = list(TRAIN_LOG_COLUMNS) + [f"rel_update_{l}" for l in lins]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in log.rows:
            out = [row["epoch"], repr(float(row["error"]))]
            for key in TRAIN_LOG_COLUMNS[2:]:
                out.append("" if key not in row else repr(float(row[key])))
            out.extend(repr(float(row["rel_update"].get(l, 0.0))) for l in lins)
            writer.writerow(out)


# ---------------------------------------------------------------------------
# five-stage step size search


@dataclass
class StepSizeSelection:
    pretrain_step: float
    pretrain_epochs: int
    reached_target: bool
    selected: dict
    clipped: dict
    rel_updates: dict  # max rel update of the adopted per-layer choice
    smoothed: dict
    scale: float
    final: dict
    slope: float
    intercept: float


def _snapshot(net):
    return {l: r.copy() for l, r in net.residual.items()}


def _restore(net, snap):
    for l, r in snap.items():
        net.residual[l][:] = r


def _one_epoch(net, x, labels, batch_size, steps, cap):
    """One epoch of SGD; returns (max rel update, cap violated?).

    The epoch finishes even when the cap trips, so the caller can rewind a
    consistent state either way.
    """
    lins = [l for l, s in steps.items() if s > 0.0]
    worst = 0.0
    for lo, hi in _batch_slices(x.shape[0], batch_size):
        trace = forward(net, x[lo:hi], labels[lo:hi])
        if not np.all(np.isfinite(trace.acts[0])):
            return np.inf, True
        backward(net, trace)
        for l in lins:
            delta = steps[l] * trace.param_grads[l]
            w_norm = np.linalg.norm(net.weight(l))
            if w_norm > 0.0:
                worst = max(worst, np.linalg.norm(delta) / w_norm)
            net.residual[l] -= delta
    return worst, worst >= cap


def _first_batch_rel(net, x, labels, batch_size, layers, step):
    """Largest relative update the step would cause on the first batch."""
    lo, hi = _batch_slices(x.shape[0], batch_size)[0]
    trace = forward(net, x[lo:hi], labels[lo:hi])
    backward(net, trace)
    worst = 0.0
    for l in layers:
        w_norm = np.linalg.norm(net.weight(l))
        if w_norm > 0.0:
            worst = max(worst, step * np.linalg.norm(trace.param_grads[l]) / w_norm)
    return worst


def pretrain_layer_set(spec, arch_class):
    """Linear layers trained in the pre-training stage.

    arch_class: "exploding" (a few highest layers), "uniform" (everything but
    the outermost two), or "resnet" (second lowest through third highest).
    """
    lins = sorted(spec.linear_indices())
    if arch_class == "exploding":
        chosen = lins[1:6]
    elif arch_class == "uniform":
        chosen = lins[1:-1]
    elif arch_class == "resnet":
        chosen = lins[2:-1]
    else:
        raise ValueError(f"unknown architecture class {arch_class!r}")
    if not chosen:
        raise ValueError("network too small for this pre-training layer set")
    return chosen


def _pretrain(net, x, labels, batch_size, layers, cap, target_error, max_epochs):
    """Grid search (spacing 3) for the fastest step to the target error.

    Candidates span seven grid points below the largest step whose first
    batch respects the cap; a candidate that later violates the cap on any
    batch is discarded. Fastest to the target wins, ties broken by lower
    error. Returns (step, epochs used, reached flag) and leaves the net
    trained with the winner.
    """
    probe = 100.0
    while probe > 1e-12 and _first_batch_rel(
        net, x, labels, batch_size, layers, probe
    ) > cap:
        probe /= 3.0
    candidates = [probe / 3.0**j for j in range(7)]
    best = None  # (epochs, final error, step, snapshot)
    start = _snapshot(net)
    for s in candidates:
        _restore(net, start)
        steps = {l: (s if l in layers else 0.0) for l in net.spec.linear_indices()}
        reached = None
        violated = False
        err = np.inf
        for epoch in range(1, max_epochs + 1):
            _, tripped = _one_epoch(net, x, labels, batch_size, steps, cap)
            if tripped:
                violated = True
                break
            err = dataset_error(net, x, labels, batch_size)
            if err <= target_error:
                reached = epoch
                break
        if violated:
            continue
        key = (reached if reached is not None else max_epochs + 1, err, s)
        if best is None or key < best[0]:
            best = (key, s, _snapshot(net))
    if best is None:
        _restore(net, start)
        raise ValueError("no pre-training step size respects the update cap")
    (epochs_key, err, _), step, snap = best
    _restore(net, snap)
    reached = epochs_key <= max_epochs
    return step, min(epochs_key, max_epochs), reached


def _grid_best(errors, clip_margin):
    """Best index of an ascending candidate walk, plain and clipped.

    errors is the list in grid order. Ties go to the earlier (smaller)
    candidate. The clipped walk stops once a candidate exceeds the running
    best by clip_margin.
    """
    best = 0
    for i, e in enumerate(errors):
        if e < errors[best]:
            best = i
    clipped = 0
    for i, e in enumerate(errors):
        if e >= errors[clipped] + clip_margin and i > 0:
            break
        if e < errors[clipped]:
            clipped = i
    return best, clipped


GRID_SPACING = 1.5
GRID_LOW = 1e-6
GRID_HIGH = 1e2
CLIP_MARGIN = 1e-3


def _layer_grid(unit):
    lo = int(np.ceil(np.log(GRID_LOW) / np.log(GRID_SPACING)))
    hi = int(np.floor(np.log(GRID_HIGH) / np.log(GRID_SPACING)))
    return [unit * GRID_SPACING**k for k in range(lo, hi + 1)]


def select_step_sizes(net, data, batch_size, arch_class, *,
                      target_error=0.85, cap=0.1, use_clipping=False,
                      clip_scaling=False, pretrain_cap=None,
                      max_pretrain_epochs=10):
    """Run the five-stage per-layer step size search.

    The net is pre-trained in place; every later stage trains one epoch and
    rewinds, so the returned step sizes apply to the net as left behind.
    pretrain_cap defaults to 0.01 for the exploding class and 0.001 otherwise.
    """
    x, labels = data
    spec = net.spec
    lins = sorted(spec.linear_indices())
    if pretrain_cap is None:
        pretrain_cap = 0.01 if arch_class == "exploding" else 0.001
    pre_layers = pretrain_layer_set(spec, arch_class)
    pre_step, pre_epochs, reached = _pretrain(
        net, x, labels, batch_size, pre_layers, pretrain_cap,
        target_error, max_pretrain_epochs,
    )

    # selection: one epoch per candidate per layer, rewound every time
    snap = _snapshot(net)
    selected = {}
    clipped = {}
    sel_rel = {}
    clip_rel = {}
    for l in lins:
        lo, hi = _batch_slices(x.shape[0], batch_size)[0]
        trace = forward(net, x[lo:hi], labels[lo:hi])
        backward(net, trace)
        g_norm = np.linalg.norm(trace.param_grads[l])
        w_norm = np.linalg.norm(net.weight(l))
        unit = w_norm / g_norm if g_norm > 0.0 else 1.0
        errors = []
        rels = []
        sizes = []
        for s in _layer_grid(unit):
            steps = {k: (s if k == l else 0.0) for k in lins}
            worst, tripped = _one_epoch(net, x, labels, batch_size, steps, cap)
            err = np.inf if tripped else dataset_error(net, x, labels, batch_size)
            _restore(net, snap)
            if tripped:
                break
            errors.append(err)
            rels.append(worst)
            sizes.append(s)
        if not sizes:
            raise ValueError(f"layer {l}: every grid step violates the update cap")
        b, c = _grid_best(errors, CLIP_MARGIN)
        selected[l] = sizes[b]
        clipped[l] = sizes[c]
        sel_rel[l] = rels[b]
        clip_rel[l] = rels[c]

    adopted = clipped if use_clipping else selected
    rel_updates = clip_rel if use_clipping else sel_rel

    # smoothing: least-squares line through (layer rank, log max rel update)
    xs = np.arange(1, len(lins) + 1, dtype=float)
    ys = np.array([rel_updates[l] for l in lins])
    mask = ys > 0.0
    if mask.sum() >= 2:
        slope, intercept = np.polyfit(xs[mask], np.log(ys[mask]), 1)
        fitted = np.exp(intercept + slope * xs)
    else:
        slope, intercept = 0.0, 0.0
        fitted = ys.copy()
    smoothed = {}
    for i, l in enumerate(lins):
        ratio = fitted[i] / ys[i] if ys[i] > 0.0 else 1.0
        smoothed[l] = adopted[l] * ratio

    # scaling: joint constant, same ascending walk as selection
    errors = []
    consts = []
    c = 1e-3
    while c <= 1e3:
        steps = {l: smoothed[l] * c for l in lins}
        _, tripped = _one_epoch(net, x, labels, batch_size, steps, cap)
        err = np.inf if tripped else dataset_error(net, x, labels, batch_size)
        _restore(net, snap)
        if tripped:
            break
        errors.append(err)
        consts.append(c)
        c *= GRID_SPACING
    if not consts:
        raise ValueError("every joint scale violates the update cap")
    b, cidx = _grid_best(errors, CLIP_MARGIN)
    scale = consts[cidx] if clip_scaling else consts[b]

    return StepSizeSelection(
        pretrain_step=pre_step,
        pretrain_epochs=pre_epochs,
        reached_target=reached,
        selected=selected,
        clipped=clipped,
        rel_updates=rel_updates,
        smoothed=smoothed,
        scale=scale,
        final={l: smoothed[l] * scale for l in lins},
        slope=float(slope),
        intercept=float(intercept),
    )


# ---------------------------------------------------------------------------
# single step size protocol


def single_step_grid():
    sizes = [float(f"1e{e}") for e in range(5, -6, -1)]
    sizes += [float(f"3e{e}") for e in range(4, -6, -1)]
    return sorted(sizes)


def single_step_size_search(net, data, batch_size, *, max_epochs=500,
                            **config_kwargs):
    """Train a copy per grid step size, keep the best final error.

    Returns (best step, its TrainLog, {step: final error}). Diverged runs
    score infinity. Ties go to the smaller step size.
    """
    results = {}
    best = None
    for s in single_step_grid():
        candidate = net.copy()
        config = TrainConfig(step_sizes=s, batch_size=batch_size,
                             max_epochs=max_epochs, **config_kwargs)
        try:
            log = sgd_train(candidate, data, config, track_stats=False)
            err = log.rows[-1]["error"]
        except TrainingDiverged:
            log = None
            err = np.inf
        results[s] = err
        if best is None or err < best[1]:
            best = (s, err, log)
    return best[0], best[2], results


# ---------------------------------------------------------------------------
# batch statistics noise probe


def minibatch_bn_probe(net, data, batch_sizes):
    """Relative error-layer noise from estimating batch statistics on
    size-b subsamples instead of the full dataset.

    Returns rows (b, relative noise). Points beyond the last complete
    subsample of a given size are left out of that row's comparison.
    """
    spec = net.spec
    if not any(lay.kind == LayerKind.BATCH_NORM for lay in spec.layers):
        raise ValueError("noise probe needs a batch normalization layer")
    x, labels = data
    n = x.shape[0]
    full = forward(net, x, labels).acts[0][:, 0]
    rows = []
    for b in batch_sizes:
        if not 2 <= b <= n:
            raise ValueError(f"subsample size {b} out of range")
        groups = n // b
        parts = []
        for g in range(groups):
            lo, hi = g * b, (g + 1) * b
            parts.append(forward(net, x[lo:hi], labels[lo:hi]).acts[0][:, 0])
        got = np.concatenate(parts)
        ref = full[: groups * b]
        rows.append((b, float(np.linalg.norm(got - ref) / np.linalg.norm(ref))))
    return rows
