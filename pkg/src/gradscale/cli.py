"""Command-line surface: initialization analysis, the weight-disc color
map, training wrappers, and the verification suite.

Every command is reproducible from its flags and config file; CSV, JSON
and PPM outputs rewrite identical bytes on a rerun. Exit codes: 0 on
success, 2 on validation errors, 3 on numeric failure.
"""

import csv
import json
import math
from pathlib import Path

import click
import numpy as np

from . import theory
from .data import gaussian_noise_dataset, load_cifar10_binary
from .effdepth import EffDepthLedger, write_depth_curve
from .init import gaussian_fan_in, init_network
from .linalg import Rng
from .metrics import gsc_values, highest_nonlin, preactivation_stats
from .network import backward, forward, resnet_architecture, vanilla_architecture
from .taylor import error_vs_depth_curve, write_depth_error_csv
from .train import TrainConfig, TrainingDiverged, parse_config, sgd_train, write_train_log

_NONLINS = ("relu", "tanh", "selu", "leaky-relu")
_NORMS = ("layer", "batch")


class _NumericFailure(click.ClickException):
    exit_code = 3


# ---------------------------------------------------------------------------
# architecture tokens


def _split_token(token):
    norm = None
    rest = token
    for prefix in _NORMS:
        if token.startswith(prefix + "-"):
            norm = prefix
            rest = token[len(prefix) + 1 :]
            break
    if rest not in _NONLINS:
        raise ValueError(f"unknown architecture token {token!r}")
    return norm, rest.replace("-", "_")


def parse_arch(token, width=100, depth=50, skip="identity", input_dim=None,
               label_dim=None, error="dot"):
    """Architecture from a command-line token.

    Vanilla tokens are [norm-]nonlin (relu, layer-tanh, batch-relu, ...).
    "resnet-" prefixes the 25-block residual net with two linear layers per
    block, "dyn-" the 50-block single-linear ladder used for the
    dynamical-systems initializations; both need a normalization part.
    """
    input_dim = input_dim or width
    label_dim = label_dim or width
    if token.startswith("resnet-") or token.startswith("dyn-"):
        prefix, _, rest = token.partition("-")
        norm, nonlin = _split_token(rest)
        if norm is None:
            raise ValueError(f"{prefix} tokens need a normalization part, got {token!r}")
        blocks, per_block = (25, 2) if prefix == "resnet" else (50, 1)
        return resnet_architecture(
            nonlin, norm, n_blocks=blocks, linears_per_block=per_block,
            width=width, input_dim=input_dim, label_dim=label_dim,
            error=error, skip_kind=skip,
            last_width=None if label_dim == width else label_dim,
        )
    norm, nonlin = _split_token(token)
    return vanilla_architecture(
        nonlin, norm=norm, depth=depth, width=width,
        input_dim=input_dim, label_dim=label_dim, error=error,
        last_width=None if label_dim == width else label_dim,
    )


def _init_overrides(token, spec):
    """The dynamical-systems ladders pin the head and embedding linear
    layers to Gaussian regardless of the block scheme."""
    if not token.startswith("dyn-"):
        return None
    lins = spec.linear_indices()
    return {lins[0]: "gaussian", lins[-1]: "gaussian"}


# ---------------------------------------------------------------------------
# initialization analysis


_ANALYZE_COLUMNS = (
    "arch", "init", "skip", "width", "depth", "datasets", "points",
    "gsc", "log10_gsc", "sign_div", "pre_std",
)


def analyze_architecture(arch, init="gaussian", skip="identity", width=100,
                         depth=50, datasets=10, points=1000, seed=0):
    """Initialization-state metrics over fresh Gaussian-noise datasets.

    Draws a new network and dataset per round, measures the GSC between
    input and error level plus sign diversity and pre-activation std at
    the highest nonlinearity layer, and averages over the rounds.
    """
    spec = parse_arch(arch, width=width, depth=depth, skip=skip)
    overrides = _init_overrides(arch, spec)
    rng = Rng(seed, ("analyze", arch, init, skip))
    dims = spec.dims()
    top = spec.bottom_index + 1
    probe = highest_nonlin(spec)
    gsc = 0.0
    sign_div = 0.0
    pre_std = 0.0
    for d in range(datasets):
        net = init_network(spec, init, rng.split("net", d), overrides=overrides)
        ds = gaussian_noise_dataset(
            points, dim_in=dims[top], dim_label=dims[1], rng=rng.split("data", d)
        )
        tr = forward(net, ds.inputs, ds.labels)
        backward(net, tr, keep_grads=(top,), param_grads=False)
        gsc += gsc_values(net, tr, levels=(top,))[top]
        stats = preactivation_stats(net, tr)[probe]
        sign_div += stats["sign_div"]
        pre_std += stats["pre_std"]
    gsc /= datasets
    return {
        "arch": arch, "init": init, "skip": skip, "width": width, "depth": depth,
        "datasets": datasets, "points": points, "gsc": gsc,
        "log10_gsc": math.log10(gsc), "sign_div": sign_div / datasets,
        "pre_std": pre_std / datasets,
    }


def write_analysis_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_ANALYZE_COLUMNS)
        for row in rows:
            out = []
            for col in _ANALYZE_COLUMNS:
                v = row[col]
                out.append(v if isinstance(v, (str, int)) else repr(float(v)))
            writer.writerow(out)


# ---------------------------------------------------------------------------
# weight-disc color map


_DISC_CENTER = np.full(3, math.sqrt(3.0) / 3.0)
_DISC_E1 = np.array([1.0, -1.0, 0.0]) / math.sqrt(2.0)
_DISC_E2 = np.cross(_DISC_CENTER, _DISC_E1)


def azimuthal_point(u, v):
    """Inverse azimuthal equidistant projection about (1,1,1)/sqrt(3).

    The planar radius is arc length on the unit sphere, so the full sphere
    maps to the disc of radius pi. Returns None outside that disc.
    """
    rho = math.hypot(u, v)
    if rho > math.pi:
        return None
    if rho == 0.0:
        return _DISC_CENTER.copy()
    d = (u / rho) * _DISC_E1 + (v / rho) * _DISC_E2
    return math.cos(rho) * _DISC_CENTER + math.sin(rho) * d


def colormap_image(net, layer, bases, x_row, resolution):
    """Render the weight-disc color map as a (resolution, resolution, 3)
    uint8 array.

    Each pixel maps to coefficients (a, b, c) on the weight sphere; the
    target layer's matrix is replaced by a*B1 + b*B2 + c*B3 and the
    normalized 3-dim prediction colors the pixel with
    channel = round(255 * (o + 1) / 2). Off-disc pixels stay black.
    """
    if resolution < 1:
        raise ValueError("resolution must be positive")
    if layer not in net.spec.linear_indices():
        raise ValueError(f"layer {layer} is not a linear layer of this net")
    if net.spec.dims()[1] != 3:
        raise ValueError("the color map needs a 3-dim prediction")
    b1, b2, b3 = bases
    work = net.copy()
    work.residual[layer] = np.zeros_like(work.residual[layer])
    y_dummy = np.zeros((1, 3))
    y_dummy[0, 0] = 1.0
    img = np.zeros((resolution, resolution, 3), dtype=np.uint8)
    for i in range(resolution):
        v = (2.0 * (i + 0.5) / resolution - 1.0) * math.pi
        for j in range(resolution):
            u = (2.0 * (j + 0.5) / resolution - 1.0) * math.pi
            p = azimuthal_point(u, v)
            if p is None:
                continue
            work.initial[layer] = p[0] * b1 + p[1] * b2 + p[2] * b3
            tr = forward(work, x_row, y_dummy)
            o = tr.acts[1][0]
            norm = np.linalg.norm(o)
            if norm == 0.0 or not np.isfinite(norm):
                continue
            o = o / norm
            img[i, j] = np.round(255.0 * (o + 1.0) / 2.0).astype(np.uint8)
    return img


def write_ppm(path, img, comment="azimuthal equidistant projection"):
    """Binary P6 with the projection recorded in a header comment."""
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n# {comment}\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


# ---------------------------------------------------------------------------
# training plumbing shared by train/taylor commands


_NET_KEYS = ("arch", "width", "depth", "init", "skip", "seed", "points",
             "data", "label_dim", "error")


def _build_net_and_data(raw):
    """Network and (x, labels) from the net/data keys of a config mapping.

    Consumes the keys it understands and leaves the rest (the training
    schedule) in `raw`.
    """
    arch = raw.pop("arch", None)
    if arch is None:
        raise ValueError("config needs an arch token")
    width = int(raw.pop("width", 100))
    depth = int(raw.pop("depth", 50))
    init = raw.pop("init", "gaussian")
    skip = raw.pop("skip", "identity")
    seed = int(raw.pop("seed", 0))
    points = raw.pop("points", None)
    data_path = raw.pop("data", None)
    error = raw.pop("error", "dot")
    label_dim = raw.pop("label_dim", None)
    if data_path is not None:
        subset = int(points) if points is not None else None
        ds = load_cifar10_binary(data_path, subset_size=subset)
        x = ds.inputs
        label_dim = int(label_dim or 10)
        if error == "xent":
            y = ds.labels
        else:
            y = np.zeros((ds.n, label_dim))
            y[np.arange(ds.n), ds.labels] = 1.0
        input_dim = x.shape[1]
    else:
        n = int(points) if points is not None else 1000
        label_dim = int(label_dim or width)
        ds = gaussian_noise_dataset(
            n, dim_in=width, dim_label=label_dim, rng=Rng(seed, ("cli-data", arch))
        )
        x, y = ds.inputs, ds.labels
        input_dim = width
    spec = parse_arch(arch, width=width, depth=depth, skip=skip,
                      input_dim=input_dim, label_dim=label_dim, error=error)
    net = init_network(
        spec, init, Rng(seed, ("cli-net", arch)), overrides=_init_overrides(arch, spec)
    )
    return net, x, y


def _train_config(raw):
    """TrainConfig from the remaining config keys (same step-size syntax as
    the train module's file reader)."""
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


def save_snapshot(net, epochs_done, path):
    """Weights and epoch counter; float64 arrays round-trip bit-exactly."""
    arrays = {"epochs": np.array([epochs_done], dtype=np.int64)}
    for l, w in net.initial.items():
        arrays[f"initial_{l}"] = w
    for l, w in net.residual.items():
        arrays[f"residual_{l}"] = w
    for t, s in net.skips.items():
        if s is not None:
            arrays[f"skip_{t}"] = s
    np.savez(path, **arrays)


def load_snapshot(net, path):
    with np.load(path) as z:
        for l in net.initial:
            net.initial[l] = z[f"initial_{l}"].copy()
        for l in net.residual:
            net.residual[l] = z[f"residual_{l}"].copy()
        for t, s in net.skips.items():
            if s is not None:
                net.skips[t] = z[f"skip_{t}"].copy()
        return int(z["epochs"][0])


# ---------------------------------------------------------------------------
# commands


@click.group()
def cli():
    """Gradient scale analysis for deep MLPs."""


@cli.command()
@click.option("--arch", "archs", multiple=True, required=True, help="Token, repeatable.")
@click.option("--init", default="gaussian", show_default=True)
@click.option("--skip", default="identity", show_default=True)
@click.option("--width", default=100, show_default=True)
@click.option("--depth", default=50, show_default=True)
@click.option("--datasets", default=10, show_default=True)
@click.option("--points", default=1000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default="analysis.csv", show_default=True, type=click.Path())
def analyze(archs, init, skip, width, depth, datasets, points, seed, out):
    """Initialization-state metrics table over Gaussian-noise datasets."""
    try:
        rows = [
            analyze_architecture(a, init=init, skip=skip, width=width, depth=depth,
                                 datasets=datasets, points=points, seed=seed)
            for a in archs
        ]
    except ValueError as e:
        raise click.UsageError(str(e))
    write_analysis_csv(out, rows)
    click.echo(f"wrote {out}")


@cli.command()
@click.option("--arch", default="batch-relu", show_default=True)
@click.option("--width", default=100, show_default=True)
@click.option("--depth", default=50, show_default=True)
@click.option("--layer", required=True, type=int, help="Linear layer to replace.")
@click.option("--resolution", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--data", required=True, type=click.Path(exists=True), help="CIFAR binary file.")
@click.option("--index", default=0, show_default=True, help="Record index for the input.")
@click.option("--out", default="disc.ppm", show_default=True, type=click.Path())
def colormap(arch, width, depth, layer, resolution, seed, data, index, out):
    """Color-map disc over a weight sphere at one layer."""
    try:
        ds = load_cifar10_binary(data, subset_size=index + 1)
        x_row = ds.inputs[index : index + 1]
        spec = parse_arch(arch, width=width, depth=depth,
                          input_dim=x_row.shape[1], label_dim=3)
        rng = Rng(seed, ("colormap", arch))
        net = init_network(spec, "gaussian", rng.split("net"))
        dims = spec.dims()
        if layer not in spec.linear_indices():
            raise ValueError(f"layer {layer} is not a linear layer of {arch!r}")
        shape = (dims[layer], dims[layer + 1])
        bases = [gaussian_fan_in(*shape, rng.split("basis", t)) for t in range(3)]
        img = colormap_image(net, layer, bases, x_row, resolution)
    except ValueError as e:
        raise click.UsageError(str(e))
    write_ppm(out, img)
    click.echo(f"wrote {out}")


@cli.command()
@click.option("--config", required=True, type=click.Path(exists=True))
@click.option("--out", default="run", show_default=True, type=click.Path())
@click.option("--resume", default=None, type=click.Path(exists=True),
              help="Snapshot to restore before training.")
def train(config, out, resume):
    """SGD training run; writes log CSV, depth ledger, and a snapshot."""
    try:
        raw = parse_config(config)
        net, x, y = _build_net_and_data(raw)
        tcfg = _train_config(raw)
    except (ValueError, TypeError) as e:
        raise click.UsageError(str(e))
    epochs_done = 0
    if resume is not None:
        epochs_done = load_snapshot(net, resume)
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    ledger = EffDepthLedger(net)
    depth_rows = []
    try:
        log = sgd_train(net, (x, y), tcfg, ledger=ledger, depth_curve=depth_rows)
    except TrainingDiverged as e:
        raise _NumericFailure(str(e))
    write_train_log(outdir / "train_log.csv", log, net.spec.linear_indices())
    ledger.to_json(outdir / "ledger.json")
    write_depth_curve(outdir / "depth_curve.csv", depth_rows)
    save_snapshot(net, epochs_done + log.epochs_run, outdir / "snapshot.npz")
    click.echo(f"wrote {outdir}")


@cli.command()
@click.option("--log", "logdir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--out", default=None, type=click.Path())
def effdepth(logdir, out):
    """Lambda-vs-layer contribution CSV from a training run's ledger."""
    src = Path(logdir) / "ledger.json"
    if not src.exists():
        raise click.UsageError(f"no ledger.json under {logdir}")
    payload = json.loads(src.read_text())
    out = out or str(Path(logdir) / "lambda_curve.csv")
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "lambda", "cumulative_contribution",
                         "normalized_contribution"])
        for row in payload["contributions"]:
            writer.writerow([
                row["layer"], row["lambda"],
                repr(float(row["cumulative_contribution"])),
                repr(float(row["normalized_contribution"])),
            ])
    click.echo(f"wrote {out}")


@cli.command()
@click.option("--config", required=True, type=click.Path(exists=True))
@click.option("--resume", default=None, type=click.Path(exists=True))
@click.option("--out", default="taylor.csv", show_default=True, type=click.Path())
def taylor(config, resume, out):
    """Error of depth-truncated linearizations on one batch."""
    try:
        raw = parse_config(config)
        net, x, y = _build_net_and_data(raw)
        if raw:
            raise ValueError(f"unexpected config keys {sorted(raw)}")
    except ValueError as e:
        raise click.UsageError(str(e))
    if resume is not None:
        load_snapshot(net, resume)
    try:
        rows = error_vs_depth_curve(net, x, y)
    except FloatingPointError as e:
        raise _NumericFailure(str(e))
    write_depth_error_csv(out, rows)
    click.echo(f"wrote {out}")


@cli.command("verify-theory")
@click.option("--check", "checks", multiple=True, default=("all",),
              show_default=True, help="Check name or 'all'; repeatable.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default=None, type=click.Path(), help="Write JSON lines here instead of stdout.")
def verify_theory(checks, seed, out):
    """Run verification checks; one JSON object per check."""
    if "all" in checks:
        results = theory.standard_checks(seed=seed)
    else:
        unknown = [c for c in checks if c not in theory.CHECK_BUILDERS]
        if unknown:
            raise click.UsageError(
                f"unknown checks {unknown}; choose from {sorted(theory.CHECK_BUILDERS)}"
            )
        results = [theory.CHECK_BUILDERS[c](seed) for c in checks]
    text = "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in results)
    if out is not None:
        Path(out).write_text(text)
    else:
        click.echo(text, nl=False)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise _NumericFailure(f"checks failed: {', '.join(failed)}")


main = cli


if __name__ == "__main__":
    main()
