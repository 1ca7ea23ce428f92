"""
plaincnn Command Line
Ties presets, datasets, augmentation and training together.

Usage:
    ./plaincnn train --config configs/mnist.json [--override train.max_epochs=1] [--out DIR] [--seed N]
    ./plaincnn eval --checkpoint runs/mnist/best.ckpt --config configs/mnist.json [--split test|val]
    ./plaincnn preview-augment --config configs/mnist.json -n 16 --out previews/
    ./plaincnn params cifar10 [--override model.fc_width=2048]
    ./plaincnn gradcheck [conv|pool|...|all]
    ./plaincnn plot runs/mnist/metrics.csv --out curves.png [--baseline 0.995]

Exit codes: 0 ok, 1 gradcheck failure, 2 config error, 3 data/format
error, 4 numeric failure. Every failure writes exactly one line
`plaincnn: error: <kind>: <message>` to stderr.
"""

import functools
import json
import os
import sys
import time

import click
import numpy as np
from PIL import Image

sys.path.insert(0, os.path.dirname(__file__))

from augment import random_augment  # noqa: E402
from data import split_train_val  # noqa: E402
from errors import (  # noqa: E402
    ConfigError,
    ConsistencyError,
    FormatError,
    InvalidParameterError,
    InvalidShapeError,
    NumericError,
    ShapeMismatchError,
    TrainingDiverged,
)
from nn import PUBLISHED_PARAM_COUNTS, count_parameters, parameter_table  # noqa: E402
from runconfig import (  # noqa: E402
    build_augment,
    build_spec,
    build_train,
    load_datasets,
    load_run_config,
    resolve_config,
)
from tensor import AUGMENT_STREAM, substream  # noqa: E402
from train import (  # noqa: E402
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
    write_metrics_csv,
)


EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def classify_error(exc):
    """(exit code, kind) for an exception, or None when it is not an expected failure."""
    if isinstance(exc, (ConfigError, InvalidParameterError)):
        return EXIT_CONFIG, "config"
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC, "numeric"
    if isinstance(exc, (FormatError, ConsistencyError, ShapeMismatchError, InvalidShapeError, OSError)):
        return EXIT_DATA, "data"
    if isinstance(exc, ValueError):
        return EXIT_CONFIG, "config"
    return None


def fail(kind, message, code):
    text = " ".join(str(message).split())
    click.echo(f"plaincnn: error: {kind}: {text}", err=True)
    sys.exit(code)


def handle_errors(fn):
    """Turn expected library exceptions into the one-line diagnostic and exit code."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except Exception as e:
            classified = classify_error(e)
            if classified is None:
                raise
            code, kind = classified
            fail(kind, e, code)
    return wrapper


def _overrides(override, seed=None, out=None):
    items = list(override)
    if seed is not None:
        items.append(f"train.seed={seed}")
    if out is not None:
        items.append(f"output.directory={json.dumps(os.path.abspath(out))}")
    return items


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


@click.group()
def cli():
    """plaincnn: train and verify plain convolutional networks."""


# =============================================================================
# TRAIN
# =============================================================================

@cli.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False), help="Run config JSON")
@click.option("--override", multiple=True, help="section.key=value (repeatable)")
@click.option("--out", default=None, help="Output directory (shorthand for output.directory)")
@click.option("--seed", type=int, default=None, help="Seed (shorthand for train.seed)")
@click.option("--quiet", is_flag=True, help="No per-epoch progress")
@handle_errors
def cmd_train(config_path, override, out, seed, quiet):
    """Train a preset; write metrics.csv, best.ckpt and summary.json."""
    verbose = not quiet
    cfg = load_run_config(config_path, _overrides(override, seed, out))
    spec = build_spec(cfg)
    augment_config = build_augment(cfg)
    train_config = build_train(cfg)
    out_dir = cfg["output"]["directory"]

    train_full, test = load_datasets(cfg, verbose=verbose)
    train_ds, val_ds = split_train_val(train_full, train_config.val_fraction, train_config.seed)
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")

    started = time.perf_counter()
    try:
        best_params, history = train(train_config, spec, train_ds, val_ds, augment_config, verbose=verbose)
    except TrainingDiverged as e:
        if e.history is not None:
            write_metrics_csv(e.history, metrics_path, timing=train_config.timing)
        raise
    wall = time.perf_counter() - started

    write_metrics_csv(history, metrics_path, timing=train_config.timing)
    save_checkpoint(spec, best_params, os.path.join(out_dir, "best.ckpt"))

    test_loss, test_acc = evaluate(spec, best_params, test, train_config.batch_size)
    history.test_loss, history.test_acc = test_loss, test_acc

    best = history.best_record()
    last = history.records[-1] if history.records else None
    summary = {
        "dataset": cfg["dataset"]["name"],
        "preset": spec.name,
        "param_count": count_parameters(spec),
        "seed": train_config.seed,
        "stopped_epoch": history.stopped_epoch,
        "stop_reason": history.stop_reason,
        "best_epoch": best["epoch"] if best else None,
        "best_val_acc": best["val_acc"] if best else None,
        "best_val_loss": best["val_loss"] if best else None,
        "final_train_acc": last["train_acc"] if last else None,
        "final_val_acc": last["val_acc"] if last else None,
        "test_loss": test_loss,
        "test_acc": test_acc,
        "wall_seconds": wall,
        "config": cfg,
    }
    _write_json(os.path.join(out_dir, "summary.json"), summary)

    if verbose:
        print(f"\nTest accuracy {test_acc:.4f} (loss {test_loss:.4f})")
        print(f"Wrote metrics.csv, best.ckpt, summary.json to {out_dir}")


# =============================================================================
# EVAL
# =============================================================================

@cli.command("eval")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(dir_okay=False))
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False), help="Dataset source")
@click.option("--override", multiple=True, help="section.key=value (repeatable)")
@click.option("--split", type=click.Choice(["test", "val"]), default="test", show_default=True)
@click.option("--seed", type=int, default=None, help="Seed of the validation split")
@handle_errors
def cmd_eval(checkpoint_path, config_path, override, split, seed):
    """Print loss and accuracy of a checkpoint as one JSON line."""
    cfg = load_run_config(config_path, _overrides(override, seed))
    train_config = build_train(cfg)
    spec, params = load_checkpoint(checkpoint_path)

    train_full, test = load_datasets(cfg)
    if split == "val":
        _, ds = split_train_val(train_full, train_config.val_fraction, train_config.seed)
    else:
        ds = test
    if ds.sample_shape != spec.input_shape or ds.classes != spec.output_classes:
        raise ShapeMismatchError(
            f"checkpoint {spec.name} expects {list(spec.input_shape)} with {spec.output_classes} classes, "
            f"{ds.name} has {list(ds.sample_shape)} with {ds.classes}"
        )
    loss, acc = evaluate(spec, params, ds, train_config.batch_size)
    click.echo(json.dumps({"accuracy": acc, "loss": loss, "n": len(ds), "split": split}, sort_keys=True))


# =============================================================================
# PREVIEW AUGMENTATION
# =============================================================================

def _to_pixels(img, factor):
    """[c,h,w] rescaled floats -> uint8 [h,w] or [h,w,c]."""
    pixels = np.clip(np.rint(img / factor), 0, 255).astype(np.uint8)
    return pixels[0] if pixels.shape[0] == 1 else np.ascontiguousarray(pixels.transpose(1, 2, 0))


@cli.command("preview-augment")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("-n", "count", type=click.IntRange(min=0), default=16, show_default=True)
@click.option("--out", "out_dir", required=True, help="Directory for the images and index.txt")
@click.option("--override", multiple=True, help="section.key=value (repeatable)")
@click.option("--seed", type=int, default=None)
@handle_errors
def cmd_preview_augment(config_path, count, out_dir, override, seed):
    """Write n augmented training samples (PGM/PPM) and the parameters drawn for each."""
    cfg = load_run_config(config_path, _overrides(override, seed))
    augment_config = build_augment(cfg)
    train_config = build_train(cfg)
    train_full, _ = load_datasets(cfg)
    os.makedirs(out_dir, exist_ok=True)

    count = min(count, len(train_full))
    lines = []
    for k in range(count):
        rng = substream(train_config.seed, 0, k, stream=AUGMENT_STREAM)
        img, label, drawn = random_augment(
            train_full.images[k], int(train_full.labels[k]), augment_config, rng, return_params=True
        )
        ext = "pgm" if img.shape[0] == 1 else "ppm"
        filename = f"sample_{k:04d}.{ext}"
        Image.fromarray(_to_pixels(img, augment_config.rescale)).save(os.path.join(out_dir, filename), format="PPM")
        params = " ".join(f"{key}={drawn[key]!r}" for key in sorted(drawn))
        lines.append(f"{filename} label={label} {params}")

    with open(os.path.join(out_dir, "index.txt"), "w", encoding="utf-8", newline="\n") as f:
        f.write("".join(line + "\n" for line in lines))
    print(f"Wrote {count} preview(s) to {out_dir}")


# =============================================================================
# PARAMS
# =============================================================================

@cli.command("params")
@click.argument("preset")
@click.option("--override", multiple=True, help="model.key=value (repeatable)")
@handle_errors
def cmd_params(preset, override):
    """Print the layer table and total parameter count of a preset."""
    cfg = resolve_config({"dataset": {"name": preset}}, override)
    spec = build_spec(cfg)
    table = parameter_table(spec)
    total = count_parameters(spec)

    print(f"{'=' * 60}")
    print(f"  {spec.name}: input {'x'.join(map(str, spec.input_shape))}, {spec.output_classes} classes")
    print(f"{'=' * 60}")
    print(table.to_string(index=False))
    print(f"\nTotal parameters: {total:,}")
    if preset in PUBLISHED_PARAM_COUNTS:
        relation, published = PUBLISHED_PARAM_COUNTS[preset]
        shown = f"{'>' if relation == '>' else ''}{published:,}"
        print(f"Published figure: {shown} (delta {total - published:+,})")


# =============================================================================
# GRADCHECK / PLOT
# =============================================================================

@cli.command("gradcheck")
@click.argument("scope", default="all")
@click.option("--perturb", default=None, hidden=True)
@click.option("--seed", type=int, default=0, show_default=True)
@handle_errors
def cmd_gradcheck(scope, perturb, seed):
    """Finite-difference and oracle checks in float64; exit 1 if any fails."""
    from gradcheck import run_checks

    results = run_checks(scope, perturb=perturb, seed=seed)
    print(results.to_string(index=False, formatters={"max_rel_error": "{:.3e}".format}))
    failed = results.loc[~results["passed"], "check"].tolist()
    if failed:
        fail("gradcheck", f"failed: {', '.join(failed)}", EXIT_CHECK_FAILED)


@cli.command("plot")
@click.argument("metrics_csv", type=click.Path(dir_okay=False))
@click.option("--out", "out_path", required=True, help="PNG to write")
@click.option("--baseline", type=float, default=None, help="Draw the early-stopping baseline")
@handle_errors
def cmd_plot(metrics_csv, out_path, baseline):
    """Render accuracy and loss curves from metrics.csv."""
    from plots import plot_metrics

    best_epoch = plot_metrics(metrics_csv, out_path, baseline=baseline)
    print(f"Wrote {out_path}" + (f" (best epoch {best_epoch})" if best_epoch is not None else ""))


def main():
    cli(prog_name="plaincnn")


if __name__ == "__main__":
    main()
