"""
plaincnn Training Module
Plain SGD, evaluation, the baseline-gated early-stopping controller,
the epoch loop, and the metrics CSV / checkpoint file formats.

Early stopping only arms once validation accuracy has reached a preset
baseline; from then on a patience counter on the best epoch decides.
The parameters returned are always the best-validation snapshot.
"""

import csv
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from augment import augment_batch
from data import ordered_batches, shuffled_batches
from errors import (
    ConsistencyError,
    FormatError,
    NumericError,
    ShapeMismatchError,
    TrainingDiverged,
    TruncatedFileError,
)
from nn import (
    ArchitectureSpec,
    copy_parameters,
    init_parameters,
    model_backward,
    model_forward,
    parameter_shapes,
    softmax_cross_entropy,
    softmax_cross_entropy_backward,
)
from tensor import DROPOUT_STREAM, INIT_STREAM, TRAIN_DTYPE, check_finite, substream


CHECKPOINT_MAGIC = b"PCNN"
CHECKPOINT_VERSION = 1
CSV_COLUMNS = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "seconds"]

CONTINUE = "continue"
STOP = "stop"

# Per-preset training defaults. Baselines are tuning knobs.
TRAIN_PRESETS = {
    "mnist": {"batch_size": 256, "baseline_acc": 0.995},
    "cifar10": {"batch_size": 128, "baseline_acc": 0.94},
    "cifar100": {"batch_size": 128, "baseline_acc": 0.72},
    "svhn": {"batch_size": 128, "baseline_acc": 0.98},
    "stl10": {"batch_size": 8, "baseline_acc": 0.87},
}


# =============================================================================
# CONFIG / STATE
# =============================================================================

@dataclass(frozen=True)
class EarlyStopConfig:
    baseline_acc: float = 0.995
    patience: int = 100
    min_epochs: int = 0

    def __post_init__(self):
        if not 0.0 <= self.baseline_acc <= 1.0:
            raise ValueError(f"baseline_acc must be in [0, 1], got {self.baseline_acc}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.min_epochs < 0:
            raise ValueError(f"min_epochs must be >= 0, got {self.min_epochs}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 256
    max_epochs: int = 2500
    seed: int = 0
    val_fraction: float = 0.1
    early_stop: EarlyStopConfig = field(default_factory=EarlyStopConfig)
    workers: int = 0
    timing: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ValueError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if not 0 < self.val_fraction < 1:
            raise ValueError(f"val_fraction must be in (0, 1), got {self.val_fraction}")


@dataclass(frozen=True)
class EarlyStopState:
    baseline_passed: bool = False
    best_val_acc: float = -1.0
    best_epoch: int = 0
    epochs_since_best: int = 0
    epoch: int = 0


@dataclass
class History:
    records: list = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    stop_reason: str = ""
    test_acc: float = None
    test_loss: float = None
    failure: dict = None

    def best_record(self):
        if not self.records:
            return None
        return max(self.records, key=lambda r: (r["val_acc"], -r["epoch"]))


# =============================================================================
# OPTIMIZER / EVALUATION / STOPPING
# =============================================================================

def sgd_step(params, grads, lr):
    """In place: w <- w - lr * g for every parameter tensor."""
    for i, p in params.items():
        if i not in grads:
            raise ShapeMismatchError(f"sgd_step: no gradient for layer {i}")
        for key, w in p.items():
            g = grads[i][key]
            if g.shape != w.shape:
                raise ShapeMismatchError(
                    f"sgd_step: layer {i} {key} gradient {list(g.shape)} != parameter {list(w.shape)}"
                )
            check_finite(g, f"gradient of layer {i} {key}")
            w -= w.dtype.type(lr) * g
    return params


def evaluate(spec, params, ds, batch_size):
    """Eval-mode pass over ds in order. Returns (mean loss, accuracy)."""
    if len(ds) == 0:
        return 0.0, 0.0
    total_loss = 0.0
    correct = 0
    for batch in ordered_batches(ds, batch_size):
        logits, _ = model_forward(spec, params, batch.images, training=False)
        loss, _ = softmax_cross_entropy(logits, batch.labels)
        total_loss += loss * len(batch.labels)
        # argmax ties go to the lowest class index
        correct += int((logits.argmax(axis=1) == batch.labels).sum())
    return total_loss / len(ds), correct / len(ds)


def early_stop_update(state, config, epoch, val_acc):
    """
    Feed one epoch's validation accuracy. Returns (new_state, CONTINUE|STOP).

    Stop iff epoch >= min_epochs, the baseline has been reached at least
    once, and `patience` epochs have passed without a strict improvement.
    """
    if epoch != state.epoch + 1:
        raise ValueError(f"early_stop_update: epoch {epoch} does not follow {state.epoch}")
    best_val_acc, best_epoch = state.best_val_acc, state.best_epoch
    if val_acc > best_val_acc:
        best_val_acc, best_epoch = val_acc, epoch
    passed = state.baseline_passed or val_acc >= config.baseline_acc
    new = replace(
        state,
        baseline_passed=passed,
        best_val_acc=best_val_acc,
        best_epoch=best_epoch,
        epochs_since_best=epoch - best_epoch,
        epoch=epoch,
    )
    stop = epoch >= config.min_epochs and passed and new.epochs_since_best >= config.patience
    return new, STOP if stop else CONTINUE


# =============================================================================
# TRAINING LOOP
# =============================================================================

def train(config, spec, train_ds, val_ds, augment_config, verbose=True):
    """
    Train with SGD until early stopping fires or max_epochs is reached.
    Returns (best_params, History).

    Per epoch: shuffle, augment each batch, forward/backward/step, then
    evaluate on the validation set and update the stopping controller.
    """
    for ds in (train_ds, val_ds):
        if ds.sample_shape != spec.input_shape:
            raise ShapeMismatchError(
                f"{ds.name} samples are {list(ds.sample_shape)}, {spec.name} expects {list(spec.input_shape)}"
            )
    if config.batch_size > len(train_ds):
        raise ValueError(f"batch_size {config.batch_size} exceeds training set size {len(train_ds)}")

    params = init_parameters(spec, substream(config.seed, stream=INIT_STREAM))
    best_params = copy_parameters(params)
    history = History()
    state = EarlyStopState()
    lr = config.learning_rate

    if verbose:
        print(f"Training {spec.name}: {len(train_ds):,} train / {len(val_ds):,} val, "
              f"batch {config.batch_size}, lr {lr}, up to {config.max_epochs} epochs")

    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        seen = 0
        loss_sum = 0.0
        correct = 0

        for b, batch in enumerate(shuffled_batches(train_ds, config.batch_size, config.seed, epoch)):
            images = augment_batch(batch.images, batch.indices, augment_config, config.seed, epoch, config.workers)
            rng = substream(config.seed, epoch, b, stream=DROPOUT_STREAM)
            n = len(batch.labels)
            loss = float("nan")
            try:
                logits, cache = model_forward(spec, params, images, training=True, rng=rng)
                loss, probs = softmax_cross_entropy(logits, batch.labels)
                if not np.isfinite(loss):
                    raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
                grads = model_backward(spec, params, cache, softmax_cross_entropy_backward(probs, batch.labels, n))
                sgd_step(params, grads, lr)
            except NumericError as e:
                history.failure = {"epoch": epoch, "batch": b, "loss": loss}
                raise TrainingDiverged(f"epoch {epoch}, batch {b}: {e}", history=history, epoch=epoch, batch=b) from e

            seen += n
            loss_sum += loss * n
            correct += int((logits.argmax(axis=1) == batch.labels).sum())

        val_loss, val_acc = evaluate(spec, params, val_ds, config.batch_size)
        record = {
            "epoch": epoch,
            "train_loss": loss_sum / seen,
            "train_acc": correct / seen,
            "val_loss": val_loss,
            "val_acc": val_acc,
            "wall_seconds": time.perf_counter() - started,
        }
        history.records.append(record)

        improved = val_acc > state.best_val_acc
        state, decision = early_stop_update(state, config.early_stop, epoch, val_acc)
        if improved:
            best_params = copy_parameters(params)

        if verbose:
            flag = "  [best]" if improved else ""
            print(f"Epoch {epoch}/{config.max_epochs}  loss {record['train_loss']:.4f}  "
                  f"acc {record['train_acc']:.4f}  val_loss {val_loss:.4f}  val_acc {val_acc:.4f}{flag}")

        if decision == STOP:
            history.stop_reason = "early_stop"
            break
    else:
        history.stop_reason = "max_epochs" if history.records else "no_epochs"

    history.stopped_epoch = len(history.records)
    history.best_epoch = state.best_epoch

    if verbose and history.records:
        best = history.best_record()
        print(f"\n{'=' * 60}")
        print(f"  Stopped after epoch {history.stopped_epoch} ({history.stop_reason})")
        print(f"  Best val_acc {best['val_acc']:.4f} at epoch {best['epoch']}")
        print(f"{'=' * 60}")
    return best_params, history


# =============================================================================
# FILE FORMATS
# =============================================================================

def write_metrics_csv(history, path, timing=False):
    """
    One row per epoch under the header
    epoch,train_loss,train_acc,val_loss,val_acc,seconds.
    With timing=False the seconds column is 0.0 so files compare byte-for-byte.
    """
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in history.records:
            seconds = r["wall_seconds"] if timing else 0.0
            writer.writerow([
                r["epoch"], repr(float(r["train_loss"])), repr(float(r["train_acc"])),
                repr(float(r["val_loss"])), repr(float(r["val_acc"])), repr(float(seconds)),
            ])
    return path


def _ordered_tensors(params):
    for i in sorted(params):
        yield params[i]["w"]
        yield params[i]["b"]


def save_checkpoint(spec, params, path):
    """
    Little-endian layout:
      b"PCNN" | u32 version | u32 len | spec text (UTF-8) | u32 tensor count |
      per tensor: u32 ndim, ndim x u32 extents, f32 payload
    Tensors follow layer order, weights before bias.
    """
    text = spec.to_text().encode("utf-8")
    tensors = list(_ordered_tensors(params))
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(text)))
        f.write(text)
        f.write(struct.pack("<I", len(tensors)))
        for t in tensors:
            f.write(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
            f.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return path


def load_checkpoint(path):
    """Return (spec, params) from a checkpoint written by save_checkpoint."""
    with open(path, "rb") as f:
        raw = f.read()
    reader = _Reader(raw, path)
    magic = reader.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version, text_len = reader.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    text = reader.take(text_len)
    try:
        spec = ArchitectureSpec.from_text(text.decode("utf-8"))
    except ValueError as e:
        # Undecodable bytes or a text describing no valid network.
        raise FormatError(f"{path}: bad architecture text ({e})") from e

    shapes = parameter_shapes(spec)
    expected = [(i, key) for i in sorted(shapes) for key in ("w", "b")]
    (count,) = reader.unpack("<I")
    if count != len(expected):
        raise ConsistencyError(f"{path}: {count} tensors stored, {spec.name} needs {len(expected)}")

    params = {}
    for i, key in expected:
        (ndim,) = reader.unpack("<I")
        shape = reader.unpack(f"<{ndim}I")
        if tuple(shape) != tuple(shapes[i][key]):
            raise ConsistencyError(
                f"{path}: layer {i} {key} stored as {list(shape)}, spec needs {list(shapes[i][key])}"
            )
        size = int(np.prod(shape)) * 4
        data = np.frombuffer(reader.take(size), dtype="<f4").reshape(shape).astype(TRAIN_DTYPE)
        params.setdefault(i, {})[key] = data
    if reader.offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - reader.offset} trailing bytes after offset {reader.offset}")
    return spec, params


class _Reader:
    """Cursor over checkpoint bytes that reports truncation with its offset."""

    def __init__(self, raw, path):
        self.raw = raw
        self.path = path
        self.offset = 0

    def take(self, size):
        end = self.offset + size
        if end > len(self.raw):
            raise TruncatedFileError(self.path, len(self.raw), end - len(self.raw))
        chunk = self.raw[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))
