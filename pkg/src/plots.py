"""
plaincnn Curve Plots
Static accuracy/loss curves from a metrics CSV.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from errors import FormatError  # noqa: E402
from train import CSV_COLUMNS  # noqa: E402


def read_metrics(path):
    """Load a metrics CSV written by write_metrics_csv."""
    frame = pd.read_csv(path)
    if list(frame.columns) != CSV_COLUMNS:
        raise FormatError(f"{path}: header {list(frame.columns)} is not {CSV_COLUMNS}")
    return frame


def plot_metrics(csv_path, out_path, baseline=None):
    """
    Two panels, accuracy and loss, train vs validation, with the best
    validation epoch marked. Returns the best epoch (None for an empty file).
    """
    frame = read_metrics(csv_path)
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(12, 4.5))

    best_epoch = None
    if len(frame):
        best = frame.loc[frame["val_acc"].idxmax()]
        best_epoch = int(best["epoch"])

    ax_acc.plot(frame["epoch"], frame["train_acc"], label="train", color="#1f77b4")
    ax_acc.plot(frame["epoch"], frame["val_acc"], label="validation", color="#d62728")
    if baseline is not None:
        ax_acc.axhline(baseline, color="gray", linestyle="--", linewidth=1, label=f"baseline {baseline:g}")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")

    ax_loss.plot(frame["epoch"], frame["train_loss"], label="train", color="#1f77b4")
    ax_loss.plot(frame["epoch"], frame["val_loss"], label="validation", color="#d62728")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")

    if best_epoch is not None:
        for ax in (ax_acc, ax_loss):
            ax.axvline(best_epoch, color="green", linestyle=":", linewidth=1)
        ax_acc.set_title(f"best val_acc {best['val_acc']:.4f} at epoch {best_epoch}")
    for ax in (ax_acc, ax_loss):
        ax.grid(alpha=0.3)
        ax.legend()

    fig.tight_layout()
    fig.savefig(out_path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return best_epoch
