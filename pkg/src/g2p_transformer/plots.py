"""Figures written next to the JSON reports."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "savefig.dpi": 150,
}


def plot_training_curves(records, path):
    """Train loss and validation PER/WER against epoch."""
    epochs = [r["epoch"] for r in records]
    evald = [r for r in records if "val_per" in r]
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_err) = plt.subplots(1, 2, figsize=(8, 3))
        ax_loss.plot(epochs, [r["train_loss"] for r in records], color="k", lw=1)
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("train cross-entropy")
        ax_err.plot([r["epoch"] for r in evald], [r["val_per"] for r in evald], label="PER")
        ax_err.plot([r["epoch"] for r in evald], [r["val_wer"] for r in evald], label="WER")
        ax_err.set_xlabel("epoch")
        ax_err.set_ylabel("validation error (%)")
        ax_err.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_error_breakdown(report, path):
    """Words by number of phoneme errors, and edit operation totals."""
    with plt.rc_context(STYLE):
        fig, (ax_h, ax_o) = plt.subplots(1, 2, figsize=(7, 2.8))
        buckets = list(report.histogram)
        ax_h.bar(buckets, [report.histogram[b] for b in buckets], color="0.4")
        ax_h.set_xlabel("phoneme errors per word")
        ax_h.set_ylabel("words")
        ops = {"sub": report.ops.substitutions, "ins": report.ops.insertions,
               "del": report.ops.deletions}
        ax_o.bar(list(ops), list(ops.values()), color="0.6")
        ax_o.set_ylabel("edit operations")
        fig.suptitle(f"PER {report.per:.2f}%  WER {report.wer:.2f}%  ({report.word_count} words)")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
