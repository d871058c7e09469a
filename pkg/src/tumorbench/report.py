"""Comparison tables, training curves and confusion-matrix figures.

Everything here reads stored artifacts (``metrics.json``, ``timing.json``,
``history.csv``); no metric is recomputed at render time.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import EmptyHistory, MissingMetrics  # noqa: E402

DISPLAY_NAMES = {
    "xception": "Xception",
    "resnet50v2": "ResNet50V2",
    "inception_resnet_v2": "InceptionResNetV2",
    "densenet201": "DenseNet201",
}
CONFUSION_DISPLAY_ORDER = ("glioma", "meningioma", "pituitary")

# (key, header, source); source is a metrics.json key or a (key, variant) pair
COLUMNS = (
    ("backbone", "Model", None),
    ("accuracy", "Accuracy", "accuracy"),
    ("precision", "Precision", "precision_macro"),
    ("recall", "Recall", "recall_macro"),
    ("f1", "F1-score", "f1_macro"),
    ("mae", "MAE", "mae"),
    ("mse", "MSE", "mse"),
    ("rmse", "RMSE", "rmse"),
    ("mcc", "MCC", ("mcc", "multiclass")),
    ("kappa", "Kappa", ("kappa", "multiclass")),
    ("csi", "CSI", "csi_macro"),
    ("predict_seconds", "Prediction time (s)", None),
)
_SAVEFIG = dict(dpi=100, metadata={"Software": None})


@dataclass
class ComparisonTable:
    rows: list[dict] = field(default_factory=list)
    decimals: int = 2

    @property
    def headers(self) -> list[str]:
        return [h for _, h, _ in COLUMNS]

    def formatted_rows(self) -> list[list[str]]:
        out = []
        for row in self.rows:
            cells = [row["backbone"]]
            for key, _, _ in COLUMNS[1:-1]:
                cells.append(f"{100.0 * row[key]:.{self.decimals}f}")
            t = row.get("predict_seconds")
            cells.append("-" if t is None else f"{t:.{self.decimals}f}")
            out.append(cells)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.headers)
        w.writerows(self.formatted_rows())
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = ["| " + " | ".join(self.headers) + " |",
                 "|" + "|".join(["---"] + ["---:"] * (len(COLUMNS) - 1)) + "|"]
        lines += ["| " + " | ".join(r) + " |" for r in self.formatted_rows()]
        return "\n".join(lines) + "\n"


def _metric(metrics: dict, source):
    if isinstance(source, tuple):
        key, variant = source
        return metrics[key][variant]
    return metrics[source]


def load_run(run_dir) -> dict:
    run_dir = Path(run_dir)
    mfile = run_dir / "metrics.json"
    if not mfile.exists():
        raise MissingMetrics(f"{run_dir} has no metrics.json")
    metrics = json.loads(mfile.read_text())
    backbone = metrics.get("backbone")
    cfile = run_dir / "config.json"
    if backbone is None and cfile.exists():
        backbone = json.loads(cfile.read_text()).get("backbone")
    tfile = run_dir / "timing.json"
    timing = json.loads(tfile.read_text()) if tfile.exists() else {}
    return {"backbone": backbone or run_dir.name, "metrics": metrics, "timing": timing}


def table_row(backbone: str, metrics: dict, timing: dict | None = None) -> dict:
    row = {"backbone": DISPLAY_NAMES.get(backbone, backbone)}
    for key, _, source in COLUMNS[1:-1]:
        row[key] = float(_metric(metrics, source))
    row["predict_seconds"] = (timing or {}).get("predict_seconds")
    return row


def render_table(runs, decimals: int = 2) -> ComparisonTable:
    """Build a comparison table from run directories or ``load_run``-style dicts."""
    loaded = [r if isinstance(r, dict) else load_run(r) for r in runs]
    rows = [table_row(r["backbone"], r["metrics"], r.get("timing")) for r in loaded]
    rows.sort(key=lambda r: r["backbone"].lower())
    return ComparisonTable(rows, decimals)


def format_percent(fraction: float, decimals: int = 2) -> str:
    """``0.484 -> '48.4%'``: round to ``decimals`` places, drop trailing zeros."""
    s = f"{100.0 * fraction:.{decimals}f}".rstrip("0").rstrip(".")
    return f"{s}%"


# ---------------------------------------------------------------------------
# figures


def plot_history(history, out_dir=None, title: str = ""):
    """Accuracy and loss curves (train vs validation) over epochs."""
    if len(history) == 0:
        raise EmptyHistory("history has no epochs")
    epochs = [r.epoch for r in history.records]
    figs = []
    for metric, ylabel in (("acc", "Accuracy"), ("loss", "Loss")):
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(epochs, history.column(f"train_{metric}"), marker="o", label="train")
        ax.plot(epochs, history.column(f"val_{metric}"), marker="o", label="validation")
        ax.set_xticks(epochs)
        ax.set_xlabel("Epoch")
        ax.set_ylabel(ylabel)
        ax.set_title(f"{title} {ylabel}".strip())
        ax.legend()
        ax.grid(alpha=0.3)
        fig.tight_layout()
        figs.append(fig)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        figs[0].savefig(out_dir / "accuracy.png", **_SAVEFIG)
        figs[1].savefig(out_dir / "loss.png", **_SAVEFIG)
    return figs[0], figs[1]


def confusion_annotations(counts, class_order, display_order=CONFUSION_DISPLAY_ORDER, decimals: int = 2):
    """Reorder ``counts`` for display and annotate cells with percent of all samples."""
    counts = np.asarray(counts)
    class_order = list(class_order)
    if display_order and set(display_order) == set(class_order):
        perm = [class_order.index(name) for name in display_order]
        labels = list(display_order)
    else:
        perm = list(range(len(class_order)))
        labels = class_order
    shown = counts[np.ix_(perm, perm)]
    total = shown.sum()
    ann = [[format_percent(v / total if total else 0.0, decimals) for v in row] for row in shown]
    return shown, labels, ann


def plot_confusion(cm, out=None, display_order=CONFUSION_DISPLAY_ORDER, title: str = "Confusion matrix"):
    """Heatmap of counts, cells annotated as percent of the test set.

    ``cm`` is a :class:`~tumorbench.metrics.ConfusionMatrix` or a
    ``metrics.json`` dict. Returns ``(figure, annotations)`` where
    ``annotations[i][j]`` is the text drawn in display row ``i``, column ``j``.
    """
    if isinstance(cm, dict):
        counts, order = cm["confusion"], cm["class_order"]
    else:
        counts, order = cm.counts, cm.class_order
    shown, labels, ann = confusion_annotations(counts, order, display_order)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(shown, cmap="Blues")
    fig.colorbar(im, ax=ax)
    thresh = shown.max() / 2 if shown.size else 0
    for i in range(shown.shape[0]):
        for j in range(shown.shape[1]):
            ax.text(j, i, f"{shown[i, j]}\n{ann[i][j]}", ha="center", va="center",
                    color="white" if shown[i, j] > thresh else "black")
    ax.set_xticks(range(len(labels)), labels)
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("Actual")
    ax.set_title(title)
    fig.tight_layout()
    if out is not None:
        fig.savefig(out, **_SAVEFIG)
    return fig, ann


def write_run_report(run_dir, formats=("csv", "md"), decimals: int = 2) -> list[Path]:
    """Render every figure and table for one run into its directory."""
    from .train import TrainingHistory

    run_dir = Path(run_dir)
    written = []
    run = load_run(run_dir)
    hist_file = run_dir / "history.csv"
    if hist_file.exists():
        history = TrainingHistory.from_csv(hist_file)
        if len(history):
            fa, fl = plot_history(history, run_dir, DISPLAY_NAMES.get(run["backbone"], run["backbone"]))
            plt.close(fa)
            plt.close(fl)
            written += [run_dir / "accuracy.png", run_dir / "loss.png"]
    fig, _ = plot_confusion(run["metrics"], run_dir / "confusion.png")
    plt.close(fig)
    written.append(run_dir / "confusion.png")
    table = render_table([run], decimals)
    if "csv" in formats:
        (run_dir / "table.csv").write_text(table.to_csv())
        written.append(run_dir / "table.csv")
    if "md" in formats:
        (run_dir / "table.md").write_text(table.to_markdown())
        written.append(run_dir / "table.md")
    return written
