"""Classification metrics derived from a confusion matrix.

Conventions:

* ``counts[i, j]`` = number of samples of actual class ``i`` predicted as ``j``.
* precision / recall / F1 / CSI are one-vs-rest per class, then macro-averaged
  (unweighted mean over classes).
* MAE / MSE / RMSE are computed on the misclassification indicator
  ``e_i = [pred_i != true_i]``, so ``mae == mse`` and ``rmse == sqrt(mse)``.
* MCC and kappa come in two variants: ``"multiclass"`` (generalized forms over
  the whole matrix, the headline value) and ``"macro_binary"`` (mean of the
  per-class binary formulas).
* A per-class ratio with a zero denominator is reported as 0 and a
  :class:`~tumorbench.errors.MetricWarning` is emitted.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateMarginals,
    EmptyInput,
    EmptyMatrix,
    LabelOutOfRange,
    LengthMismatch,
    MetricWarning,
)

VARIANTS = ("multiclass", "macro_binary")

# Published MCC / kappa / CSI for the best (ResNet50V2) run. None of the standard
# aggregations of the stated formulas reproduce them; reports carry this marker.
PUBLISHED_UNREPRODUCED = {"mcc": 0.9969, "kappa": 0.9967, "csi": 0.9968}


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray
    class_order: tuple = None

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {c.shape}")
        if (c < 0).any() or not np.all(np.equal(np.mod(c, 1), 0)):
            raise ValueError("confusion counts must be non-negative integers")
        c = c.astype(np.int64)
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)
        order = self.class_order
        if order is None:
            order = tuple(str(i) for i in range(c.shape[0]))
        if len(order) != c.shape[0]:
            raise ValueError("class_order length does not match matrix size")
        object.__setattr__(self, "class_order", tuple(order))

    @property
    def K(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def permuted(self, perm: Sequence[int]) -> "ConfusionMatrix":
        """Reorder classes so that new class ``k`` is old class ``perm[k]``."""
        p = np.asarray(perm)
        return ConfusionMatrix(self.counts[np.ix_(p, p)], tuple(self.class_order[i] for i in p))


@dataclass(frozen=True)
class ClassStats:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    def of(self, k: int) -> dict:
        return {"tp": int(self.tp[k]), "fp": int(self.fp[k]), "fn": int(self.fn[k]), "tn": int(self.tn[k])}


def _labels(y, name) -> np.ndarray:
    a = np.asarray(y)
    if a.size == 0:
        return a.reshape(0).astype(np.int64)
    if a.ndim != 1:
        raise LengthMismatch(f"{name} must be 1-D, got shape {a.shape}")
    if not np.all(np.equal(np.mod(a, 1), 0)):
        raise LabelOutOfRange(f"{name} contains non-integer labels")
    return a.astype(np.int64)


def confusion_matrix(y_true, y_pred, K: int, class_order=None) -> ConfusionMatrix:
    t = _labels(y_true, "y_true")
    p = _labels(y_pred, "y_pred")
    if len(t) != len(p):
        raise LengthMismatch(f"y_true has {len(t)} labels, y_pred has {len(p)}")
    for name, a in (("y_true", t), ("y_pred", p)):
        if a.size and (a.min() < 0 or a.max() >= K):
            raise LabelOutOfRange(f"{name} labels must lie in 0..{K - 1}")
    counts = np.zeros((K, K), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts, class_order)


def class_stats(cm: ConfusionMatrix) -> ClassStats:
    c = cm.counts
    tp = np.diag(c).copy()
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    tn = cm.total - tp - fp - fn
    return ClassStats(tp, fp, fn, tn)


def _ratio(num, den, what: str) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    zero = den == 0
    if zero.any():
        warnings.warn(f"{what}: 0/0 for class(es) {np.flatnonzero(zero).tolist()}, reported as 0",
                      MetricWarning, stacklevel=3)
    return np.divide(num, den, out=np.zeros_like(num), where=~zero)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise EmptyMatrix("accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def per_class_precision(cm):
    s = class_stats(cm)
    return _ratio(s.tp, s.tp + s.fp, "precision")


def per_class_recall(cm):
    s = class_stats(cm)
    return _ratio(s.tp, s.tp + s.fn, "recall")


def per_class_f1(cm):
    s = class_stats(cm)
    # equals 2PR/(P+R) whenever that is defined
    return _ratio(2 * s.tp, 2 * s.tp + s.fp + s.fn, "f1")


def per_class_csi(cm):
    s = class_stats(cm)
    return _ratio(s.tp, s.tp + s.fp + s.fn, "csi")


def macro_precision(cm: ConfusionMatrix) -> float:
    return float(per_class_precision(cm).mean())


def macro_recall(cm: ConfusionMatrix) -> float:
    return float(per_class_recall(cm).mean())


def macro_f1(cm: ConfusionMatrix) -> float:
    return float(per_class_f1(cm).mean())


def csi(cm: ConfusionMatrix) -> float:
    return float(per_class_csi(cm).mean())


def error_metrics(y_true, y_pred) -> tuple[float, float, float]:
    t = np.asarray(y_true)
    p = np.asarray(y_pred)
    if t.shape != p.shape:
        raise LengthMismatch(f"y_true {t.shape} vs y_pred {p.shape}")
    if t.size == 0:
        raise EmptyInput("error metrics need at least one sample")
    e = (t != p).astype(np.float64)
    mse = float(e.mean())
    return mse, mse, math.sqrt(mse)


def error_metrics_from_cm(cm: ConfusionMatrix) -> tuple[float, float, float]:
    if cm.total == 0:
        raise EmptyInput("error metrics need at least one sample")
    mse = float((cm.total - np.trace(cm.counts)) / cm.total)
    return mse, mse, math.sqrt(mse)


def per_class_mcc(cm):
    s = class_stats(cm)
    tp, fp, fn, tn = (x.astype(np.float64) for x in (s.tp, s.fp, s.fn, s.tn))
    den = np.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    return _ratio(tp * tn - fp * fn, den, "mcc")


def per_class_kappa(cm):
    s = class_stats(cm)
    n = float(cm.total)
    tp, fp, fn, tn = (x.astype(np.float64) for x in (s.tp, s.fp, s.fn, s.tn))
    if n == 0:
        return _ratio(np.zeros(cm.K), np.zeros(cm.K), "kappa")
    po = (tp + tn) / n
    pe = ((tp + fp) * (tp + fn) + (tn + fp) * (tn + fn)) / n**2
    return _ratio(po - pe, 1.0 - pe, "kappa")


def mcc(cm: ConfusionMatrix, variant: str = "multiclass") -> float:
    if variant == "macro_binary":
        return float(per_class_mcc(cm).mean())
    if variant != "multiclass":
        raise ValueError(f"unknown MCC variant {variant!r}")
    c = cm.counts.astype(np.float64)
    s = c.sum()
    correct = np.trace(c)
    t = c.sum(axis=1)
    p = c.sum(axis=0)
    num = correct * s - p @ t
    den = math.sqrt((s * s - p @ p) * (s * s - t @ t))
    if den == 0:
        warnings.warn("mcc: undefined denominator, reported as 0", MetricWarning, stacklevel=2)
        return 0.0
    return float(num / den)


def kappa(cm: ConfusionMatrix, variant: str = "multiclass") -> float:
    if variant == "macro_binary":
        return float(per_class_kappa(cm).mean())
    if variant != "multiclass":
        raise ValueError(f"unknown kappa variant {variant!r}")
    n = cm.total
    if n == 0:
        raise EmptyMatrix("kappa of an empty confusion matrix")
    c = cm.counts.astype(np.float64)
    po = np.trace(c) / n
    pe = float(c.sum(axis=1) @ c.sum(axis=0)) / n**2
    if pe == 1.0:
        raise DegenerateMarginals("expected agreement is 1; kappa undefined")
    return float((po - pe) / (1.0 - pe))


# ---------------------------------------------------------------------------
# full report


@dataclass
class MetricReport:
    n: int
    class_order: tuple
    confusion: np.ndarray
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    mae: float
    mse: float
    rmse: float
    mcc: dict
    kappa: dict
    csi: float
    per_class: dict
    variants: dict = field(default_factory=lambda: {"mcc": "multiclass", "kappa": "multiclass", "csi": "macro"})
    divergence: dict = field(default_factory=lambda: {
        "published_values": dict(PUBLISHED_UNREPRODUCED),
        "reproducible_by_stated_formulas": False,
        "note": ("published ResNet50V2 MCC/Kappa/CSI (99.69/99.67/99.68) are not obtained by the "
                 "binary MCC, Cohen kappa or CSI formulas under macro, pooled or multiclass "
                 "aggregation; standard values are reported instead"),
    })

    @property
    def mcc_headline(self) -> float:
        return self.mcc[self.variants["mcc"]]

    @property
    def kappa_headline(self) -> float:
        return self.kappa[self.variants["kappa"]]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "class_order": list(self.class_order),
            "confusion": np.asarray(self.confusion).tolist(),
            "accuracy": self.accuracy,
            "precision_macro": self.macro_precision,
            "recall_macro": self.macro_recall,
            "f1_macro": self.macro_f1,
            "mae": self.mae,
            "mse": self.mse,
            "rmse": self.rmse,
            "mcc": dict(self.mcc),
            "kappa": dict(self.kappa),
            "csi_macro": self.csi,
            "per_class": self.per_class,
            "variants": dict(self.variants),
            "divergence": self.divergence,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(
            n=d["n"], class_order=tuple(d["class_order"]), confusion=np.asarray(d["confusion"]),
            accuracy=d["accuracy"], macro_precision=d["precision_macro"], macro_recall=d["recall_macro"],
            macro_f1=d["f1_macro"], mae=d["mae"], mse=d["mse"], rmse=d["rmse"], mcc=dict(d["mcc"]),
            kappa=dict(d["kappa"]), csi=d["csi_macro"], per_class=d["per_class"],
            variants=d.get("variants", {"mcc": "multiclass", "kappa": "multiclass", "csi": "macro"}),
            divergence=d.get("divergence"),
        )


def _report_kappa(cm: ConfusionMatrix, variant: str) -> float:
    # Pe = 1 only when every sample is one class and predicted correctly: 0/0
    try:
        return kappa(cm, variant)
    except DegenerateMarginals:
        warnings.warn("kappa: expected agreement is 1 (0/0), reported as 0", MetricWarning, stacklevel=3)
        return 0.0


def report_from_cm(cm: ConfusionMatrix) -> MetricReport:
    stats = class_stats(cm)
    prec, rec, f1 = per_class_precision(cm), per_class_recall(cm), per_class_f1(cm)
    csis, mccs, kappas = per_class_csi(cm), per_class_mcc(cm), per_class_kappa(cm)
    per_class = {
        name: dict(stats.of(k), precision=float(prec[k]), recall=float(rec[k]), f1=float(f1[k]),
                   csi=float(csis[k]), mcc=float(mccs[k]), kappa=float(kappas[k]))
        for k, name in enumerate(cm.class_order)
    }
    mae, mse, rmse = error_metrics_from_cm(cm)
    return MetricReport(
        n=cm.total,
        class_order=cm.class_order,
        confusion=cm.counts.copy(),
        accuracy=accuracy(cm),
        macro_precision=float(prec.mean()),
        macro_recall=float(rec.mean()),
        macro_f1=float(f1.mean()),
        mae=mae, mse=mse, rmse=rmse,
        mcc={v: mcc(cm, v) for v in VARIANTS},
        kappa={v: _report_kappa(cm, v) for v in VARIANTS},
        csi=float(csis.mean()),
        per_class=per_class,
    )


def predict_labels(y_prob) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    prob = np.asarray(y_prob, dtype=np.float64)
    if prob.ndim != 2:
        raise LengthMismatch(f"y_prob must be 2-D, got shape {prob.shape}")
    return prob.argmax(axis=1)


def full_report(y_true, y_prob, class_order=None) -> MetricReport:
    prob = np.asarray(y_prob, dtype=np.float64)
    y_pred = predict_labels(prob)
    return report_from_labels(y_true, y_pred, prob.shape[1], class_order)


def report_from_labels(y_true, y_pred, K: int, class_order=None) -> MetricReport:
    return report_from_cm(confusion_matrix(y_true, y_pred, K, class_order))
