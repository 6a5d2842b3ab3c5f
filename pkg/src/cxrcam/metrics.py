"""Multiclass evaluation: confusion matrix, precision/recall/F1, one-vs-rest AUC."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

PROB_FLOOR = 1e-12


def _labels(y, k, name="labels"):
    y = np.asarray(y)
    if y.ndim != 1 or (y.size and not np.issubdtype(y.dtype, np.integer)):
        raise ValueError(f"{name} must be a 1-D integer array")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"{name} must lie in [0, {k})")
    return y.astype(np.int64)


def confusion(y_true, y_pred, k):
    """``cm[t, p]`` counts samples of true class ``t`` predicted as ``p``."""
    y_true = _labels(y_true, k, "y_true")
    y_pred = _labels(y_pred, k, "y_pred")
    if len(y_true) != len(y_pred):
        raise ValueError(f"length mismatch: {len(y_true)} vs {len(y_pred)}")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _ratio(num, den):
    out = np.zeros(len(num), dtype=np.float64)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out, ~ok


def precision_recall_f1(cm):
    """Per-class and macro precision, recall and F1 from a confusion matrix.

    Zero denominators give 0; the affected (metric, class) pairs are listed
    under ``"zero_division"``.
    """
    cm = np.asarray(cm)
    tp = np.diag(cm).astype(np.float64)
    precision, p_zero = _ratio(tp, cm.sum(axis=0).astype(np.float64))
    recall, r_zero = _ratio(tp, cm.sum(axis=1).astype(np.float64))
    f1, f_zero = _ratio(2 * precision * recall, precision + recall)
    zero = ([("precision", int(c)) for c in np.flatnonzero(p_zero)]
            + [("recall", int(c)) for c in np.flatnonzero(r_zero)]
            + [("f1", int(c)) for c in np.flatnonzero(f_zero)])
    return {
        "precision": precision, "recall": recall, "f1": f1,
        "support": cm.sum(axis=1),
        "precision_macro": float(precision.mean()),
        "recall_macro": float(recall.mean()),
        "f1_macro": float(f1.mean()),
        "zero_division": zero,
    }


def binary_auc(pos, neg):
    """Mann-Whitney AUC: P(pos > neg) + 0.5 P(pos == neg)."""
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    tied = np.searchsorted(neg_sorted, pos, side="right") - below
    twice_u = int(2 * below.sum() + tied.sum())
    return twice_u / (2 * len(pos) * len(neg))


def auc_ovr(scores, y_true, warn=True):
    """One-vs-rest AUC for every class and their macro mean.

    Classes without both positives and negatives are undefined (``nan``),
    excluded from the macro mean and reported with a warning. Raises
    ValueError when no class is defined.
    """
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise ValueError(f"scores must be (N, K), got {scores.shape}")
    y = _labels(y_true, scores.shape[1], "y_true")
    if len(y) != len(scores):
        raise ValueError(f"length mismatch: {len(scores)} score rows vs {len(y)} labels")
    per_class = np.full(scores.shape[1], np.nan)
    for c in range(scores.shape[1]):
        is_pos = y == c
        if is_pos.all() or not is_pos.any():
            continue
        per_class[c] = binary_auc(scores[is_pos, c], scores[~is_pos, c])
    defined = ~np.isnan(per_class)
    if not defined.any():
        raise ValueError("AUC undefined for every class (labels contain a single class)")
    if warn and not defined.all():
        warnings.warn(f"AUC undefined for classes {np.flatnonzero(~defined).tolist()}",
                      stacklevel=2)
    return per_class, float(per_class[defined].mean())


def roc_points(scores, y_true, cls):
    """One-vs-rest ROC curve points ``(fpr, tpr, threshold)`` for one class."""
    y = np.asarray(y_true) == cls
    s = np.asarray(scores)[:, cls]
    thresholds = np.unique(s)[::-1]
    pos, neg = max(y.sum(), 1), max((~y).sum(), 1)
    rows = [(0.0, 0.0, np.inf)]
    for t in thresholds:
        hit = s >= t
        rows.append((float((hit & ~y).sum() / neg), float((hit & y).sum() / pos), float(t)))
    return rows


@dataclass
class EvalReport:
    accuracy: float
    loss: float
    auc_macro: float
    f1_macro: float
    recall_macro: float
    precision_macro: float
    per_class: dict
    confusion: np.ndarray
    class_names: list
    auc_per_class: np.ndarray = None
    zero_division: list = field(default_factory=list)

    def to_text(self):
        lines = ["format_version: 1"]
        for key in ("accuracy", "loss", "auc_macro", "f1_macro", "recall_macro",
                    "precision_macro"):
            lines.append(f"{key}: {getattr(self, key):.6f}")
        lines.append(f"samples: {int(self.confusion.sum())}")
        for i, name in enumerate(self.class_names):
            pc = self.per_class
            auc = self.auc_per_class[i]
            lines.append(
                f"class {name}: precision {pc['precision'][i]:.6f} recall {pc['recall'][i]:.6f} "
                f"f1 {pc['f1'][i]:.6f} auc {auc:.6f} support {int(pc['support'][i])}")
        zero = ", ".join(f"{m}[{self.class_names[c]}]" for m, c in self.zero_division)
        lines.append(f"zero_division: {zero or 'none'}")
        lines.append("confusion (rows=true, cols=pred):")
        lines.append("  " + " ".join(self.class_names))
        for name, row in zip(self.class_names, self.confusion):
            lines.append(f"  {name} " + " ".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w") as f:
            f.write(self.to_text())

    def write_confusion_csv(self, path):
        write_confusion_csv(self.confusion, self.class_names, path)


def write_confusion_csv(cm, class_names, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["true\\pred"] + list(class_names))
        for name, row in zip(class_names, cm):
            writer.writerow([name] + [int(v) for v in row])


def read_confusion_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)


def report(probs, y_true, class_names=None):
    """Assemble the full evaluation report; predictions are the row argmax
    (lowest class index wins ties)."""
    probs = np.asarray(probs)
    k = probs.shape[1]
    y = _labels(y_true, k, "y_true")
    if len(y) != len(probs):
        raise ValueError(f"length mismatch: {len(probs)} probability rows vs {len(y)} labels")
    class_names = list(class_names) if class_names else [str(i) for i in range(k)]
    pred = probs.argmax(axis=1)
    cm = confusion(y, pred, k)
    prf = precision_recall_f1(cm)
    auc_per_class, auc_macro = auc_ovr(probs, y)
    p_true = np.maximum(probs[np.arange(len(y)), y].astype(np.float64), PROB_FLOOR)
    return EvalReport(
        accuracy=float(np.trace(cm) / len(y)),
        loss=float(-np.log(p_true).mean()),
        auc_macro=auc_macro,
        f1_macro=prf["f1_macro"],
        recall_macro=prf["recall_macro"],
        precision_macro=prf["precision_macro"],
        per_class={key: prf[key] for key in ("precision", "recall", "f1", "support")},
        confusion=cm,
        class_names=class_names,
        auc_per_class=auc_per_class,
        zero_division=prf["zero_division"],
    )


def write_roc_csv(probs, y_true, class_names, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["class", "fpr", "tpr", "threshold"])
        for c, name in enumerate(class_names):
            for fpr, tpr, thr in roc_points(probs, y_true, c):
                writer.writerow([name, f"{fpr:.6f}", f"{tpr:.6f}", f"{thr:.6g}"])
