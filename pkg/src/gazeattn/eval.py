"""Confusion matrices, per-class recall / accuracy / macro F1, LOSO harness and reports.

Metrics are computed with exact rational arithmetic and converted to float at
the end, so two independent implementations of the same formula agree bit for bit.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .datasets import DatasetManifest, loso_folds, load_attention_arrays
from .errors import EmptyDataset, EmptyInput, EmptyMatrix, LengthMismatch
from .types import CLASS_NAMES, AttentionClass
from .vision import DEFAULT_MARGIN, FaceDetector

log = logging.getLogger(__name__)

N_CLASSES = len(AttentionClass)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes, both in canonical class order."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.shape != (N_CLASSES, N_CLASSES) or (c < 0).any():
            raise ValueError(f"confusion matrix must be a non-negative 3x3 count array, got {c}")
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row_totals(self) -> list[int]:
        return [int(v) for v in self.counts.sum(axis=1)]

    def to_list(self) -> list[list[int]]:
        return self.counts.tolist()

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


def confusion_matrix(preds: Sequence, labels: Sequence) -> ConfusionMatrix:
    if len(preds) != len(labels):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(labels)} labels")
    if len(labels) == 0:
        raise EmptyInput("no predictions to score")
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    p = np.fromiter((int(AttentionClass.parse(x)) for x in preds), dtype=np.int64, count=len(preds))
    t = np.fromiter((int(AttentionClass.parse(x)) for x in labels), dtype=np.int64, count=len(labels))
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


@dataclass(frozen=True)
class FoldMetrics:
    recalls: tuple[float, float, float]
    accuracy: float
    f1: float
    empty_classes: tuple[int, ...] = ()


def fold_metrics(cm: ConfusionMatrix) -> FoldMetrics:
    """Per-class recall, accuracy and macro F1.

    A class with no true samples gets recall 0 (with a warning). A class whose
    precision and recall are both 0 contributes F1 0 to the macro mean.
    """
    c = cm.counts
    total = int(c.sum())
    if total == 0:
        raise EmptyMatrix("confusion matrix has no samples")
    recalls, f1s, empty = [], [], []
    for k in range(N_CLASSES):
        tp = int(c[k, k])
        row = int(c[k, :].sum())
        col = int(c[:, k].sum())
        if row == 0:
            empty.append(k)
            recalls.append(Fraction(0))
        else:
            recalls.append(Fraction(tp, row))
        # 2PR/(P+R) == 2TP/(row+col) whenever the denominator is non-zero.
        f1s.append(Fraction(2 * tp, row + col) if tp else Fraction(0))
    if empty:
        warnings.warn(f"classes without samples, recall set to 0: "
                      f"{[CLASS_NAMES[k] for k in empty]}", RuntimeWarning, stacklevel=2)
    accuracy = Fraction(int(np.trace(c)), total)
    f1 = sum(f1s, Fraction(0)) / N_CLASSES
    return FoldMetrics(tuple(float(r) for r in recalls), float(accuracy), float(f1), tuple(empty))


def round_half_up(value: float, digits: int) -> float:
    """Round half-up on the shortest decimal representation (0.9425 -> 0.943 at 3 digits)."""
    q = Decimal(1).scaleb(-digits)
    return float(Decimal(repr(float(value))).quantize(q, rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class FoldReport:
    fold: str
    confusion: ConfusionMatrix
    recalls: tuple[float, float, float]
    accuracy: float
    f1: float

    @classmethod
    def from_confusion(cls, fold: str, cm: ConfusionMatrix) -> "FoldReport":
        m = fold_metrics(cm)
        return cls(fold, cm, m.recalls, m.accuracy, m.f1)

    @classmethod
    def from_predictions(cls, fold: str, preds: Sequence, labels: Sequence) -> "FoldReport":
        return cls.from_confusion(fold, confusion_matrix(preds, labels))

    def rounded(self, digits: int = 2) -> dict:
        return {
            "recalls": [round_half_up(r, digits) for r in self.recalls],
            "accuracy": round_half_up(self.accuracy, digits),
            "f1": round_half_up(self.f1, digits),
        }

    def to_dict(self) -> dict:
        return {"fold": self.fold, "confusion": self.confusion.to_list(),
                "recalls": list(self.recalls), "accuracy": self.accuracy, "f1": self.f1,
                "rounded": self.rounded()}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldReport":
        return cls.from_confusion(d["fold"], ConfusionMatrix(np.asarray(d["confusion"])))


def aggregate_scores(accuracies: Sequence[float], f1s: Sequence[float]) -> tuple[float, float]:
    """Arithmetic means of per-model accuracy and F1 (correctly rounded sums)."""
    if not accuracies or len(accuracies) != len(f1s):
        raise LengthMismatch("need equally many (non-zero) accuracies and F1 scores")
    n = len(accuracies)
    return math.fsum(accuracies) / n, math.fsum(f1s) / n


@dataclass(frozen=True)
class LosoReport:
    folds: tuple[FoldReport, ...]
    average_accuracy: float
    average_f1: float

    @classmethod
    def from_folds(cls, folds: Iterable[FoldReport]) -> "LosoReport":
        folds = tuple(folds)
        acc, f1 = aggregate_scores([f.accuracy for f in folds], [f.f1 for f in folds])
        return cls(folds, acc, f1)

    def to_dict(self) -> dict:
        return {"folds": [f.to_dict() for f in self.folds],
                "average_accuracy": self.average_accuracy, "average_f1": self.average_f1,
                "rounded": {"accuracy": round_half_up(self.average_accuracy, 3),
                            "f1": round_half_up(self.average_f1, 3)}}

    @classmethod
    def from_dict(cls, d: dict) -> "LosoReport":
        return cls.from_folds(FoldReport.from_dict(f) for f in d["folds"])

    def save_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load_json(cls, path: str | Path) -> "LosoReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def accuracy_from_recalls(recalls: Sequence[float], counts: Sequence[int]) -> float:
    """Overall accuracy implied by per-class recalls and class sizes (correct counts rounded)."""
    correct = [int(Decimal(repr(r * n)).quantize(Decimal(1), rounding=ROUND_HALF_UP))
               for r, n in zip(recalls, counts)]
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for k, (ok, n) in enumerate(zip(correct, counts)):
        cm[k, k] = ok
        cm[k, (k + 1) % N_CLASSES] = n - ok
    return fold_metrics(ConfusionMatrix(cm)).accuracy


# -- harnesses ---------------------------------------------------------------------

Trainer = Callable[[DatasetManifest, int], "object"]


def predict_classes(model, images: np.ndarray, batch: int = 256) -> list[AttentionClass]:
    from .model import predict_attention

    out: list[AttentionClass] = []
    for start in range(0, len(images), batch):
        out.extend(p.argmax() for p in predict_attention(model, images[start:start + batch]))
    return out


def evaluate_model(model, test: DatasetManifest | tuple[np.ndarray, np.ndarray], fold: str,
                   detector: FaceDetector | None = None,
                   margin: float = DEFAULT_MARGIN) -> FoldReport:
    if isinstance(test, DatasetManifest):
        X, y = load_attention_arrays(test, model.backbone.side, detector, margin)
    else:
        X, y = test
    if len(X) == 0:
        raise EmptyDataset("empty test set")
    return FoldReport.from_predictions(fold, predict_classes(model, X), [int(v) for v in y])


def run_loso(
    manifest: DatasetManifest,
    trainer: Trainer,
    seed: int = 0,
    detector: FaceDetector | None = None,
    margin: float = DEFAULT_MARGIN,
    on_fold: Optional[Callable[[str, object, FoldReport], None]] = None,
) -> LosoReport:
    """Train one model per held-out subject and score it on that subject.

    ``trainer(train_manifest, seed)`` returns an attention model. Folds are keyed
    and ordered by subject id; every fold gets the same seed.
    """
    reports = []
    for train, test in loso_folds(manifest):
        (subject,) = test.subjects
        model = trainer(train, seed)
        report = evaluate_model(model, test, subject, detector, margin)
        log.info("fold %s: accuracy %.3f f1 %.3f", subject, report.accuracy, report.f1)
        if on_fold is not None:
            on_fold(subject, model, report)
        reports.append(report)
    return LosoReport.from_folds(reports)


def evaluate_models(models: Sequence, test: DatasetManifest, names: Sequence[str] | None = None,
                    detector: FaceDetector | None = None,
                    margin: float = DEFAULT_MARGIN) -> list[FoldReport]:
    """Score every model on the same test set; reports come back in model order."""
    if len(test) == 0:
        raise EmptyDataset("empty test set")
    names = list(names) if names is not None else [f"Model{i + 1}" for i in range(len(models))]
    cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    reports = []
    for name, model in zip(names, models):
        side = model.backbone.side
        if side not in cache:
            cache[side] = load_attention_arrays(test, side, detector, margin)
        reports.append(evaluate_model(model, cache[side], name))
    return reports


# -- rendering -----------------------------------------------------------------------

COLUMNS = ("Model", "Recall Cobot", "Recall Table", "Recall Distracted", "Accuracy", "F1-score")


def _folds_and_average(report: LosoReport | Sequence[FoldReport]) -> tuple[Sequence[FoldReport], LosoReport]:
    if isinstance(report, LosoReport):
        return report.folds, report
    folds = list(report)
    return folds, LosoReport.from_folds(folds)


def format_table(report: LosoReport | Sequence[FoldReport]) -> str:
    """Plain-text table: one row per model (2 decimals) plus the average row (3 decimals)."""
    folds, summary = _folds_and_average(report)
    rows = [list(COLUMNS)]
    for f in folds:
        r = f.rounded(2)
        rows.append([f.fold, *(f"{v:.2f}" for v in r["recalls"]),
                     f"{r['accuracy']:.2f}", f"{r['f1']:.2f}"])
    rows.append(["Average", "", "", "",
                 f"{round_half_up(summary.average_accuracy, 3):.3f}",
                 f"{round_half_up(summary.average_f1, 3):.3f}"])
    widths = [max(len(row[i]) for row in rows) for i in range(len(COLUMNS))]
    lines = []
    for n, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if n == 0 or n == len(rows) - 2:
            lines.append("-" * (sum(widths) + 2 * (len(widths) - 1)))
    return "\n".join(lines) + "\n"


def format_csv(report: LosoReport | Sequence[FoldReport]) -> str:
    folds, summary = _folds_and_average(report)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "recall_cobot", "recall_table", "recall_distracted", "accuracy", "f1"])
    for f in folds:
        w.writerow([f.fold, *(repr(r) for r in f.recalls), repr(f.accuracy), repr(f.f1)])
    w.writerow(["Average", "", "", "", repr(summary.average_accuracy), repr(summary.average_f1)])
    return buf.getvalue()


def plot_confusion(cm: ConfusionMatrix, path: str | Path, title: str = "") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.2, 3.6), dpi=100)
    ax.imshow(cm.counts, cmap="Blues")
    ax.set_xticks(range(N_CLASSES), CLASS_NAMES)
    ax.set_yticks(range(N_CLASSES), CLASS_NAMES)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    peak = cm.counts.max() or 1
    for i in range(N_CLASSES):
        for j in range(N_CLASSES):
            v = int(cm.counts[i, j])
            ax.text(j, i, str(v), ha="center", va="center",
                    color="white" if v > peak / 2 else "black")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="png")
    plt.close(fig)
    return path


def render_report(report: LosoReport | Sequence[FoldReport], out_dir: str | Path,
                  stem: str = "report") -> dict[str, Path]:
    """Write ``<stem>.txt``, ``<stem>.csv`` and one ``confusion_<model>.png`` per fold."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    folds, _ = _folds_and_average(report)
    files = {
        "table": out / f"{stem}.txt",
        "csv": out / f"{stem}.csv",
    }
    files["table"].write_text(format_table(report))
    files["csv"].write_text(format_csv(report))
    for f in folds:
        files[f"confusion:{f.fold}"] = plot_confusion(f.confusion, out / f"confusion_{f.fold}.png", f.fold)
    return files
