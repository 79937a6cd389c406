"""Confusion matrices, the two tasks' metric sets, evaluation and the ablation grid.

Conventions
-----------
* Undefined precision / recall / F1 (zero denominator) count as 0 and are
  still averaged.
* Macro scores are unweighted means over all classes of the task.
* F1^Sarc is the F1 of the sarcastic class.
* F1^PN is the mean of the Positive and Negative F1 scores computed on the
  full 3x3 matrix, so Neutral confusions still count as false positives /
  negatives of Positive and Negative.
* A sample is predicted sarcastic when its probability is >= 0.5; sentiment is
  the argmax of the three probabilities.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .data import SARCASM, SENTIMENT_NAMES, Record, encode_records

if TYPE_CHECKING:
    from .model import Model

log = logging.getLogger(__name__)

NEG, NEU, POS = 0, 1, 2
SARC_THRESHOLD = 0.5
CONVENTIONS = ("zero-denominator P/R/F1 = 0; macro = unweighted class mean; "
               "F1^PN = mean(F1_Positive, F1_Negative) with Neutral confusions counted "
               "in their FP/FN; sarcasm threshold 0.5")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # k x k, rows gold, cols predicted
    labels: tuple[str, ...]

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.labels != other.labels:
            raise ValueError("cannot add confusion matrices with different labels")
        return ConfusionMatrix(self.counts + other.counts, self.labels)

    def to_tsv(self) -> str:
        lines = ["gold\\pred\t" + "\t".join(self.labels)]
        for lab, row in zip(self.labels, self.counts):
            lines.append(lab + "\t" + "\t".join(str(int(c)) for c in row))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        w = max(6, *(len(s) for s in self.labels), len(str(self.counts.max())) + 1)
        head = " " * w + "".join(s.rjust(w) for s in self.labels)
        rows = [lab.rjust(w) + "".join(str(int(c)).rjust(w) for c in row)
                for lab, row in zip(self.labels, self.counts)]
        return "\n".join([head, *rows])


def confusion(golds, preds, k: int, labels: Sequence[str] | None = None) -> ConfusionMatrix:
    golds = np.asarray(golds, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    if golds.shape != preds.shape:
        raise ValueError(f"golds and preds differ in length: {golds.size} vs {preds.size}")
    if golds.size and (min(golds.min(), preds.min()) < 0 or max(golds.max(), preds.max()) >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    counts = np.bincount(golds * k + preds, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(counts, tuple(labels) if labels else tuple(map(str, range(k))))


def _div(a: float, b: float) -> float:
    return a / b if b else 0.0


def per_class_prf(cm: ConfusionMatrix):
    c = cm.counts.astype(float)
    tp = np.diag(c)
    pred_tot = c.sum(axis=0)
    gold_tot = c.sum(axis=1)
    p = np.array([_div(tp[i], pred_tot[i]) for i in range(cm.k)])
    r = np.array([_div(tp[i], gold_tot[i]) for i in range(cm.k)])
    f = np.array([_div(2 * p[i] * r[i], p[i] + r[i]) for i in range(cm.k)])
    return p, r, f


def macro_prf(cm: ConfusionMatrix) -> tuple[float, float, float]:
    p, r, f = per_class_prf(cm)
    return float(p.mean()), float(r.mean()), float(f.mean())


def accuracy(cm: ConfusionMatrix) -> float:
    return _div(float(np.trace(cm.counts)), cm.total)


def f1_of_class(cm: ConfusionMatrix, c: int) -> float:
    return float(per_class_prf(cm)[2][c])


def f1_pn(cm: ConfusionMatrix) -> float:
    if cm.k != 3:
        raise ValueError("F1^PN needs the 3-class sentiment matrix")
    f = per_class_prf(cm)[2]
    return float((f[POS] + f[NEG]) / 2.0)


@dataclass
class TaskMetrics:
    precision: float
    recall: float
    accuracy: float
    f1: float
    f1_focus: float  # F1^Sarc or F1^PN

    def values(self) -> list[float]:
        return [self.precision, self.recall, self.accuracy, self.f1, self.f1_focus]


def sarcasm_metrics(cm: ConfusionMatrix) -> TaskMetrics:
    p, r, f = macro_prf(cm)
    return TaskMetrics(p, r, accuracy(cm), f, f1_of_class(cm, 1))


def sentiment_metrics(cm: ConfusionMatrix) -> TaskMetrics:
    p, r, f = macro_prf(cm)
    return TaskMetrics(p, r, accuracy(cm), f, f1_pn(cm))


TASK_HEADERS = {
    "sarc": ("Sarcasm", ("Precision", "Recall", "Accuracy", "F1", "F1^Sarc")),
    "sent": ("Sentiment", ("Precision", "Recall", "Accuracy", "F1", "F1^PN")),
}


@dataclass
class MetricsReport:
    """Metrics of one model (or a pair of single-task models) on one split.

    A task the model has no head for is ``None``, never zero-filled.
    """

    sarcasm: TaskMetrics | None
    sentiment: TaskMetrics | None
    matrices: dict[str, ConfusionMatrix] = field(default_factory=dict)

    @staticmethod
    def column_names() -> list[str]:
        return [f"{task} {m}" for task, ms in TASK_HEADERS.values() for m in ms]

    def row(self) -> list[float | None]:
        out: list[float | None] = []
        for tm in (self.sarcasm, self.sentiment):
            out += tm.values() if tm is not None else [None] * 5
        return out

    def summary(self) -> str:
        parts = []
        if self.sarcasm:
            parts.append(f"sarc F1 {self.sarcasm.f1:.3f} F1^Sarc {self.sarcasm.f1_focus:.3f}")
        if self.sentiment:
            parts.append(f"sent F1 {self.sentiment.f1:.3f} F1^PN {self.sentiment.f1_focus:.3f}")
        return ", ".join(parts)

    def to_text(self) -> str:
        lines = [f"# {CONVENTIONS}"]
        for name, tm in (("sarc", self.sarcasm), ("sent", self.sentiment)):
            task, cols = TASK_HEADERS[name]
            if tm is None:
                lines.append(f"{task}: absent (variant has no {task.lower()} head)")
                continue
            lines.append(task + ": " + "  ".join(f"{c}={v:.4f}" for c, v in zip(cols, tm.values())))
        for name, cm in self.matrices.items():
            lines.append(f"\n[{name}] (rows gold, cols predicted; n={cm.total})")
            lines.append(cm.to_text())
        return "\n".join(lines) + "\n"

    @classmethod
    def merge(cls, sarc: "MetricsReport", sent: "MetricsReport") -> "MetricsReport":
        """Combine a sarcasm-only and a sentiment-only report (single-task rows)."""
        matrices = {k: v for k, v in sarc.matrices.items() if k.startswith("sarcasm")}
        matrices.update({k: v for k, v in sent.matrices.items() if k.startswith("sentiment")})
        return cls(sarc.sarcasm, sent.sentiment, matrices)


def report_from_predictions(y_sarc, y_sent, sarc_prob=None, sent_prob=None) -> MetricsReport:
    y_sarc = np.asarray(y_sarc)
    y_sent = np.asarray(y_sent)
    sarc = sent = None
    matrices = {}
    if sarc_prob is not None:
        pred = (np.asarray(sarc_prob) >= SARC_THRESHOLD).astype(np.int64)
        cm = confusion(y_sarc, pred, 2, SARCASM)
        matrices["sarcasm"] = cm
        sarc = sarcasm_metrics(cm)
    if sent_prob is not None:
        pred = np.argmax(np.asarray(sent_prob), axis=1)
        cm = confusion(y_sent, pred, 3, SENTIMENT_NAMES)
        matrices["sentiment"] = cm
        is_sarc = y_sarc == 1
        matrices["sentiment|sarcastic"] = confusion(y_sent[is_sarc], pred[is_sarc], 3,
                                                    SENTIMENT_NAMES)
        matrices["sentiment|non-sarcastic"] = confusion(y_sent[~is_sarc], pred[~is_sarc], 3,
                                                        SENTIMENT_NAMES)
        sent = sentiment_metrics(cm)
    return MetricsReport(sarc, sent, matrices)


def evaluate(model: "Model", records: Sequence[Record], batch_size: int = 256) -> MetricsReport:
    from .model import forward

    if model.vocab is None:
        raise ValueError("model has no vocabulary attached; cannot tokenize")
    sarc_p, sent_p = [], []
    for s in range(0, len(records), batch_size):
        batch = encode_records(records[s:s + batch_size], model.vocab, model.config.n_max)
        out = forward(batch, model)
        if out.sarc_prob is not None:
            sarc_p.append(out.sarc_prob)
        if out.sent_prob is not None:
            sent_p.append(out.sent_prob)
    return report_from_predictions(
        [r.sarcasm for r in records], [r.sentiment for r in records],
        np.concatenate(sarc_p) if sarc_p else None,
        np.concatenate(sent_p) if sent_p else None)


def write_matrices(report: MetricsReport, out_dir, prefix: str = "") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, cm in report.matrices.items():
        slug = name.replace("|", "_given_").replace("-", "_")
        path = out_dir / f"{prefix}cm_{slug}.tsv"
        path.write_text(cm.to_tsv(), encoding="utf-8")
        paths.append(path)
    return paths
