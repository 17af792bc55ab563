"""Single-operating-point scores for imbalanced binary tasks, macro-averaged over tasks."""

from __future__ import annotations

import csv
import io
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np

METRIC_NAMES = ("precision", "recall", "f1", "f2", "f05", "bacc", "mcc")
METRIC_LABELS = ("Precision", "Recall", "F1", "F2", "F0.5", "BAcc", "MCC")
RESULT_COLUMNS = ("dataset", "model", "selection") + METRIC_NAMES


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class Scorecard:
    precision: float
    recall: float
    f1: float
    f2: float
    f05: float
    bacc: float
    mcc: float
    task_id: str = ""

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, k) for k in METRIC_NAMES)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(METRIC_NAMES, self.values()))

    def __getitem__(self, name: str) -> float:
        if name not in METRIC_NAMES:
            raise KeyError(name)
        return getattr(self, name)


def confusion(predictions, labels) -> ConfusionCounts:
    pred = np.asarray(predictions).reshape(-1)
    true = np.asarray(labels).reshape(-1)
    if pred.shape != true.shape:
        raise ValueError(f"{pred.size} predictions for {true.size} labels")
    for name, arr in (("predictions", pred), ("labels", true)):
        if arr.size and not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} must be binary 0/1")
    pred = pred.astype(bool)
    true = true.astype(bool)
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    return ConfusionCounts(tp, fp, fn, int(true.size) - tp - fp - fn)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def fbeta(precision: float, recall: float, beta: float) -> float:
    b2 = beta * beta
    return _ratio((1 + b2) * precision * recall, b2 * precision + recall)


def score(c: ConfusionCounts, task_id: str = "") -> Scorecard:
    """All seven metrics; zero denominators yield 0 (precision, F-scores, MCC)."""
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    tnr = _ratio(c.tn, c.tn + c.fp)
    prod = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    # integer numerator keeps the product exact before the single division
    mcc = (c.tp * c.tn - c.fp * c.fn) / math.sqrt(prod) if prod else 0.0
    return Scorecard(
        precision=precision,
        recall=recall,
        f1=fbeta(precision, recall, 1.0),
        f2=fbeta(precision, recall, 2.0),
        f05=fbeta(precision, recall, 0.5),
        bacc=(recall + tnr) / 2.0,
        mcc=mcc,
        task_id=task_id,
    )


def score_predictions(predictions, labels, task_id: str = "") -> Scorecard:
    return score(confusion(predictions, labels), task_id)


def aggregate(cards: Sequence[Scorecard], task_id: str = "mean") -> Scorecard:
    """Unweighted per-task mean of every metric."""
    if not cards:
        raise ValueError("cannot aggregate zero scorecards")
    means = {k: float(np.mean([c[k] for c in cards])) for k in METRIC_NAMES}
    return Scorecard(**means, task_id=task_id)


def micro_aggregate(counts: Iterable[ConfusionCounts], task_id: str = "micro") -> Scorecard:
    """Pool confusion counts across tasks before scoring (diagnostics only)."""
    counts = list(counts)
    if not counts:
        raise ValueError("cannot aggregate zero tasks")
    pooled = counts[0]
    for c in counts[1:]:
        pooled = pooled + c
    return score(pooled, task_id)


@dataclass(frozen=True)
class ResultRow:
    dataset: str
    model: str
    selection: str
    card: Scorecard


def format_csv(rows: Iterable[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in rows:
        w.writerow([r.dataset, r.model, r.selection] + [repr(float(v)) for v in r.card.values()])
    return buf.getvalue()


def parse_csv(text: str) -> list[ResultRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != RESULT_COLUMNS:
        raise ValueError(f"unexpected results header {header}")
    rows = []
    for rec in reader:
        if not rec:
            continue
        vals = dict(zip(METRIC_NAMES, map(float, rec[3:])))
        rows.append(ResultRow(rec[0], rec[1], rec[2], Scorecard(**vals)))
    return rows


def format_table(rows: Sequence[ResultRow]) -> str:
    """Aligned text table, one line per (dataset, model) row."""
    head = ["Dataset", "Model"] + list(METRIC_LABELS)
    body = []
    for r in rows:
        name = f"{r.model} ({r.selection})" if r.selection else r.model
        body.append([r.dataset, name] + [f"{v:.3f}" for v in r.card.values()])
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in [head] + body]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def report(rows: Sequence[ResultRow], csv_path, text_path=None) -> None:
    with open(csv_path, "w", newline="") as fh:
        fh.write(format_csv(rows))
    if text_path is not None:
        with open(text_path, "w") as fh:
            fh.write(format_table(rows))


def read_report(csv_path) -> list[ResultRow]:
    with open(csv_path, newline="") as fh:
        return parse_csv(fh.read())
