# machine/eval_machine.py
"""Confusion-matrix metrics for per-frame thresholding and SPRT decisions.

Anomaly is the positive class. Undecided frames are counted separately and
left out of tp/fp/tn/fn. Undefined ratios are reported as 0 and flagged.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from machine.sewer_spec import (
    ANOMALY,
    DECISIONS,
    NORMAL,
    UNDECIDED,
    EvaluationError,
    PathLike,
    ScoreStream,
)
from machine.sprt_machine import DecisionEvent, DecisionLog, FrameDecision

logger = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "precision", "recall", "fpr", "f1")
CSV_COLUMNS = ("method",) + METRIC_NAMES + ("decided_frames", "undecided_frames", "degenerate")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    excluded_undecided: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn", "excluded_undecided"):
            if getattr(self, name) < 0:
                raise EvaluationError(f"Confusion count {name} must be >= 0")

    @property
    def decided(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    fpr: float
    f1: float
    undefined: tuple = field(default=())  # names of metrics whose denominator was zero

    @property
    def degenerate(self) -> bool:
        return bool(self.undefined)

    def as_dict(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def confusion(decisions: Sequence[str], truth: Sequence[int]) -> ConfusionMatrix:
    decisions = list(decisions)
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    if len(decisions) != len(truth):
        raise EvaluationError(f"{len(decisions)} decisions but {len(truth)} truth labels")
    unknown = set(decisions) - set(DECISIONS)
    if unknown:
        raise EvaluationError(f"Unknown decision labels {sorted(unknown)}")
    if np.any((truth != 0) & (truth != 1)):
        raise EvaluationError("Truth labels must be 0 or 1")

    predicted = np.array(decisions, dtype=object)
    decided = predicted != UNDECIDED
    positive = predicted == ANOMALY
    return ConfusionMatrix(
        tp=int(np.sum(decided & positive & (truth == 1))),
        fp=int(np.sum(decided & positive & (truth == 0))),
        tn=int(np.sum(decided & ~positive & (truth == 0))),
        fn=int(np.sum(decided & ~positive & (truth == 1))),
        excluded_undecided=int(np.sum(~decided)),
    )


def _ratio(numerator: int, denominator: int):
    return (numerator / denominator, True) if denominator > 0 else (0.0, False)


def f1_score(precision: float, recall: float) -> float:
    total = precision + recall
    return 2.0 * precision * recall / total if total > 0 else 0.0


def metrics(cm: ConfusionMatrix) -> Metrics:
    if cm.decided == 0:
        raise EvaluationError("No decided frames to evaluate")
    precision, has_precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall, has_recall = _ratio(cm.tp, cm.tp + cm.fn)
    fpr, has_fpr = _ratio(cm.fp, cm.fp + cm.tn)
    undefined = [name for name, ok in (("precision", has_precision), ("recall", has_recall), ("fpr", has_fpr)) if not ok]
    if not (has_precision and has_recall) or precision + recall == 0:
        undefined.append("f1")
    return Metrics(
        accuracy=(cm.tp + cm.tn) / cm.decided,
        precision=precision,
        recall=recall,
        fpr=fpr,
        f1=f1_score(precision, recall),
        undefined=tuple(undefined),
    )


def threshold_log(stream: ScoreStream, tau: float) -> DecisionLog:
    """Per-frame z >= tau decisions as a log of single-frame windows."""
    frames, events = [], []
    for t, z in zip(stream.t, stream.z):
        verdict = ANOMALY if z >= tau else NORMAL
        frames.append(FrameDecision(t=int(t), z=float(z), dllr=None, lambda_after=None, decision=verdict))
        events.append(DecisionEvent(window_start=int(t), t_decided=int(t), verdict=verdict))
    return DecisionLog(frames=frames, events=events, method="threshold")


@dataclass
class ReportRow:
    method: str
    confusion: ConfusionMatrix
    metrics: Metrics

    @property
    def decided_frames(self) -> int:
        return self.confusion.decided

    @property
    def undecided_frames(self) -> int:
        return self.confusion.excluded_undecided


def _percent(value: float) -> str:
    return f"{100.0 * value:.2f}"


@dataclass
class ComparisonReport:
    rows: List[ReportRow]

    @property
    def deltas(self) -> Dict[str, float]:
        """Second row minus first row, per metric."""
        first, second = self.rows[0].metrics, self.rows[1].metrics
        return {name: getattr(second, name) - getattr(first, name) for name in METRIC_NAMES}

    def csv_text(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in self.rows:
            writer.writerow(
                [row.method]
                + [_percent(getattr(row.metrics, name)) for name in METRIC_NAMES]
                + [row.decided_frames, row.undecided_frames, ";".join(row.metrics.undefined)]
            )
        return buffer.getvalue()

    def text_table(self) -> str:
        headers = ["Method", "Accuracy", "Precision", "Recall (TPR)", "FPR", "F1-Score", "Decided", "Undecided"]
        body = [
            [row.method]
            + [_percent(getattr(row.metrics, name)) for name in METRIC_NAMES]
            + [str(row.decided_frames), str(row.undecided_frames)]
            for row in self.rows
        ]
        body.append(["delta"] + [f"{100.0 * self.deltas[name]:+.2f}" for name in METRIC_NAMES] + ["", ""])
        widths = [max(len(line[i]) for line in [headers] + body) for i in range(len(headers))]

        def render(cells):
            return "  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(cells, widths))).rstrip()

        rule = "-" * len(render(headers))
        return "\n".join([render(headers), rule] + [render(b) for b in body[:-1]] + [rule, render(body[-1])]) + "\n"

    def write(self, csv_path: PathLike, table_path: PathLike):
        for path, text in ((Path(csv_path), self.csv_text()), (Path(table_path), self.text_table())):
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
        logger.info("Wrote comparison report to %s and %s", csv_path, table_path)


def compare(threshold: DecisionLog, sprt: DecisionLog, truth: Sequence[int]) -> ComparisonReport:
    """Metrics of the thresholding and SPRT logs over the same frames, SPRT minus threshold deltas."""
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    if len(threshold) != len(sprt) or len(sprt) != len(truth):
        raise EvaluationError(
            f"Logs and truth cover different frame counts ({len(threshold)}, {len(sprt)}, {len(truth)})"
        )
    if not np.array_equal(threshold.t, sprt.t):
        raise EvaluationError("Threshold and SPRT logs cover different frame indices")
    rows = []
    for name, log in (("FCDD", threshold), ("FCDD+SPRT", sprt)):
        cm = confusion(log.decisions(), truth)
        if cm.decided == 0:
            logger.warning("%s decided no frames; its metrics are reported as undefined", name)
            row_metrics = Metrics(0.0, 0.0, 0.0, 0.0, 0.0, undefined=METRIC_NAMES)
        else:
            row_metrics = metrics(cm)
        rows.append(ReportRow(method=name, confusion=cm, metrics=row_metrics))
    report = ComparisonReport(rows=rows)
    logger.info(
        "F1 %.4f -> %.4f, FPR %.4f -> %.4f (%d undecided SPRT frames)",
        rows[0].metrics.f1, rows[1].metrics.f1, rows[0].metrics.fpr, rows[1].metrics.fpr, rows[1].undecided_frames,
    )
    return report
