"""Class-incremental evaluation metrics and CSV reporting."""

from __future__ import annotations

import numpy as np

from .errors import InputError


def accuracy(predictions, labels) -> float:
    """Percent of matching entries."""
    preds = np.asarray(predictions, dtype=np.int64)
    labs = np.asarray(labels, dtype=np.int64)
    if preds.shape != labs.shape or preds.ndim != 1:
        raise InputError(f"predictions {preds.shape} and labels {labs.shape} must be equal-length vectors")
    if preds.size == 0:
        raise InputError("accuracy of an empty prediction set is undefined")
    return 100.0 * float(np.count_nonzero(preds == labs)) / preds.size


def last_acc(acc_seen) -> float:
    """Accuracy over all seen classes after the final task."""
    seq = list(acc_seen)
    if not seq:
        raise InputError("empty accuracy sequence")
    return float(seq[-1])


def inc_acc(acc_seen) -> float:
    """Mean of the all-seen-classes accuracy after each task."""
    seq = [float(v) for v in acc_seen]
    if not seq:
        raise InputError("empty accuracy sequence")
    return sum(seq) / len(seq)


METRICS_CSV_HEADER = "task,acc_seen,last_acc,inc_acc,strategy,lambda,seed"
SWEEP_CSV_HEADER = "lambda,seed,strategy,last_acc,inc_acc"


def _fmt(value: float) -> str:
    return repr(float(value))


def metrics_csv_lines(report) -> list[str]:
    """One row per task plus a summary row; full-precision decimals."""
    lines = [METRICS_CSV_HEADER]
    for t, acc in enumerate(report.acc_seen, start=1):
        lines.append(
            f"{t},{_fmt(acc)},,,{report.strategy},{_fmt(report.lam)},{report.seed}"
        )
    lines.append(
        f"summary,,{_fmt(report.last_acc)},{_fmt(report.inc_acc)},"
        f"{report.strategy},{_fmt(report.lam)},{report.seed}"
    )
    return lines


def write_metrics_csv(path, report) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(metrics_csv_lines(report)) + "\n")


def write_sweep_csv(path, rows) -> None:
    """rows: iterable of (lambda, seed, strategy, last_acc, inc_acc)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(SWEEP_CSV_HEADER + "\n")
        for lam, seed, strategy, last, inc in rows:
            fh.write(f"{_fmt(lam)},{seed},{strategy},{_fmt(last)},{_fmt(inc)}\n")
