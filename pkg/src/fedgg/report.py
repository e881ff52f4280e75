"""Best accuracy, rounds-to-target and speedup summaries."""

from __future__ import annotations

import csv
import math
import sys
from dataclasses import dataclass

SUB_UNITY = "<1x"
SUMMARY_HEADER = ["variant", "best_acc", "final_acc", "rounds_to_target", "speedup"]


@dataclass(frozen=True)
class RunSummary:
    variant: str
    best_accuracy: float
    final_accuracy: float
    rounds_to_target: int | None = None
    speedup: float | str | None = None
    best_accuracy_std: float | None = None
    final_accuracy_std: float | None = None


def _accuracies(records) -> list[float]:
    return [r if isinstance(r, float) else r.test_accuracy for r in records]


def best_accuracy(records) -> float:
    accs = _accuracies(records)
    if not accs:
        raise ValueError("no records")
    return max(accs)


def rounds_to_target(records, target: float) -> int | None:
    """1-based index of the first round whose accuracy is at least ``target``."""
    if not 0 < target <= 1:
        raise ValueError(f"target must lie in (0, 1], got {target}")
    for k, acc in enumerate(_accuracies(records), start=1):
        if acc >= target:
            return k
    return None


def speedup(baseline_rounds: int, rounds: int | None) -> float | str:
    if baseline_rounds < 1:
        raise ValueError("baseline_rounds must be >= 1")
    if rounds is None:
        return SUB_UNITY
    return baseline_rounds / rounds


def format_speedup(value: float | str | None) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value.replace("x", "×")
    text = f"{value:.2f}".rstrip("0").rstrip(".")
    return f"{text}×"


def format_accuracy(acc: float, std: float | None = None) -> str:
    text = f"{100 * acc:.1f}%"
    if std is not None:
        text += f"±{100 * std:.1f}%"
    return text


def summarize(variant: str, records, target: float | None = None,
              baseline_rounds: int | None = None) -> RunSummary:
    accs = _accuracies(records)
    rtt = rounds_to_target(accs, target) if target is not None else None
    spd = speedup(baseline_rounds, rtt) if target is not None and baseline_rounds else None
    return RunSummary(variant, best_accuracy(accs), accs[-1], rtt, spd)


def mean_std(values) -> tuple[float, float]:
    values = list(values)
    mean = math.fsum(values) / len(values)
    var = math.fsum((v - mean) ** 2 for v in values) / len(values)
    return mean, math.sqrt(var)


def _csv_number(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, int):
        return str(value)
    return f"{value:.17g}"


def format_table(summaries: list[RunSummary]) -> str:
    rows = [["Method", "best acc", "final acc", "rounds", "speedup"]]
    for s in summaries:
        rows.append([
            s.variant,
            format_accuracy(s.best_accuracy, s.best_accuracy_std),
            format_accuracy(s.final_accuracy, s.final_accuracy_std),
            "-" if s.rounds_to_target is None else str(s.rounds_to_target),
            format_speedup(s.speedup) or "-",
        ])
    widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def emit_summary(summaries: list[RunSummary], path, stream=None) -> None:
    if not summaries:
        raise ValueError("nothing to summarise")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for s in summaries:
            w.writerow([s.variant, _csv_number(s.best_accuracy), _csv_number(s.final_accuracy),
                        _csv_number(s.rounds_to_target), _csv_number(s.speedup)])
    print(format_table(summaries), file=stream or sys.stdout)


def read_summary(path) -> list[RunSummary]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rtt = int(row["rounds_to_target"]) if row["rounds_to_target"] else None
            spd_raw = row["speedup"]
            spd = None if spd_raw == "" else (spd_raw if spd_raw == SUB_UNITY else float(spd_raw))
            out.append(RunSummary(row["variant"], float(row["best_acc"]), float(row["final_acc"]), rtt, spd))
    return out
