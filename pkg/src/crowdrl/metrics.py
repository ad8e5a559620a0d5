"""Evaluation measures over a log of worker interactions.

The worker-side family (CR, kCR, nDCG-CR) are rates: each timestamp
contributes at most one discounted completion and the sum is divided by
the number of timestamps. The requester-side family (QG, kQG, nDCG-QG)
are cumulative sums of quality gains, not rates; the asymmetry is
deliberate. Rank discounts are 1 / log2(1 + rank); changing the log base
rescales every discounted metric uniformly, so comparisons between
policies do not depend on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import InputError

DISCOUNT_LOG_BASE = 2.0


def _discount(rank: int) -> float:
    return 1.0 / (math.log(1 + rank) / math.log(DISCOUNT_LOG_BASE))


@dataclass(frozen=True)
class Interaction:
    """One worker arrival: the list shown, which rank (1-based) was
    completed (None if none), and the quality gain it produced."""

    time: int
    pool_size: int
    list_len: int
    completed_rank: int | None
    gain: float

    def __post_init__(self) -> None:
        if self.completed_rank is not None and not (
                1 <= self.completed_rank <= self.list_len):
            raise InputError(
                f"completed rank {self.completed_rank} outside list "
                f"of {self.list_len}")
        if self.gain < 0:
            raise InputError("quality gains cannot be negative")


@dataclass
class InteractionLog:
    entries: list[Interaction] = field(default_factory=list)

    def append(self, entry: Interaction) -> None:
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)


def cr(log: InteractionLog) -> float:
    """Fraction of timestamps in which any listed task was completed."""
    if not log.entries:
        raise InputError("metrics are undefined on an empty log")
    return sum(e.completed_rank is not None for e in log.entries) / len(log.entries)


def ndcg_cr(log: InteractionLog) -> float:
    """Rank-discounted completion rate over the full list."""
    if not log.entries:
        raise InputError("metrics are undefined on an empty log")
    total = sum(_discount(e.completed_rank) for e in log.entries
                if e.completed_rank is not None)
    return total / len(log.entries)


def kcr(log: InteractionLog, k: int) -> float:
    """Rank-discounted completion rate counting only the top k positions."""
    if k < 1:
        raise InputError("k must be at least 1")
    if not log.entries:
        raise InputError("metrics are undefined on an empty log")
    total = sum(_discount(e.completed_rank) for e in log.entries
                if e.completed_rank is not None and e.completed_rank <= k)
    return total / len(log.entries)


def qg(log: InteractionLog) -> float:
    """Cumulative quality gain (a sum, not a rate)."""
    return sum(e.gain for e in log.entries if e.completed_rank is not None)


def ndcg_qg(log: InteractionLog) -> float:
    return sum(e.gain * _discount(e.completed_rank) for e in log.entries
               if e.completed_rank is not None)


def kqg(log: InteractionLog, k: int) -> float:
    if k < 1:
        raise InputError("k must be at least 1")
    return sum(e.gain * _discount(e.completed_rank) for e in log.entries
               if e.completed_rank is not None and e.completed_rank <= k)


MONTH_MINUTES = 30 * 24 * 60

CSV_COLUMNS = ("month", "policy", "cr", "kcr", "ndcg_cr", "qg", "kqg", "ndcg_qg")


def report_rows(log: InteractionLog, policy_name: str, k: int,
                start_time: int | None = None) -> list[dict]:
    """Per-30-day-month rows plus a cumulative row labeled 'all'."""
    if not log.entries:
        raise InputError("metrics are undefined on an empty log")
    t0 = log.entries[0].time if start_time is None else start_time
    buckets: dict[int, InteractionLog] = {}
    for e in log.entries:
        buckets.setdefault((e.time - t0) // MONTH_MINUTES, InteractionLog()).append(e)
    rows = []
    for month in sorted(buckets):
        rows.append(_metric_row(buckets[month], policy_name, k, str(month + 1)))
    rows.append(_metric_row(log, policy_name, k, "all"))
    return rows


def _metric_row(log: InteractionLog, policy_name: str, k: int, label: str) -> dict:
    return {
        "month": label,
        "policy": policy_name,
        "cr": cr(log),
        "kcr": kcr(log, k),
        "ndcg_cr": ndcg_cr(log),
        "qg": qg(log),
        "kqg": kqg(log, k),
        "ndcg_qg": ndcg_qg(log),
    }


def write_report_csv(rows: list[dict], path: str) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(
                row[c] if isinstance(row[c], str) else f"{row[c]:.10g}"
                for c in CSV_COLUMNS) + "\n")
