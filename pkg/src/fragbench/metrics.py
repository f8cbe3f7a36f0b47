"""Assembly-quality measures: coverage, intersection-over-union, and the
Cov@t aggregate, all as pixel-count ratios at the episode resolution."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

__all__ = [
    "UndefinedMetricError",
    "EvalRecord",
    "coverage",
    "iou",
    "cov_at",
    "aggregate",
    "report_csv",
]

REPORT_COLUMNS = ("method", "shape", "Cov@0.95", "Cov@0.90", "Cov", "IoU", "time_sec")


class UndefinedMetricError(Exception):
    pass


def _counts(c: np.ndarray, s: np.ndarray):
    if c.shape != s.shape:
        raise ValueError(f"mask shape mismatch: {c.shape} vs {s.shape}")
    cb = c.astype(bool)
    sb = s.astype(bool)
    inter = int(np.logical_and(cb, sb).sum())
    union = int(np.logical_or(cb, sb).sum())
    return inter, union, int(sb.sum())


def coverage(c: np.ndarray, s: np.ndarray) -> float:
    """|c ∩ s| / |s|; fraction of the target actually covered."""
    inter, _, s_count = _counts(c, s)
    if s_count == 0:
        raise UndefinedMetricError("coverage undefined for an empty target")
    return inter / s_count


def iou(c: np.ndarray, s: np.ndarray) -> float:
    """|c ∩ s| / |c ∪ s|."""
    inter, union, _ = _counts(c, s)
    if union == 0:
        raise UndefinedMetricError("IoU undefined when both masks are empty")
    return inter / union


@dataclass(frozen=True)
class EvalRecord:
    episode_id: int
    cov: float
    iou: float
    wall_time_sec: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.cov <= 1.0 and 0.0 <= self.iou <= 1.0):
            raise ValueError(f"metrics out of [0,1]: cov={self.cov}, iou={self.iou}")


def cov_at(records: list, t: float) -> float:
    """Fraction of records with coverage >= t."""
    if not records:
        raise UndefinedMetricError("Cov@t undefined for an empty record list")
    if not 0.0 < t <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {t}")
    return sum(1 for r in records if r.cov >= t) / len(records)


def aggregate(records: list) -> dict:
    if not records:
        raise UndefinedMetricError("cannot aggregate zero records")
    return {
        "Cov@0.95": cov_at(records, 0.95),
        "Cov@0.90": cov_at(records, 0.90),
        "Cov": float(np.mean([r.cov for r in records])),
        "IoU": float(np.mean([r.iou for r in records])),
        "time_sec": float(np.sum([r.wall_time_sec for r in records])),
    }


def report_csv(rows: list[dict]) -> str:
    """Aggregate report with the standard benchmark column layout.

    ``rows`` entries carry ``method``, ``shape`` and a ``records`` list.
    """
    buf = io.StringIO()
    buf.write(",".join(REPORT_COLUMNS) + "\n")
    for row in rows:
        agg = aggregate(row["records"])
        buf.write(
            f"{row['method']},{row['shape']},{agg['Cov@0.95']:.4f},{agg['Cov@0.90']:.4f},"
            f"{agg['Cov']:.4f},{agg['IoU']:.4f},{agg['time_sec']:.3f}\n"
        )
    return buf.getvalue()
