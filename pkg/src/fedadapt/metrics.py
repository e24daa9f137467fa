"""Per-frame error records and D1 / EPE aggregation."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass


@dataclass(frozen=True)
class MetricParams:
    d1_abs_threshold: float = 3.0
    d1_rel_threshold: float = 0.05

    def __post_init__(self):
        if not (self.d1_abs_threshold > 0 and self.d1_rel_threshold > 0):
            raise ValueError("D1 thresholds must be positive")


def d1_flag(epe: float, target: float, params: MetricParams = MetricParams()) -> bool:
    """Outlier if the absolute error exceeds both the absolute and relative bands."""
    return epe > params.d1_abs_threshold and epe > params.d1_rel_threshold * abs(target)


@dataclass(frozen=True)
class FrameRecord:
    index: int
    domain: str
    prediction: float
    target: float
    epe: float
    d1: bool
    round_id: int


def make_record(frame, prediction: float, round_id: int,
                params: MetricParams = MetricParams()) -> FrameRecord:
    epe = abs(prediction - frame.target)
    return FrameRecord(frame.index, frame.domain, prediction, frame.target, epe,
                       d1_flag(epe, frame.target, params), round_id)


@dataclass(frozen=True)
class DomainMetrics:
    frames: int
    epe: float
    d1: float


def compute_metrics(records, params: MetricParams | None = None) -> "OrderedDict[str, DomainMetrics]":
    """Mean EPE and D1 percentage grouped by domain, in first-seen order, plus ``"all"``.

    When ``params`` is given, D1 flags are recomputed from the records' errors
    instead of taken from the records.
    """
    records = list(records)
    if not records:
        raise ValueError("cannot compute metrics over an empty record list")
    groups: "OrderedDict[str, list]" = OrderedDict()
    for r in records:
        groups.setdefault(r.domain, []).append(r)
    groups["all"] = records
    out = OrderedDict()
    for name, group in groups.items():
        flags = [d1_flag(r.epe, r.target, params) if params else r.d1 for r in group]
        out[name] = DomainMetrics(
            frames=len(group),
            epe=sum(r.epe for r in group) / len(group),
            d1=100.0 * sum(flags) / len(group),
        )
    return out
