"""Per-request outcome records, per-class summaries and goodput search."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .core import MmschedError, Modality, VehicleClass

log = logging.getLogger(__name__)

GROUPS = ("M", "C", "T", "O")


class EmptyInput(MmschedError, ValueError):
    pass


class BracketInvalid(MmschedError, ValueError):
    pass


@dataclass(frozen=True)
class RequestRecord:
    id: int
    modality: Modality
    vclass: Optional[VehicleClass]
    arrival: float
    first_token: float
    completion: float
    output_tokens: int
    preemption_count: int
    preempted_seconds: float
    isolated_e2e: float
    slo: float

    @property
    def ttft(self) -> float:
        return self.first_token - self.arrival

    @property
    def e2e(self) -> float:
        return self.completion - self.arrival

    @property
    def normalized_latency(self) -> float:
        return self.e2e / self.output_tokens

    @property
    def violated(self) -> bool:
        return self.e2e > self.slo

    @property
    def group(self) -> str:
        return self.vclass.short if self.vclass is not None else "O"

    def to_json(self) -> dict:
        d = asdict(self)
        d["modality"] = self.modality.value
        d["vclass"] = self.vclass.value if self.vclass is not None else None
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RequestRecord":
        d = dict(d)
        d["modality"] = Modality(d["modality"])
        d["vclass"] = VehicleClass(d["vclass"]) if d.get("vclass") else None
        return cls(**d)


@dataclass(frozen=True)
class GroupStats:
    count: int
    mean_ttft: float
    p50_ttft: float
    p90_ttft: float
    mean_norm_latency: float
    violation_rate: float
    mean_severity: float
    preemptions: int
    preempted_seconds: float
    violations: int


METRICS = tuple(GroupStats.__dataclass_fields__)


def _stats(records: Sequence[RequestRecord]) -> GroupStats:
    if not records:
        nan = float("nan")
        return GroupStats(0, nan, nan, nan, nan, nan, nan, 0, 0.0, 0)
    ttft = np.array([r.ttft for r in records])
    norm = np.array([r.normalized_latency for r in records])
    over = np.array([r.e2e - r.slo for r in records])
    viol = over > 0
    nv = int(viol.sum())
    return GroupStats(
        count=len(records),
        mean_ttft=float(ttft.mean()),
        p50_ttft=float(np.percentile(ttft, 50)),
        p90_ttft=float(np.percentile(ttft, 90)),
        mean_norm_latency=float(norm.mean()),
        violation_rate=nv / len(records),
        mean_severity=float(over[viol].mean()) if nv else 0.0,
        preemptions=int(sum(r.preemption_count for r in records)),
        preempted_seconds=float(sum(r.preempted_seconds for r in records)),
        violations=nv,
    )


@dataclass(frozen=True)
class Summary:
    """Stats for motorcycles (M), cars (C), trucks (T) and overall (O)."""

    groups: Dict[str, GroupStats]

    def __getitem__(self, group: str) -> GroupStats:
        return self.groups[group]

    def rows(self) -> List[dict]:
        out = []
        for g in GROUPS:
            stats = self.groups[g]
            for m in METRICS:
                out.append({"group": g, "metric": m, "value": getattr(stats, m)})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["group", "metric", "value"], lineterminator="\n")
        w.writeheader()
        for row in self.rows():
            w.writerow({**row, "value": repr(float(row["value"]))})
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {g: asdict(s) for g, s in self.groups.items()}


def summarize(records: Iterable[RequestRecord]) -> Summary:
    """Aggregate records by class; records without a class only count toward Overall."""
    records = list(records)
    if not records:
        raise EmptyInput("no records to summarize")
    groups = {}
    for g in ("M", "C", "T"):
        groups[g] = _stats([r for r in records if r.group == g])
    groups["O"] = _stats(records)
    return Summary(groups)


def attainment(records: Iterable[RequestRecord], group: str = "O") -> float:
    """Fraction of requests in ``group`` that met their SLO (1.0 for an empty group)."""
    sel = [r for r in records if group == "O" or r.group == group]
    if not sel:
        return 1.0
    return sum(not r.violated for r in sel) / len(sel)


def goodput(
    attainment_at: Callable[[float], float],
    threshold: float = 0.9,
    low: float = 0.25,
    high: float = 8.0,
    resolution: float = 0.05,
) -> float:
    """Largest request rate whose SLO attainment stays at or above ``threshold``.

    Binary search on ``attainment_at(rate)``, which is assumed nonincreasing
    in rate. If even ``low`` misses the threshold, ``low`` is returned; if
    ``high`` still meets it the bracket is invalid.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    if not 0 < low < high:
        raise BracketInvalid(f"need 0 < low < high, got {low}, {high}")
    if attainment_at(low) < threshold:
        log.warning("attainment below %.3f already at rate %.3f; returning the low bound", threshold, low)
        return low
    if attainment_at(high) >= threshold:
        raise BracketInvalid(f"attainment at high bound {high} still meets {threshold}")
    # work on an integer grid so probes are reproducible rates
    lo_i, hi_i = 0, int(np.ceil((high - low) / resolution))
    while hi_i - lo_i > 1:
        mid = (lo_i + hi_i) // 2
        rate = min(low + mid * resolution, high)
        if attainment_at(rate) >= threshold:
            lo_i = mid
        else:
            hi_i = mid
    return round(low + lo_i * resolution, 10)


def dump_records(records: Iterable[RequestRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), separators=(",", ":")) + "\n")


def load_records(path) -> List[RequestRecord]:
    with open(path) as fh:
        return [RequestRecord.from_json(json.loads(line)) for line in fh if line.strip()]
