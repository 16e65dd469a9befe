"""Declarative experiment plans and the runner that executes them.

A plan names a model profile, a base workload, a list of policies, an
optional sweep axis and a list of seeds. Every ``(policy, sweep value,
seed)`` cell generates a trace, simulates it and summarizes the records.
Outputs land in ``<out>/<plan name>/``:

* ``runs/<policy>__<axis>-<value>__seed<k>.jsonl`` per-request records
* ``summary.csv`` per-cell stats averaged over seeds
* ``manifest.json`` plan, input hash and output file hashes

Files are written to a scratch directory and moved into place only when
every run succeeded, so a failed plan leaves nothing behind.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .calibration import Calibration, calibrate
from .core import MIX_PRESETS, POLICY_NAMES, InvalidConfig, MmschedError, PriorityParams, SimConfig
from .costmodel import ModelProfile
from .engine import simulate
from .metrics import GROUPS, METRICS, Summary, attainment, dump_records, goodput, summarize
from .workload import WorkloadSpec, annotate, generate

SWEEP_AXES = ("rate", "kv_capacity", "slo_scale", "mix")
DEFAULT_OUT = "mmsched-out"
OUT_ENV = "MMSCHED_OUT"


class RunFailed(MmschedError):
    """A single simulation inside a plan failed; the message carries the cell."""


def default_out() -> str:
    return os.environ.get(OUT_ENV, DEFAULT_OUT)


@dataclass(frozen=True)
class ExperimentPlan:
    name: str
    policies: Tuple[str, ...]
    seeds: Tuple[int, ...] = (0, 1, 2)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    profile: ModelProfile = field(default_factory=ModelProfile)
    kv_capacity: int = 131072
    chunk_budget: int = 2048
    slo_scale: float = 5.0
    priority_params: PriorityParams = field(default_factory=PriorityParams)
    sweep: Optional[str] = None
    sweep_values: Tuple = ()
    out: Optional[str] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "policies", tuple(self.policies))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "sweep_values", tuple(self.sweep_values))
        if not self.name or "/" in self.name:
            raise InvalidConfig(f"bad plan name {self.name!r}")
        if not self.policies:
            raise InvalidConfig("plan needs at least one policy")
        for p in self.policies:
            if p not in POLICY_NAMES:
                raise InvalidConfig(f"unknown policy {p!r}")
        if len(set(self.policies)) != len(self.policies):
            raise InvalidConfig("duplicate policy in plan")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise InvalidConfig("plan needs distinct seeds")
        if self.sweep is None:
            if self.sweep_values:
                raise InvalidConfig("sweep values given without a sweep axis")
            return
        if self.sweep not in SWEEP_AXES:
            raise InvalidConfig(f"unknown sweep axis {self.sweep!r}; expected one of {SWEEP_AXES}")
        vals = self.sweep_values
        if not vals:
            raise InvalidConfig("sweep axis given without values")
        if self.sweep == "mix":
            for v in vals:
                if v not in MIX_PRESETS:
                    raise InvalidConfig(f"mix sweep takes preset names, got {v!r}")
            if len(set(vals)) != len(vals):
                raise InvalidConfig("duplicate mix in sweep")
        else:
            d = np.diff(np.asarray(vals, dtype=float))
            if not (np.all(d > 0) or np.all(d < 0)):
                raise InvalidConfig(f"sweep values must be strictly monotone, got {vals}")

    @property
    def points(self) -> Tuple:
        """Sweep values, or a single ``None`` for an unswept plan."""
        return self.sweep_values if self.sweep else (None,)

    def cells(self) -> List[Tuple[str, object, int]]:
        """All runs in the deterministic (policy, sweep value, seed) order."""
        return [(p, v, s) for p in self.policies for v in self.points for s in self.seeds]

    def trace_kv(self) -> int:
        # traces are clamped to the tightest memory in the plan so every cell sees the same requests
        if self.sweep == "kv_capacity":
            return int(min(self.sweep_values))
        return self.kv_capacity

    def workload_for(self, value, seed: int) -> WorkloadSpec:
        spec = replace(self.workload, seed=seed, kv_capacity=self.trace_kv())
        if self.sweep == "rate":
            spec = replace(spec, rate=float(value))
        elif self.sweep == "mix":
            spec = replace(spec, mix=value)
        return spec

    def config_for(self, policy: str, value, seed: int) -> SimConfig:
        spec = self.workload_for(value, seed)
        kv, slo = self.kv_capacity, self.slo_scale
        if self.sweep == "kv_capacity":
            kv = int(value)
        elif self.sweep == "slo_scale":
            slo = float(value)
        return SimConfig(
            request_rate=spec.rate,
            duration=spec.duration,
            workload_mix=spec.mix,
            kv_capacity=kv,
            chunk_budget=self.chunk_budget,
            slo_scale=slo,
            policy=policy,
            seed=seed,
            priority_params=self.priority_params,
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "policies": list(self.policies),
            "seeds": list(self.seeds),
            "workload": self.workload.to_dict(),
            "profile": self.profile.to_dict(),
            "kv_capacity": self.kv_capacity,
            "chunk_budget": self.chunk_budget,
            "slo_scale": self.slo_scale,
            "priority_params": self.priority_params.to_dict(),
            "sweep": self.sweep,
            "sweep_values": list(self.sweep_values),
            "out": self.out,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentPlan":
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise InvalidConfig(f"unknown plan keys {sorted(extra)}")
        kw = dict(data)
        if "workload" in kw and isinstance(kw["workload"], dict):
            kw["workload"] = WorkloadSpec.from_dict(kw["workload"])
        if "profile" in kw and isinstance(kw["profile"], dict):
            kw["profile"] = ModelProfile.from_dict(kw["profile"])
        if "priority_params" in kw and isinstance(kw["priority_params"], dict):
            kw["priority_params"] = PriorityParams.from_dict(kw["priority_params"])
        return cls(**kw)

    def input_hash(self) -> str:
        """SHA-256 over everything that can change results (output location excluded)."""
        d = self.to_dict()
        d.pop("out")
        d["version"] = __version__
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


_ALL = ("fcfs", "edf", "naive-aging", "static-naive", "static-smart", "tcm")


def builtin_plans() -> Dict[str, ExperimentPlan]:
    """Desk-scale versions of the evaluation's experiment shapes."""
    kv = 131072
    plans = [
        ExperimentPlan("fig7-policy-comparison", _ALL),
        ExperimentPlan("fig9-preemptions", ("edf", "tcm")),
        ExperimentPlan("fig11-rate-sweep", ("fcfs", "edf", "tcm"), sweep="rate", sweep_values=(1.0, 2.0, 3.0, 4.0)),
        ExperimentPlan("fig12-mix", ("fcfs", "edf", "tcm"), sweep="mix", sweep_values=("TO", "ML", "MH")),
        ExperimentPlan(
            "fig13-memory", ("fcfs", "edf", "tcm"), sweep="kv_capacity", sweep_values=(kv, kv // 2, kv // 4)
        ),
        ExperimentPlan("fig14-slo-sweep", ("fcfs", "edf", "tcm"), sweep="slo_scale", sweep_values=(2.5, 5.0, 10.0)),
        # stock server, naive classifier, smart classifier, aging without classes, full scheduler
        ExperimentPlan("ablation-fig8", ("fcfs", "static-naive", "static-smart", "naive-aging", "tcm")),
    ]
    return {p.name: p for p in plans}


_CAL_CACHE: Dict[str, Calibration] = {}


def calibration_for(plan: ExperimentPlan) -> Calibration:
    """Calibrate the plan's profile against its workload distributions (memoized per process)."""
    spec = replace(plan.workload, kv_capacity=plan.trace_kv())
    key = hashlib.sha256(
        json.dumps([plan.profile.to_dict(), spec.to_dict(), plan.chunk_budget], sort_keys=True).encode()
    ).hexdigest()
    if key not in _CAL_CACHE:
        _CAL_CACHE[key] = calibrate(plan.profile, spec, plan.chunk_budget)
    return _CAL_CACHE[key]


def run_cell(plan: ExperimentPlan, policy: str, value, seed: int, calibration: Optional[Calibration] = None):
    """Generate, annotate and simulate one cell; returns the per-request records."""
    cal = calibration or calibration_for(plan)
    config = plan.config_for(policy, value, seed)
    trace = generate(plan.workload_for(value, seed))
    annotate(trace, plan.profile.without_noise(), plan.chunk_budget)
    try:
        return simulate(trace, plan.profile, config, cal, record_events=False).records
    except MmschedError as exc:
        where = f" {plan.sweep}={value}" if plan.sweep else ""
        raise RunFailed(f"{plan.name}: policy={policy}{where} seed={seed}: {exc}") from exc


def _cell_job(args):
    plan_dict, cal_dict, policy, value, seed = args
    plan = ExperimentPlan.from_dict(plan_dict)
    return run_cell(plan, policy, value, seed, Calibration.from_dict(cal_dict))


def _fmt(v) -> str:
    return "none" if v is None else str(v)


def run_filename(policy: str, axis: Optional[str], value, seed: int) -> str:
    return f"{policy}__{axis or 'none'}-{_fmt(value)}__seed{seed}.jsonl"


SUMMARY_FIELDS = ("policy", "axis", "value", "group") + METRICS


def mean_summaries(summaries: Sequence[Summary]) -> Dict[str, Dict[str, float]]:
    """Average each group's stats over seeds, skipping seeds where the group was empty."""
    out = {}
    for g in GROUPS:
        row = {}
        for m in METRICS:
            vals = [getattr(s[g], m) for s in summaries if s[g].count > 0]
            row[m] = float(np.mean(vals)) if vals else float("nan")
        out[g] = row
    return out


def summary_csv(plan: ExperimentPlan, cells: Dict[Tuple[str, object], List[Summary]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for policy in plan.policies:
        for v in plan.points:
            means = mean_summaries(cells[(policy, v)])
            for g in GROUPS:
                w.writerow([policy, plan.sweep or "none", _fmt(v), g] + [repr(means[g][m]) for m in METRICS])
    return buf.getvalue()


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class ExperimentResult:
    directory: Path
    summaries: Dict[Tuple[str, object, int], Summary]


def run_experiment(plan: ExperimentPlan, out: Optional[str] = None, workers: int = 1) -> ExperimentResult:
    """Run every cell of ``plan`` and write records, summary CSV and manifest.

    Runs may execute in ``workers`` processes; results are reduced and
    written in the deterministic cell order, so reruns are byte-identical.
    """
    root = Path(out or plan.out or default_out())
    final = root / plan.name
    scratch = root / f".{plan.name}.partial"
    cal = calibration_for(plan)
    cells = plan.cells()
    if workers > 1:
        jobs = [(plan.to_dict(), cal.to_dict(), p, v, s) for p, v, s in cells]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell_job, jobs))
    else:
        results = [run_cell(plan, p, v, s, cal) for p, v, s in cells]

    if scratch.exists():
        shutil.rmtree(scratch)
    try:
        (scratch / "runs").mkdir(parents=True)
        summaries: Dict[Tuple[str, object, int], Summary] = {}
        grouped: Dict[Tuple[str, object], List[Summary]] = {}
        files = []
        for (p, v, s), records in zip(cells, results):
            name = run_filename(p, plan.sweep, v, s)
            dump_records(records, scratch / "runs" / name)
            files.append(f"runs/{name}")
            summ = summarize(records)
            summaries[(p, v, s)] = summ
            grouped.setdefault((p, v), []).append(summ)
        (scratch / "summary.csv").write_text(summary_csv(plan, grouped))
        files.append("summary.csv")
        manifest = {
            "plan": {k: v for k, v in plan.to_dict().items() if k != "out"},
            "input_sha256": plan.input_hash(),
            "calibration": cal.to_dict(),
            "version": __version__,
            "outputs": {f: _sha(scratch / f) for f in files},
        }
        (scratch / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if final.exists():
            shutil.rmtree(final)
        scratch.rename(final)
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise
    return ExperimentResult(final, summaries)


def load_plan_file(path) -> ExperimentPlan:
    """Read a JSON plan file. Missing keys take the plan defaults."""
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise InvalidConfig(f"{path}: plan file must hold a JSON object")
    return ExperimentPlan.from_dict(data)


def probe_seed(base_seed: int, rate: float) -> int:
    """Seed for a goodput probe: a fixed function of the base seed and the probed rate."""
    return base_seed * 100_003 + int(round(rate * 1000))


class GoodputSearch:
    """Per-class goodput for one policy; probe runs are cached and shared across groups."""

    def __init__(self, plan: ExperimentPlan, policy: str, calibration: Optional[Calibration] = None):
        self.plan = replace(plan, sweep=None, sweep_values=())
        self.policy = policy
        self.cal = calibration or calibration_for(self.plan)
        self._runs: Dict[Tuple[float, int], list] = {}

    def records(self, rate: float, base_seed: int):
        key = (round(rate, 10), base_seed)
        if key not in self._runs:
            p = replace(self.plan, workload=replace(self.plan.workload, rate=rate))
            self._runs[key] = run_cell(p, self.policy, None, probe_seed(base_seed, rate), self.cal)
        return self._runs[key]

    def attainment_at(self, rate: float, group: str = "O") -> float:
        return float(np.mean([attainment(self.records(rate, s), group) for s in self.plan.seeds]))

    def goodput(self, group: str = "O", **kw) -> float:
        return goodput(lambda r: self.attainment_at(r, group), **kw)
