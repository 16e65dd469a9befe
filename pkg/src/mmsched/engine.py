"""Iteration-level continuous-batching simulator.

Each loop turn is one model iteration: admit arrivals, ask the policy for a
decision, apply it, charge the iteration time from the cost model and
advance the clock. KV memory is reserved for a request's whole prefill
footprint when it is first scheduled and grows by one token per generated
token. Preemption discards the KV cache; the request later recomputes its
prefill from scratch.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .calibration import Calibration
from .classifier import classify_naive, classify_request
from .core import Event, MmschedError, Phase, Request, SimConfig, VehicleClass, advance_state
from .costmodel import ModelProfile, iteration_time, stage_costs
from .metrics import RequestRecord
from .policies import Policy, make_policy
from .workload import Trace, annotate

#: run the KV and budget audits on every iteration (tests switch this on)
AUDIT = os.environ.get("MMSCHED_AUDIT", "") not in ("", "0")


class CapacityImpossible(MmschedError):
    pass


class Deadlock(MmschedError):
    pass


class AuditFailure(MmschedError, AssertionError):
    pass


class KvCache:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self.allocations: Dict[int, int] = {}
        self.used = 0

    @property
    def free(self) -> int:
        return self.capacity - self.used

    def reserve(self, rid: int, tokens: int) -> None:
        if tokens > self.free:
            raise MmschedError(f"kv overflow reserving {tokens} for request {rid} with {self.free} free")
        self.allocations[rid] = self.allocations.get(rid, 0) + tokens
        self.used += tokens

    def release(self, rid: int) -> int:
        tokens = self.allocations.pop(rid, 0)
        self.used -= tokens
        return tokens


@dataclass
class SimResult:
    records: List[RequestRecord]
    events: List[dict]
    iterations: int
    clock: float
    #: per class: time-weighted mean waiting-queue length, mean TTFT and request count
    queue_stats: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def events_jsonl(self) -> str:
        return "".join(json.dumps(e, separators=(",", ":")) + "\n" for e in self.events)


@dataclass
class _Track:
    first_token: Optional[float] = None
    completion: Optional[float] = None
    preemptions: int = 0
    preempted_at: Optional[float] = None
    preempted_seconds: float = 0.0
    started: bool = False
    inline: float = 0.0


def classify_on_ingest(policy: Policy, request: Request, calibration: Optional[Calibration]) -> Request:
    """Set ``request.vclass`` for ``policy``.

    Static-naive uses the modality mapping; everything else records the
    smart class (falling back to the modality mapping without calibration).
    """
    if policy.classifier == "naive" or calibration is None:
        request.vclass = classify_naive(request)
    else:
        request.vclass = classify_request(calibration.clusters, calibration.estimators, request)
    return request


def run(
    trace: Trace,
    profile: ModelProfile,
    policy: Policy,
    config: SimConfig,
    calibration: Optional[Calibration] = None,
    record_events: bool = True,
    audit: Optional[bool] = None,
) -> SimResult:
    """Simulate ``trace`` to completion and return per-request records.

    The trace's requests are copied, so the caller's trace is never mutated.
    Stage-time noise is drawn from a generator seeded with ``config.seed``.
    """
    audit = AUDIT if audit is None else audit
    if not trace.isolated:
        annotate(trace, profile.without_noise(), config.chunk_budget)
    rng = np.random.default_rng(config.seed)
    kv = KvCache(config.kv_capacity)
    budget = config.chunk_budget
    for r in trace.requests:
        if r.footprint + 1 > kv.capacity:
            raise CapacityImpossible(
                f"request {r.id}: prefill footprint {r.footprint} does not fit kv capacity {kv.capacity}"
            )
        if r.footprint + r.output_tokens > kv.capacity:
            raise CapacityImpossible(
                f"request {r.id}: footprint plus output {r.footprint + r.output_tokens} exceeds kv capacity"
            )
    pending = sorted((r.fresh_copy() for r in trace.requests), key=lambda r: (r.arrival_time, r.id))
    by_id = {r.id: r for r in pending}
    track = {r.id: _Track() for r in pending}
    waiting: List[Request] = []
    running: List[Request] = []
    n_total = len(pending)
    n_done = 0
    nxt = 0
    clock = pending[0].arrival_time if pending else 0.0
    events: List[dict] = []
    it = 0
    queue_area = {c: 0.0 for c in VehicleClass}

    while n_done < n_total:
        while nxt < n_total and pending[nxt].arrival_time <= clock:
            r = pending[nxt]
            classify_on_ingest(policy, r, calibration)
            pre, enc = stage_costs(profile, r, rng)
            track[r.id].inline = pre + enc
            waiting.append(r)
            nxt += 1
        if not waiting and not running:
            clock = pending[nxt].arrival_time
            continue

        decision = policy.decide(clock, waiting, running, kv.free, budget)

        for rid in decision.preempt:
            r = by_id.get(rid)
            if r is None or r not in running:
                raise MmschedError(f"policy preempted non-running request {rid}")
            advance_state(r, Event.PREEMPT)
            kv.release(rid)
            running.remove(r)
            waiting.append(r)
            t = track[rid]
            t.preemptions += 1
            t.preempted_at = clock

        inline = 0.0
        prefill_tokens = 0
        chunks: List[Tuple[Request, int]] = []
        for rid, chunk in decision.admit:
            r = by_id[rid]
            t = track[rid]
            if r.phase is Phase.WAITING or r.phase is Phase.PREEMPTED:
                waiting.remove(r)
                advance_state(r, Event.SCHEDULE)
                kv.reserve(rid, r.kv_tokens)
                running.append(r)
                if t.preempted_at is not None:
                    t.preempted_seconds += clock - t.preempted_at
                    t.preempted_at = None
                if not t.started:
                    t.started = True
                    inline += t.inline
            chunks.append((r, chunk))
            prefill_tokens += chunk

        stalled = set(decision.stalled)
        decoders = [r for r in running if r.phase is Phase.DECODING and r.id not in stalled]
        if prefill_tokens == 0 and not decoders:
            if nxt < n_total:
                clock = max(clock, pending[nxt].arrival_time)
                continue
            raise Deadlock(
                f"no runnable work at t={clock:.6f} with {len(waiting)} waiting and {len(running)} running"
            )
        if prefill_tokens + len(decoders) > budget:
            raise AuditFailure(f"iteration {it}: {prefill_tokens} prefill + {len(decoders)} decode > budget")

        dt = iteration_time(profile, prefill_tokens, len(decoders), inline)
        for r in waiting:
            queue_area[r.vclass] += dt
        start = clock
        clock = clock + dt

        first_tokens = []
        for r in decoders:
            advance_state(r, Event.DECODE)
            kv.reserve(r.id, 1)
        for r, chunk in chunks:
            advance_state(r, Event.PREFILL, chunk)
            if r.phase is Phase.DECODING:
                kv.reserve(r.id, 1)
                t = track[r.id]
                if t.first_token is None:
                    t.first_token = clock
                    first_tokens.append(r.id)
        finished = []
        for r in list(running):
            if r.phase is Phase.DECODING and r.tokens_generated == r.output_tokens:
                advance_state(r, Event.FINISH)
                kv.release(r.id)
                running.remove(r)
                track[r.id].completion = clock
                finished.append(r.id)
                n_done += 1

        if audit:
            _audit(kv, running, it)
        if record_events:
            events.append(
                {
                    "iter": it,
                    "start": start,
                    "dt": dt,
                    "prefill": [[r.id, c] for r, c in chunks],
                    "decode": len(decoders),
                    "preempt": list(decision.preempt),
                    "stalled": sorted(stalled),
                    "first_token": first_tokens,
                    "finish": finished,
                    "kv_used": kv.used,
                }
            )
        it += 1

    records = []
    for r in sorted(by_id.values(), key=lambda r: r.id):
        t = track[r.id]
        iso = trace.isolated[r.id][1]
        records.append(
            RequestRecord(
                id=r.id,
                modality=r.modality,
                vclass=r.vclass,
                arrival=r.arrival_time,
                first_token=t.first_token,
                completion=t.completion,
                output_tokens=r.output_tokens,
                preemption_count=t.preemptions,
                preempted_seconds=t.preempted_seconds,
                isolated_e2e=iso,
                slo=config.slo_scale * iso,
            )
        )
    span = clock - pending[0].arrival_time if pending else 0.0
    return SimResult(records, events, it, clock, _queue_stats(records, queue_area, span))


def _queue_stats(records, queue_area, span: float) -> Dict[str, Dict[str, float]]:
    out = {}
    for c in VehicleClass:
        mine = [r for r in records if r.vclass is c]
        out[c.short] = {
            "mean_queue_length": queue_area[c] / span if span > 0 else 0.0,
            "mean_ttft": float(np.mean([r.ttft for r in mine])) if mine else 0.0,
            "count": len(mine),
        }
    return out


def _audit(kv: KvCache, running: Sequence[Request], it: int) -> None:
    if kv.used > kv.capacity:
        raise AuditFailure(f"iteration {it}: kv used {kv.used} > capacity {kv.capacity}")
    if sum(kv.allocations.values()) != kv.used:
        raise AuditFailure(f"iteration {it}: kv allocation sum drifted")
    if set(kv.allocations) != {r.id for r in running}:
        raise AuditFailure(f"iteration {it}: kv allocations do not match running set")
    for r in running:
        if kv.allocations[r.id] != r.kv_tokens:
            raise AuditFailure(
                f"iteration {it}: request {r.id} holds {kv.allocations[r.id]} tokens, expected {r.kv_tokens}"
            )


def build_policy(config: SimConfig, trace: Trace) -> Policy:
    """Construct the configured policy; EDF gets deadlines from the isolated annotations."""
    deadlines = None
    if config.policy == "edf":
        deadlines = {r.id: r.arrival_time + config.slo_scale * trace.isolated[r.id][1] for r in trace.requests}
    return make_policy(config.policy, deadlines, config.priority_params)


def simulate(
    trace: Trace,
    profile: ModelProfile,
    config: SimConfig,
    calibration: Optional[Calibration] = None,
    record_events: bool = True,
    audit: Optional[bool] = None,
) -> SimResult:
    """Annotate (if needed), build the policy named in ``config`` and run."""
    if not trace.isolated:
        annotate(trace, profile.without_noise(), config.chunk_budget)
    policy = build_policy(config, trace)
    return run(trace, profile, policy, config, calibration, record_events, audit)
