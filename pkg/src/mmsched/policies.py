"""Scheduling policies.

Every policy ranks the requests competing for the next iteration and fills
the per-iteration token budget greedily in that order. Policies differ in
the ranking key, in how they pick memory-preemption victims, and in whether
a waiting request that does not fit blocks the ones behind it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .core import MmschedError, Phase, PriorityParams, Request, VehicleClass

SCORE_EPS = 1e-12


class InconsistentState(MmschedError):
    pass


def priority(params: PriorityParams, vclass: VehicleClass, waiting_time: float) -> float:
    """Static class priority plus an aging term that saturates at 1."""
    if waiting_time < 0:
        raise ValueError("waiting_time must be >= 0")
    cp = params.for_class(vclass)
    return cp.static + (1.0 - math.exp(-cp.k * waiting_time ** cp.p))


def score(prio: float) -> float:
    """Lower is scheduled earlier. Clamped so priority 0 maps to a finite worst score."""
    return -math.log(max(prio, SCORE_EPS))


@dataclass
class SchedDecision:
    """Outcome of one scheduling round.

    ``admit`` lists ``(request id, chunk tokens)`` in admission order; it
    covers both continuing prefills and newly scheduled requests.
    ``stalled`` holds decoding requests that skip this iteration because
    memory could not grow and no permitted victim was left.
    """

    admit: List[Tuple[int, int]] = field(default_factory=list)
    preempt: List[int] = field(default_factory=list)
    stalled: List[int] = field(default_factory=list)

    @property
    def order(self) -> List[int]:
        return [rid for rid, _ in self.admit]

    @property
    def chunks(self) -> Dict[int, int]:
        return dict(self.admit)


class Policy:
    """Base policy: subclasses provide :meth:`key` and may tune the flags below."""

    name = "base"
    #: class assignment used for this policy's ordering and reporting
    classifier = "smart"
    #: stop admitting at the first waiting request that does not fit in memory
    head_of_line_blocking = False

    def key(self, r: Request, clock: float) -> tuple:
        raise NotImplementedError

    def can_be_victim(self, r: Request) -> bool:
        return True

    # hook for priority-inversion preemption; returns victims or None
    def inversion_victims(self, cand, ranked_running, clock, kv_free, need, taken) -> Optional[List[Request]]:
        return None

    def rank(self, requests: Iterable[Request], clock: float) -> List[Request]:
        return sorted(requests, key=lambda r: self.key(r, clock))

    def decide(
        self,
        clock: float,
        waiting: Sequence[Request],
        running: Sequence[Request],
        kv_free: int,
        chunk_budget: int,
    ) -> SchedDecision:
        """Pick preemptions and prefill chunks for the next iteration.

        ``running`` holds requests that own KV memory (prefilling or
        decoding); ``waiting`` holds the rest. Each running decode consumes
        one budget token and one KV token.
        """
        dec = SchedDecision()
        for r in running:
            if r.phase is not Phase.PREFILLING and r.phase is not Phase.DECODING:
                raise InconsistentState(f"request {r.id} is running in phase {r.phase.value}")
        ranked_running = self.rank(running, clock)
        preempted = set()
        decoding = [r for r in ranked_running if r.phase is Phase.DECODING]
        need = len(decoding)
        # memory exhaustion: evict lowest-ranked permitted victims
        if kv_free < need:
            for v in reversed(ranked_running):
                if kv_free >= need:
                    break
                if not self.can_be_victim(v):
                    continue
                preempted.add(v.id)
                dec.preempt.append(v.id)
                kv_free += v.kv_tokens
                if v.phase is Phase.DECODING:
                    need -= 1
            if kv_free < need:
                live = [r for r in decoding if r.id not in preempted]
                dec.stalled = [r.id for r in live[kv_free:]]
                need = kv_free
        kv_free -= need
        budget = chunk_budget - need

        running_ids = {r.id for r in running}
        candidates = [r for r in running if r.phase is Phase.PREFILLING and r.id not in preempted]
        candidates.extend(waiting)
        taken = set()
        blocked = False
        for cand in self.rank(candidates, clock):
            if budget <= 0:
                break
            if cand.id in preempted or (blocked and cand.id not in running_ids):
                continue
            remaining = cand.remaining_prefill
            if cand.id in running_ids:
                chunk = min(remaining, budget)
                if chunk == remaining and kv_free < 1:
                    chunk = remaining - 1
                if chunk <= 0:
                    continue
                if chunk == remaining:
                    kv_free -= 1
            else:
                chunk = min(remaining, budget)
                extra = 1 if chunk == remaining else 0
                cost = cand.kv_tokens + extra
                if kv_free < cost:
                    victims = self.inversion_victims(
                        cand, [r for r in ranked_running if r.id not in preempted], clock, kv_free, cost, taken
                    )
                    if victims is None:
                        # blocking stops new admissions only; running prefills keep going
                        blocked = self.head_of_line_blocking
                        continue
                    for v in victims:
                        preempted.add(v.id)
                        dec.preempt.append(v.id)
                        kv_free += v.kv_tokens
                        if v.phase is Phase.DECODING and v.id not in dec.stalled:
                            kv_free += 1
                            budget += 1
                    chunk = min(remaining, budget)
                    extra = 1 if chunk == remaining else 0
                    cost = cand.kv_tokens + extra
                kv_free -= cost
            taken.add(cand.id)
            dec.admit.append((cand.id, chunk))
            budget -= chunk
        live = [r for r in ranked_running if r.id not in preempted]
        if not dec.admit and live and all(r.id in dec.stalled or r.phase is Phase.PREFILLING for r in live):
            # nothing can progress: memory is exactly full; free the lowest-ranked permitted request
            for v in reversed(live[1:]):
                if self.can_be_victim(v):
                    dec.preempt.append(v.id)
                    break
        return dec


class FCFS(Policy):
    """Arrival order with strict head-of-line admission, as in a stock chunked-prefill server."""

    name = "fcfs"
    head_of_line_blocking = True

    def key(self, r, clock):
        return (r.arrival_time, r.id)


class NaiveAging(Policy):
    """Oldest first regardless of class; a request that does not fit is skipped, not waited on."""

    name = "naive-aging"

    def key(self, r, clock):
        return (-(clock - r.arrival_time), r.arrival_time, r.id)


class StaticPriority(Policy):
    """Strict motorcycle, car, truck order; FCFS within a class."""

    def __init__(self, classifier: str = "smart"):
        if classifier not in ("naive", "smart"):
            raise ValueError(f"unknown classifier {classifier!r}")
        self.classifier = classifier
        self.name = f"static-{classifier}"

    def key(self, r, clock):
        return (r.vclass.rank, r.arrival_time, r.id)


class EDF(Policy):
    """Earliest deadline first, deadline = arrival + slo_scale * isolated e2e.

    Besides memory exhaustion it preempts running requests with later
    deadlines when an earlier-deadline waiting request does not fit.
    """

    name = "edf"

    def __init__(self, deadlines: Mapping[int, float]):
        self.deadlines = deadlines

    def key(self, r, clock):
        return (self.deadlines[r.id], r.arrival_time, r.id)

    def inversion_victims(self, cand, ranked_running, clock, kv_free, need, taken):
        mine = self.key(cand, clock)
        freed = kv_free
        victims = []
        for v in reversed(ranked_running):
            if self.key(v, clock) <= mine:
                break
            if v.id in taken:
                continue
            victims.append(v)
            freed += v.kv_tokens
            if freed >= need:
                return victims
        return None


class TCM(Policy):
    """Class priority with aging, converted to a score; motorcycles are never preempted."""

    name = "tcm"

    def __init__(self, params: Optional[PriorityParams] = None):
        self.params = params or PriorityParams()

    def key(self, r, clock):
        wait = clock - r.arrival_time
        return (score(priority(self.params, r.vclass, wait if wait > 0 else 0.0)), r.arrival_time, r.id)

    def can_be_victim(self, r):
        return r.vclass is not VehicleClass.MOTORCYCLE


def make_policy(
    name: str,
    deadlines: Optional[Mapping[int, float]] = None,
    params: Optional[PriorityParams] = None,
) -> Policy:
    if name == "fcfs":
        return FCFS()
    if name == "edf":
        if deadlines is None:
            raise ValueError("edf needs per-request deadlines")
        return EDF(deadlines)
    if name == "naive-aging":
        return NaiveAging()
    if name == "static-naive":
        return StaticPriority("naive")
    if name == "static-smart":
        return StaticPriority("smart")
    if name == "tcm":
        return TCM(params)
    raise ValueError(f"unknown policy {name!r}")
