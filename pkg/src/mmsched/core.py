"""Domain types shared across the simulator and the request lifecycle state machine."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional, Tuple


class MmschedError(Exception):
    """Base class for all errors raised by this package."""


class IllegalTransition(MmschedError):
    """A lifecycle event was applied to a request in a state that does not accept it."""


class InvalidRequest(MmschedError, ValueError):
    pass


class InvalidConfig(MmschedError, ValueError):
    pass


class Modality(str, Enum):
    TEXT = "text"
    IMAGE = "image"
    VIDEO = "video"


class VehicleClass(str, Enum):
    """Resource class of a request. Lower ``rank`` is served first under static priority."""

    MOTORCYCLE = "motorcycle"
    CAR = "car"
    TRUCK = "truck"

    @property
    def rank(self) -> int:
        return _CLASS_RANK[self]

    @property
    def short(self) -> str:
        return self.value[0].upper()


_CLASS_RANK = {VehicleClass.MOTORCYCLE: 0, VehicleClass.CAR: 1, VehicleClass.TRUCK: 2}


class Phase(str, Enum):
    WAITING = "waiting"
    PREFILLING = "prefilling"
    DECODING = "decoding"
    PREEMPTED = "preempted"
    FINISHED = "finished"


class Event(str, Enum):
    SCHEDULE = "schedule"
    PREFILL = "prefill"
    DECODE = "decode"
    PREEMPT = "preempt"
    FINISH = "finish"


@dataclass(slots=True, eq=False)
class Request:
    """One inference job.

    ``phase`` together with ``tokens_done`` / ``tokens_generated`` encodes the
    lifecycle state; mutate it only through :func:`advance_state`.
    ``output_tokens`` is ground truth and must not be read by schedulers.
    """

    id: int
    modality: Modality
    arrival_time: float
    prompt_tokens: int
    media_tokens: int
    media_size: float
    output_tokens: int
    vclass: Optional[VehicleClass] = None
    phase: Phase = Phase.WAITING
    tokens_done: int = 0
    tokens_generated: int = 0

    def __post_init__(self) -> None:
        self.modality = Modality(self.modality)
        if self.prompt_tokens < 1:
            raise InvalidRequest(f"request {self.id}: prompt_tokens must be >= 1")
        if self.media_tokens < 0:
            raise InvalidRequest(f"request {self.id}: media_tokens must be >= 0")
        if self.modality is Modality.TEXT and self.media_tokens != 0:
            raise InvalidRequest(f"request {self.id}: text request with media tokens")
        if self.output_tokens < 1:
            raise InvalidRequest(f"request {self.id}: output_tokens must be >= 1")
        if not self.arrival_time >= 0:
            raise InvalidRequest(f"request {self.id}: negative arrival_time")

    @property
    def footprint(self) -> int:
        """Prefill footprint in KV tokens (prompt plus encoder output)."""
        return self.prompt_tokens + self.media_tokens

    @property
    def kv_tokens(self) -> int:
        """KV tokens held while running: prefill footprint plus generated tokens."""
        return self.footprint + self.tokens_generated

    @property
    def remaining_prefill(self) -> int:
        return self.footprint - self.tokens_done

    @property
    def state(self) -> Tuple[Phase, int]:
        """Compact ``(phase, counter)`` view, e.g. ``(PREFILLING, tokens_done)``."""
        if self.phase is Phase.PREFILLING:
            return (self.phase, self.tokens_done)
        if self.phase in (Phase.DECODING, Phase.PREEMPTED, Phase.FINISHED):
            return (self.phase, self.tokens_generated)
        return (self.phase, 0)

    def fresh_copy(self) -> "Request":
        """Copy with lifecycle state reset to Waiting (class assignment dropped)."""
        return Request(
            id=self.id,
            modality=self.modality,
            arrival_time=self.arrival_time,
            prompt_tokens=self.prompt_tokens,
            media_tokens=self.media_tokens,
            media_size=self.media_size,
            output_tokens=self.output_tokens,
        )


def advance_state(request: Request, event: Event, tokens: int = 0) -> Request:
    """Apply one lifecycle event to ``request`` in place and return it.

    ``tokens`` is the chunk size for :attr:`Event.PREFILL`. The final prefill
    chunk emits the first output token, so it moves the request straight to
    Decoding. A preempted request restarts prefill from zero but keeps its
    generated-token count.
    """
    phase = request.phase
    if event is Event.SCHEDULE:
        if phase is Phase.WAITING or phase is Phase.PREEMPTED:
            request.phase = Phase.PREFILLING
            request.tokens_done = 0
            return request
    elif event is Event.PREFILL:
        if phase is Phase.PREFILLING:
            if tokens < 1 or request.tokens_done + tokens > request.footprint:
                raise IllegalTransition(
                    f"request {request.id}: prefill chunk {tokens} with "
                    f"{request.remaining_prefill} tokens remaining"
                )
            completes = request.tokens_done + tokens == request.footprint
            if completes and request.tokens_generated >= request.output_tokens:
                raise IllegalTransition(f"request {request.id}: no output left to emit")
            request.tokens_done += tokens
            if completes:
                request.phase = Phase.DECODING
                request.tokens_generated += 1
            return request
    elif event is Event.DECODE:
        if phase is Phase.DECODING:
            if request.tokens_generated >= request.output_tokens:
                raise IllegalTransition(f"request {request.id}: decode past output_tokens")
            request.tokens_generated += 1
            return request
    elif event is Event.PREEMPT:
        # a request with all output emitted is finished, not preemptible
        if (phase is Phase.PREFILLING or phase is Phase.DECODING) and request.tokens_generated < request.output_tokens:
            request.phase = Phase.PREEMPTED
            request.tokens_done = 0
            return request
    elif event is Event.FINISH:
        if phase is Phase.DECODING and request.tokens_generated == request.output_tokens:
            request.phase = Phase.FINISHED
            return request
    raise IllegalTransition(f"request {request.id}: {event.value} not allowed in {phase.value}")


@dataclass(frozen=True)
class ClassPriority:
    static: float
    k: float
    p: float


@dataclass(frozen=True)
class PriorityParams:
    """Per-class constants of the aging priority ``static + (1 - exp(-k * wait**p))``."""

    motorcycle: ClassPriority = ClassPriority(0.1, 0.05, 3.5)
    car: ClassPriority = ClassPriority(0.05, 0.003, 2.5)
    truck: ClassPriority = ClassPriority(0.0, 0.00075, 1.1)

    def __post_init__(self) -> None:
        m, c, t = self.motorcycle, self.car, self.truck
        for attr in ("static", "k", "p"):
            a, b, z = getattr(m, attr), getattr(c, attr), getattr(t, attr)
            if min(a, b, z) < 0:
                raise InvalidConfig(f"priority {attr} must be >= 0")
            if not a > b > z:
                raise InvalidConfig(f"priority {attr} must decrease motorcycle > car > truck")

    def for_class(self, vclass: VehicleClass) -> ClassPriority:
        if vclass is VehicleClass.MOTORCYCLE:
            return self.motorcycle
        if vclass is VehicleClass.CAR:
            return self.car
        return self.truck

    def to_dict(self) -> Dict[str, Dict[str, float]]:
        return {
            c.value: {"static": cp.static, "k": cp.k, "p": cp.p}
            for c, cp in ((VehicleClass(n), getattr(self, n)) for n in ("motorcycle", "car", "truck"))
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Dict[str, float]]) -> "PriorityParams":
        base = cls()
        kwargs = {}
        for name in ("motorcycle", "car", "truck"):
            cur = getattr(base, name)
            over = data.get(name, {})
            kwargs[name] = ClassPriority(
                float(over.get("static", cur.static)),
                float(over.get("k", cur.k)),
                float(over.get("p", cur.p)),
            )
        return cls(**kwargs)


POLICY_NAMES = ("fcfs", "edf", "naive-aging", "static-naive", "static-smart", "tcm")

MIX_PRESETS: Dict[str, Tuple[float, float, float]] = {
    "TO": (1.0, 0.0, 0.0),
    "ML": (0.90, 0.07, 0.03),
    "MH": (0.60, 0.25, 0.15),
}


def check_mix(mix) -> Tuple[float, float, float]:
    if isinstance(mix, str):
        try:
            return MIX_PRESETS[mix.upper()]
        except KeyError:
            raise InvalidConfig(f"unknown mix preset {mix!r}") from None
    fr = tuple(float(x) for x in mix)
    if len(fr) != 3 or any(not 0.0 <= x <= 1.0 for x in fr):
        raise InvalidConfig(f"mix must be three fractions in [0, 1], got {mix!r}")
    if abs(sum(fr) - 1.0) > 1e-9:
        raise InvalidConfig(f"mix fractions must sum to 1, got {sum(fr)}")
    return fr  # type: ignore[return-value]


@dataclass(frozen=True)
class SimConfig:
    request_rate: float = 2.0
    duration: float = 300.0
    workload_mix: Tuple[float, float, float] = MIX_PRESETS["MH"]
    kv_capacity: int = 131072
    chunk_budget: int = 2048
    slo_scale: float = 5.0
    policy: str = "tcm"
    seed: int = 0
    priority_params: PriorityParams = field(default_factory=PriorityParams)

    def __post_init__(self) -> None:
        object.__setattr__(self, "workload_mix", check_mix(self.workload_mix))
        for name in ("request_rate", "duration", "kv_capacity", "chunk_budget", "slo_scale"):
            val = getattr(self, name)
            if not (isinstance(val, (int, float)) and math.isfinite(val) and val > 0):
                raise InvalidConfig(f"{name} must be > 0, got {val!r}")
        if self.policy not in POLICY_NAMES:
            raise InvalidConfig(f"unknown policy {self.policy!r}; expected one of {POLICY_NAMES}")
