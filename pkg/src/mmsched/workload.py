"""Open-loop Poisson workload generation over a text/image/video mix."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core import InvalidConfig, MmschedError, Modality, Request, check_mix

_MODALITIES = (Modality.TEXT, Modality.IMAGE, Modality.VIDEO)


class InfeasibleRequest(MmschedError):
    """A generated request cannot fit in the KV cache even when running alone."""


@dataclass(frozen=True)
class LogNormal:
    """Log-normal draw rounded to an integer and clipped to ``[lo, hi]``."""

    median: float
    sigma: float
    lo: int
    hi: int

    def draw(self, rng: np.random.Generator) -> int:
        x = rng.lognormal(math.log(self.median), self.sigma)
        return int(min(max(round(x), self.lo), self.hi))


@dataclass(frozen=True)
class WorkloadSpec:
    mix: Tuple[float, float, float] = (0.60, 0.25, 0.15)
    rate: float = 2.0
    duration: float = 300.0
    seed: int = 0
    text_prompt: LogNormal = LogNormal(256.0, 0.9, 10, 10_000)
    output: LogNormal = LogNormal(128.0, 0.7, 1, 2048)
    visual_prompt: LogNormal = LogNormal(40.0, 0.6, 5, 200)
    image_tokens: int = 729
    image_jitter: int = 64
    image_megapixels: Tuple[float, float] = (0.25, 4.0)
    video_frames: LogNormal = LogNormal(64.0, 0.5, 36, 200)
    tokens_per_frame: Tuple[int, int] = (576, 576)
    kv_capacity: Optional[int] = None
    strict: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "mix", check_mix(self.mix))
        if not (self.rate > 0 and self.duration > 0):
            raise InvalidConfig("rate and duration must be > 0")
        lo = self.image_tokens - self.image_jitter
        if isinstance(self.tokens_per_frame, (int, float)):
            object.__setattr__(self, "tokens_per_frame", (int(self.tokens_per_frame),) * 2)
        tpf_lo, tpf_hi = self.tokens_per_frame
        if lo < 0 or not 1 <= tpf_lo <= tpf_hi:
            raise InvalidConfig("image/video token parameters must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "WorkloadSpec":
        kwargs = dict(data)
        for key in ("text_prompt", "output", "visual_prompt", "video_frames"):
            if key in kwargs and isinstance(kwargs[key], dict):
                kwargs[key] = LogNormal(**kwargs[key])
        for key in ("mix", "image_megapixels", "tokens_per_frame"):
            if key in kwargs and not isinstance(kwargs[key], str):
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass
class Trace:
    """Requests sorted by arrival time plus optional isolated-latency annotations.

    ``isolated`` maps request id to ``(ttft, e2e)`` of the request running
    alone; it is filled by :func:`annotate` before simulation.
    """

    requests: List[Request]
    spec: Optional[WorkloadSpec] = None
    isolated: Dict[int, Tuple[float, float]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.requests)

    def __iter__(self):
        return iter(self.requests)


def _log_uniform_int(rng: np.random.Generator, lo: int, hi: int) -> int:
    if lo == hi:
        return lo
    return int(round(math.exp(rng.uniform(math.log(lo), math.log(hi)))))


def _clamp(rid, modality, prompt, media, output, frames, tpf, spec: WorkloadSpec):
    cap = spec.kv_capacity
    if cap is None or prompt + media + output <= cap:
        return prompt, media, output, frames
    if spec.strict:
        raise InfeasibleRequest(
            f"request {rid}: footprint {prompt + media} + output {output} exceeds kv capacity {cap}"
        )
    output = min(output, max(1, cap // 8))
    if modality is Modality.VIDEO:
        frames = max(1, min(frames, (cap - prompt - output) // tpf))
        media = frames * tpf
    if prompt + media + output > cap:
        prompt = max(1, cap - media - output)
    if prompt + media + output > cap:
        raise InfeasibleRequest(f"request {rid}: cannot be clamped into kv capacity {cap}")
    return prompt, media, output, frames


def generate(spec: WorkloadSpec) -> Trace:
    """Draw a Poisson-arrival trace. Same spec (including seed) gives the same trace."""
    rng = np.random.default_rng(spec.seed)
    probs = np.asarray(spec.mix, dtype=float)
    cdf = np.cumsum(probs)
    requests: List[Request] = []
    t = 0.0
    while True:
        t += float(rng.exponential(1.0 / spec.rate))
        if t > spec.duration:
            break
        rid = len(requests)
        u = float(rng.random())
        modality = _MODALITIES[min(int(np.searchsorted(cdf, u, side="right")), 2)]
        frames = 0
        tpf = 1
        if modality is Modality.TEXT:
            prompt = spec.text_prompt.draw(rng)
            media = 0
            size = 4.0 * prompt  # characters, ~4 per token
        elif modality is Modality.IMAGE:
            prompt = spec.visual_prompt.draw(rng)
            media = spec.image_tokens + int(rng.integers(-spec.image_jitter, spec.image_jitter + 1))
            size = float(rng.uniform(*spec.image_megapixels))
        else:
            prompt = spec.visual_prompt.draw(rng)
            frames = spec.video_frames.draw(rng)
            tpf = _log_uniform_int(rng, *spec.tokens_per_frame)
            media = frames * tpf
            size = 0.0
        output = spec.output.draw(rng)
        prompt, media, output, frames = _clamp(rid, modality, prompt, media, output, frames, tpf, spec)
        if modality is Modality.VIDEO:
            size = float(frames)
        requests.append(Request(rid, modality, t, prompt, media, size, output))
    return Trace(requests, spec)


def annotate(trace: Trace, profile, chunk_budget: int) -> Trace:
    """Fill ``trace.isolated`` with noise-free isolated ``(ttft, e2e)`` per request."""
    from .costmodel import isolated_e2e

    trace.isolated = {r.id: isolated_e2e(profile, r, chunk_budget) for r in trace.requests}
    return trace


_FIELDS = ("id", "modality", "arrival_time", "prompt_tokens", "media_tokens", "media_size", "output_tokens")


def request_to_json(r: Request) -> dict:
    return {
        "id": r.id,
        "modality": r.modality.value,
        "arrival_time": r.arrival_time,
        "prompt_tokens": r.prompt_tokens,
        "media_tokens": r.media_tokens,
        "media_size": r.media_size,
        "output_tokens": r.output_tokens,
    }


def dump_trace(trace: Trace, path) -> None:
    """Write one JSON object per request. Isolated annotations, when present,
    are stored as ``isolated_ttft`` / ``isolated_e2e``."""
    with open(path, "w") as fh:
        for r in trace.requests:
            row = request_to_json(r)
            if r.id in trace.isolated:
                row["isolated_ttft"], row["isolated_e2e"] = trace.isolated[r.id]
            fh.write(json.dumps(row) + "\n")


def load_trace(path) -> Trace:
    requests: List[Request] = []
    isolated: Dict[int, Tuple[float, float]] = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            requests.append(Request(**{k: row[k] for k in _FIELDS}))
            if "isolated_e2e" in row:
                isolated[row["id"]] = (row["isolated_ttft"], row["isolated_e2e"])
    requests.sort(key=lambda r: (r.arrival_time, r.id))
    return Trace(requests, None, isolated)
