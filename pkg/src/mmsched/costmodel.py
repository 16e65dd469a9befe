"""Synthetic per-stage cost model standing in for a GPU-served multimodal LLM.

All latencies are affine in their inputs. Coefficients are calibration
choices picked so that isolated latencies fall in the usual per-modality
bands (text TTFT in tens of milliseconds, images under a second, videos
between one and ten seconds); they are not measurements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .core import MmschedError, Modality, Request

Affine = Tuple[float, float]


class EmptyIteration(MmschedError):
    pass


def _default_preprocess() -> Dict[Modality, Affine]:
    return {Modality.TEXT: (0.0, 0.0), Modality.IMAGE: (0.05, 0.02), Modality.VIDEO: (0.1, 0.008)}


def _default_encode() -> Dict[Modality, Affine]:
    return {Modality.TEXT: (0.0, 0.0), Modality.IMAGE: (0.08, 0.02), Modality.VIDEO: (0.2, 0.008)}


@dataclass(frozen=True)
class ModelProfile:
    """Cost coefficients of one synthetic model.

    ``preprocess`` and ``encode`` map a modality to ``(base seconds, seconds per
    media unit)``; media units are megapixels for images and frames for video.
    """

    name: str = "synthetic-7b"
    iter_overhead: float = 0.005
    prefill_cost: float = 2e-5
    decode_cost: float = 5e-4
    preprocess: Mapping[Modality, Affine] = field(default_factory=_default_preprocess)
    encode: Mapping[Modality, Affine] = field(default_factory=_default_encode)
    noise_cv: float = 0.1

    def __post_init__(self) -> None:
        coeffs = [self.iter_overhead, self.prefill_cost, self.decode_cost, self.noise_cv]
        for table in (self.preprocess, self.encode):
            for pair in table.values():
                coeffs.extend(pair)
        if any(c < 0 or not math.isfinite(c) for c in coeffs):
            raise ValueError(f"profile {self.name}: cost coefficients must be finite and >= 0")
        if any(self.preprocess.get(Modality.TEXT, (0, 0))) or any(self.encode.get(Modality.TEXT, (0, 0))):
            raise ValueError(f"profile {self.name}: text preprocess/encode must be zero")

    def without_noise(self) -> "ModelProfile":
        return ModelProfile(
            self.name, self.iter_overhead, self.prefill_cost, self.decode_cost,
            dict(self.preprocess), dict(self.encode), 0.0,
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "iter_overhead": self.iter_overhead,
            "prefill_cost": self.prefill_cost,
            "decode_cost": self.decode_cost,
            "preprocess": {m.value: list(v) for m, v in self.preprocess.items()},
            "encode": {m.value: list(v) for m, v in self.encode.items()},
            "noise_cv": self.noise_cv,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelProfile":
        base = cls()
        pre = dict(base.preprocess)
        enc = dict(base.encode)
        pre.update({Modality(k): (float(v[0]), float(v[1])) for k, v in data.get("preprocess", {}).items()})
        enc.update({Modality(k): (float(v[0]), float(v[1])) for k, v in data.get("encode", {}).items()})
        return cls(
            name=str(data.get("name", base.name)),
            iter_overhead=float(data.get("iter_overhead", base.iter_overhead)),
            prefill_cost=float(data.get("prefill_cost", base.prefill_cost)),
            decode_cost=float(data.get("decode_cost", base.decode_cost)),
            preprocess=pre,
            encode=enc,
            noise_cv=float(data.get("noise_cv", base.noise_cv)),
        )


def noise_factor(noise_cv: float, rng: Optional[np.random.Generator]) -> float:
    """Log-normal multiplier with mean 1 and coefficient of variation ``noise_cv``."""
    if noise_cv <= 0 or rng is None:
        return 1.0
    sigma2 = math.log1p(noise_cv * noise_cv)
    return float(rng.lognormal(-0.5 * sigma2, math.sqrt(sigma2)))


def stage_costs(
    profile: ModelProfile, request: Request, rng: Optional[np.random.Generator] = None
) -> Tuple[float, float]:
    """Return ``(preprocess, encode)`` seconds for ``request``.

    Text requests cost exactly zero. Noise is applied only when ``rng`` is
    given and the profile's ``noise_cv`` is positive; two draws are consumed
    per visual request in that case.
    """
    if request.modality is Modality.TEXT:
        return (0.0, 0.0)
    pb, pu = profile.preprocess[request.modality]
    eb, eu = profile.encode[request.modality]
    pre = pb + pu * request.media_size
    enc = eb + eu * request.media_size
    if profile.noise_cv > 0 and rng is not None:
        pre *= noise_factor(profile.noise_cv, rng)
        enc *= noise_factor(profile.noise_cv, rng)
    return (pre, enc)


def iteration_time(
    profile: ModelProfile,
    prefill_tokens: int,
    decode_seqs: int,
    inline_stage_seconds: float = 0.0,
) -> float:
    """Wall time of one batched model iteration."""
    if prefill_tokens < 0 or decode_seqs < 0:
        raise ValueError("token and sequence counts must be >= 0")
    if prefill_tokens == 0 and decode_seqs == 0:
        raise EmptyIteration("iteration with no prefill tokens and no decode sequences")
    return (
        inline_stage_seconds
        + profile.iter_overhead
        + profile.prefill_cost * prefill_tokens
        + profile.decode_cost * decode_seqs
    )


def prefill_chunks(footprint: int, chunk_budget: int):
    """Chunk sizes of an uncontended chunked prefill."""
    full, rest = divmod(footprint, chunk_budget)
    chunks = [chunk_budget] * full
    if rest:
        chunks.append(rest)
    return chunks


def isolated_prefill(profile: ModelProfile, footprint: int, chunk_budget: int) -> float:
    """LLM prefill time of a lone request, excluding preprocess and encode."""
    t = 0.0
    for chunk in prefill_chunks(footprint, chunk_budget):
        t += iteration_time(profile, chunk, 0)
    return t


def isolated_e2e(profile: ModelProfile, request: Request, chunk_budget: int) -> Tuple[float, float]:
    """Closed-form ``(ttft, e2e)`` of ``request`` running alone, noise disabled.

    Accumulates iteration times in the same order the engine does, so a
    single-request simulation reproduces these values bit for bit.
    """
    pre, enc = stage_costs(profile, request, None)
    inline = pre + enc
    t = 0.0
    for i, chunk in enumerate(prefill_chunks(request.footprint, chunk_budget)):
        t += iteration_time(profile, chunk, 0, inline if i == 0 else 0.0)
    ttft = t
    for _ in range(request.output_tokens - 1):
        t += iteration_time(profile, 0, 1)
    return (ttft, t)
