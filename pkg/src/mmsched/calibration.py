"""Workload profiling and prefill-impact estimation.

Profiling runs every request alone against the cost model and records its
stage times. From those samples we fit one latency model per modality:
ordinary least squares for text, and 0.9-quantile (pinball loss) regression
for images and videos so that heavy visual requests are not underestimated.
KV footprint is never learned; it is the exact token count.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import MmschedError, Modality, Request
from .costmodel import ModelProfile, isolated_prefill, noise_factor, stage_costs
from .workload import Trace, WorkloadSpec, generate


class InsufficientData(MmschedError):
    pass


class DegenerateDesign(MmschedError):
    pass


MIN_TEXT_SAMPLES = 2
MIN_VISUAL_SAMPLES = 10


@dataclass(frozen=True)
class ProfileSample:
    modality: Modality
    prompt_tokens: int
    media_tokens: int
    media_size: float
    preprocess_time: float
    encode_time: float
    prefill_time: float
    footprint_tokens: int

    @property
    def first_token_time(self) -> float:
        """Isolated time to first token: preprocess + encode + prefill."""
        return self.preprocess_time + self.encode_time + self.prefill_time


@dataclass(frozen=True)
class ImpactEstimate:
    prefill_latency: float
    kv_footprint: int


Line = Tuple[float, float]  # (intercept, slope)


@dataclass(frozen=True)
class Estimators:
    """Fitted per-modality prefill-latency lines over footprint tokens.

    The target is the isolated time to first token, so the visual lines fold
    preprocess and encode time into the intercept and slope.
    """

    text: Line
    image: Line
    video: Line
    quantile: float = 0.9

    def line(self, modality: Modality) -> Line:
        return {Modality.TEXT: self.text, Modality.IMAGE: self.image, Modality.VIDEO: self.video}[modality]

    def to_dict(self) -> dict:
        return {"text": list(self.text), "image": list(self.image), "video": list(self.video), "quantile": self.quantile}

    @classmethod
    def from_dict(cls, data: dict) -> "Estimators":
        return cls(tuple(data["text"]), tuple(data["image"]), tuple(data["video"]), float(data.get("quantile", 0.9)))


def profile(
    model: ModelProfile,
    sample_trace: Trace,
    chunk_budget: int,
    rng: Optional[np.random.Generator] = None,
) -> List[ProfileSample]:
    """Run each request alone and record its stage times, in trace order.

    With ``rng`` and a positive ``noise_cv`` every stage time carries
    multiplicative measurement noise; otherwise results are exact.
    """
    samples = []
    for r in sample_trace.requests:
        pre, enc = stage_costs(model, r, rng)
        prefill = isolated_prefill(model, r.footprint, chunk_budget)
        if rng is not None:
            prefill *= noise_factor(model.noise_cv, rng)
        samples.append(
            ProfileSample(r.modality, r.prompt_tokens, r.media_tokens, r.media_size, pre, enc, prefill, r.footprint)
        )
    return samples


def ols_fit(x: np.ndarray, y: np.ndarray) -> Line:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.ptp(x) == 0:
        raise DegenerateDesign("all predictor values are identical")
    design = np.column_stack([np.ones_like(x), x])
    (a, b), *_ = np.linalg.lstsq(design, y, rcond=None)
    return (float(a), float(b))


def pinball_loss(residuals: np.ndarray, tau: float) -> float:
    r = np.asarray(residuals, dtype=float)
    return float(np.mean(np.maximum(tau * r, (tau - 1.0) * r)))


def empirical_quantile(values: np.ndarray, tau: float) -> float:
    """Smallest value whose empirical CDF reaches ``tau``."""
    return float(np.quantile(np.asarray(values, dtype=float), tau, method="inverted_cdf"))


def quantile_fit(x: np.ndarray, y: np.ndarray, tau: float = 0.9, iterations: int = 10_000) -> Line:
    """Affine tau-quantile regression by subgradient descent on the pinball loss.

    Works on standardized data with step ``0.5 / sqrt(t + 1)`` and keeps the
    best iterate. The intercept is then set to the exact empirical
    tau-quantile of the residuals, which is optimal for the chosen slope. A
    constant predictor yields slope 0 and the plain empirical quantile.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    mx, sx = float(x.mean()), float(x.std())
    my, sy = float(y.mean()), float(y.std())
    if sy == 0:
        return (float(y[0]), 0.0)
    if sx == 0:
        return (empirical_quantile(y, tau), 0.0)
    z = (x - mx) / sx
    w = (y - my) / sy
    a, b = 0.0, 0.0
    best = (math.inf, a, b)
    for t in range(iterations):
        r = w - (a + b * z)
        loss = float(np.mean(np.maximum(tau * r, (tau - 1.0) * r)))
        if loss < best[0]:
            best = (loss, a, b)
        g = np.where(r > 0, -tau, 1.0 - tau)
        step = 0.5 / math.sqrt(t + 1.0)
        a -= step * float(g.mean())
        b -= step * float((g * z).mean())
    _, a, b = best
    slope = b * sy / sx
    intercept = empirical_quantile(y - slope * x, tau)
    return (intercept, slope)


def fit_estimators(samples: Sequence[ProfileSample], tau: float = 0.9) -> Estimators:
    by_mod: Dict[Modality, List[ProfileSample]] = {m: [] for m in Modality}
    for s in samples:
        by_mod[s.modality].append(s)
    text = by_mod[Modality.TEXT]
    if len(text) < MIN_TEXT_SAMPLES:
        raise InsufficientData(f"need >= {MIN_TEXT_SAMPLES} text samples, got {len(text)}")
    lines = {}
    lines[Modality.TEXT] = ols_fit([s.prompt_tokens for s in text], [s.first_token_time for s in text])
    for m in (Modality.IMAGE, Modality.VIDEO):
        group = by_mod[m]
        if len(group) < MIN_VISUAL_SAMPLES:
            raise InsufficientData(f"need >= {MIN_VISUAL_SAMPLES} {m.value} samples, got {len(group)}")
        x = np.array([s.footprint_tokens for s in group], dtype=float)
        if np.ptp(x) == 0:
            raise DegenerateDesign(f"all {m.value} footprints are identical")
        lines[m] = quantile_fit(x, np.array([s.first_token_time for s in group]), tau)
    return Estimators(lines[Modality.TEXT], lines[Modality.IMAGE], lines[Modality.VIDEO], tau)


def estimate(estimators: Estimators, request: Request) -> ImpactEstimate:
    footprint = request.footprint
    a, b = estimators.line(request.modality)
    return ImpactEstimate(max(0.0, a + b * footprint), footprint)


def profiling_trace(spec: WorkloadSpec, per_modality: int = 300, seed: int = 0) -> Trace:
    """Draw ``per_modality`` requests of each modality from ``spec``'s size distributions."""
    requests: List[Request] = []
    for i, mix in enumerate(((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))):
        sub = replace(spec, mix=mix, rate=1.0, duration=float(per_modality) * 4.0, seed=seed * 3 + i)
        drawn = generate(sub).requests
        while len(drawn) < per_modality:
            sub = replace(sub, duration=sub.duration * 2)
            drawn = generate(sub).requests
        for r in drawn[:per_modality]:
            requests.append(replace(r, id=len(requests), arrival_time=0.0))
    return Trace(requests, spec)


@dataclass
class Calibration:
    """Everything a class-aware policy needs at runtime for one model profile."""

    profile_name: str
    estimators: Estimators
    clusters: "object"

    def to_dict(self) -> dict:
        return {"profile": self.profile_name, "estimators": self.estimators.to_dict(), "clusters": self.clusters.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "Calibration":
        from .classifier import ClusterModel

        return cls(data["profile"], Estimators.from_dict(data["estimators"]), ClusterModel.from_dict(data["clusters"]))


def calibrate(
    model: ModelProfile,
    spec: Optional[WorkloadSpec] = None,
    chunk_budget: int = 2048,
    per_modality: int = 300,
    seed: int = 0,
) -> Calibration:
    """Profile ``model``, fit the estimators and train the request classifier."""
    from .classifier import train_clusters

    spec = spec or WorkloadSpec()
    trace = profiling_trace(spec, per_modality, seed)
    samples = profile(model, trace, chunk_budget, np.random.default_rng(seed))
    est = fit_estimators(samples)
    clusters = train_clusters(samples, est, seed)
    return Calibration(model.name, est, clusters)


def save_calibrations(path, calibrations: Dict[str, Calibration]) -> None:
    """Write calibrations keyed by model-profile name."""
    with open(path, "w") as fh:
        json.dump({name: c.to_dict() for name, c in sorted(calibrations.items())}, fh, indent=2, sort_keys=True)


def load_calibrations(path) -> Dict[str, Calibration]:
    with open(path) as fh:
        data = json.load(fh)
    return {name: Calibration.from_dict(d) for name, d in data.items()}
