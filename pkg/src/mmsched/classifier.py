"""Request classification into motorcycles, cars and trucks.

The naive rule maps modality to class. The smart rule clusters requests in
(log10 estimated prefill latency, log10 KV footprint) space with k-means and
labels the clusters by size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .calibration import Estimators, ImpactEstimate, InsufficientData, ProfileSample, estimate
from .core import MmschedError, Modality, Request, VehicleClass

_BY_SIZE = (VehicleClass.MOTORCYCLE, VehicleClass.CAR, VehicleClass.TRUCK)
_NAIVE = {Modality.TEXT: VehicleClass.MOTORCYCLE, Modality.IMAGE: VehicleClass.CAR, Modality.VIDEO: VehicleClass.TRUCK}


class DegenerateClusters(MmschedError):
    pass


def classify_naive(request: Request) -> VehicleClass:
    return _NAIVE[request.modality]


@dataclass(frozen=True)
class ClusterModel:
    """Three centroids in standardized log-feature space, ordered motorcycle, car, truck."""

    centroids: Tuple[Tuple[float, float], ...]
    mean: Tuple[float, float]
    std: Tuple[float, float]
    labels: Tuple[VehicleClass, ...] = _BY_SIZE

    def standardize(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=float) - np.asarray(self.mean)) / np.asarray(self.std)

    def raw_centroid(self, vclass: VehicleClass) -> Tuple[float, float]:
        """Centroid of ``vclass`` mapped back to ``(prefill_latency, kv_footprint)``."""
        c = np.asarray(self.centroids[self.labels.index(vclass)]) * np.asarray(self.std) + np.asarray(self.mean)
        return (10.0 ** c[0], 10.0 ** c[1])

    def to_dict(self) -> dict:
        return {
            "centroids": [list(c) for c in self.centroids],
            "mean": list(self.mean),
            "std": list(self.std),
            "labels": [c.value for c in self.labels],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ClusterModel":
        return cls(
            tuple(tuple(float(v) for v in c) for c in data["centroids"]),
            tuple(float(v) for v in data["mean"]),
            tuple(float(v) for v in data["std"]),
            tuple(VehicleClass(v) for v in data["labels"]),
        )


def log_features(prefill_latency: float, kv_footprint: float) -> Tuple[float, float]:
    # floor keeps a zero estimate finite
    return (math.log10(max(prefill_latency, 1e-9)), math.log10(max(kv_footprint, 1.0)))


def _farthest_point_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[int(rng.integers(len(x)))]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.asarray(centers)[None, :, :]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total == 0:
            break
        centers.append(x[int(rng.choice(len(x), p=d2 / total))])
    return np.asarray(centers)


def lloyd(
    x: np.ndarray, centers: np.ndarray, max_iter: int = 100, tol: float = 1e-6
) -> Tuple[np.ndarray, np.ndarray, List[float]]:
    """Lloyd iterations from ``centers``. Returns (centers, assignment, objective history)."""
    history = []
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        assign = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(x)), assign].sum()))
        new = centers.copy()
        for j in range(len(centers)):
            members = x[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
        shift = float(np.abs(new - centers).max())
        centers = new
        if shift < tol:
            break
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    assign = d2.argmin(axis=1)
    history.append(float(d2[np.arange(len(x)), assign].sum()))
    return centers, assign, history


def kmeans(x: np.ndarray, k: int = 3, restarts: int = 10, seed: int = 0, max_iter: int = 100, tol: float = 1e-6):
    """Best-of-``restarts`` k-means. Returns (centers, assignment, objective)."""
    x = np.asarray(x, dtype=float)
    if len(np.unique(x, axis=0)) < k:
        raise DegenerateClusters(f"need at least {k} distinct points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        init = _farthest_point_init(x, k, rng)
        if len(init) < k:
            continue
        centers, assign, hist = lloyd(x, init, max_iter, tol)
        if len(np.unique(assign)) < k:
            continue
        if best is None or hist[-1] < best[2]:
            best = (centers, assign, hist[-1])
    if best is None:
        raise DegenerateClusters("k-means failed to find three non-empty clusters")
    return best


def fit_clusters(features: np.ndarray, seed: int = 0) -> ClusterModel:
    """Standardize raw 2-D features, run k-means with k=3, label clusters by size."""
    f = np.asarray(features, dtype=float)
    if len(f) < 3:
        raise InsufficientData("need at least 3 samples to form three clusters")
    if len(np.unique(f, axis=0)) < 3:
        raise DegenerateClusters("fewer than 3 distinct feature points")
    mean = f.mean(axis=0)
    std = f.std(axis=0)
    std[std == 0] = 1.0
    z = (f - mean) / std
    centers, _, _ = kmeans(z, 3, 10, seed)
    order = np.argsort(centers.sum(axis=1), kind="stable")
    ordered = tuple(tuple(float(v) for v in centers[i]) for i in order)
    return ClusterModel(ordered, (float(mean[0]), float(mean[1])), (float(std[0]), float(std[1])))


def train_clusters(samples: Sequence[ProfileSample], estimators: Estimators, seed: int = 0) -> ClusterModel:
    """Train on the runtime features: estimated prefill latency and exact footprint."""
    if len(samples) < 3:
        raise InsufficientData("need at least 3 profiling samples")
    feats = []
    for s in samples:
        a, b = estimators.line(s.modality)
        feats.append(log_features(max(0.0, a + b * s.footprint_tokens), s.footprint_tokens))
    return fit_clusters(np.array(feats), seed)


def classify_smart(model: ClusterModel, est: ImpactEstimate) -> VehicleClass:
    """Nearest centroid; exact ties go to the larger class."""
    z = model.standardize(log_features(est.prefill_latency, est.kv_footprint))
    d2 = ((np.asarray(model.centroids) - z) ** 2).sum(axis=1)
    best = None
    for i, d in enumerate(d2):
        cls = model.labels[i]
        key = (float(d), -cls.rank)
        if best is None or key < best[0]:
            best = (key, cls)
    return best[1]


def classify_request(model: ClusterModel, estimators: Estimators, request: Request) -> VehicleClass:
    return classify_smart(model, estimate(estimators, request))
