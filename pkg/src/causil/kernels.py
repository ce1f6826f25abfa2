"""Gaussian RBF kernels on standardized inputs, with the median heuristic."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from . import _accel
from .errors import DegenerateSample

# pairwise distances for the median heuristic are computed on at most this many points
MEDIAN_MAX_POINTS = 3000


def as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(len(x), -1) if x.ndim != 2 else x


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = as_2d(X)
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        return cls(mean, scale)

    def transform(self, X) -> np.ndarray:
        return (as_2d(X) - self.mean) / self.scale

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["scale"], dtype=float))


def median_bandwidth(X) -> float:
    """Median pairwise Euclidean distance.

    Beyond ``MEDIAN_MAX_POINTS`` rows an evenly strided subset is used, which
    keeps the result deterministic.
    """
    X = as_2d(X)
    if len(X) < 2:
        raise DegenerateSample("need at least two points for the median heuristic")
    if len(X) > MEDIAN_MAX_POINTS:
        X = X[np.linspace(0, len(X) - 1, MEDIAN_MAX_POINTS).astype(int)]
    h = float(np.median(pdist(X)))
    if not h > 0:
        raise DegenerateSample("median pairwise distance is zero (all points identical)")
    return h


def rbf(X, Y, bandwidth: float) -> np.ndarray:
    """``exp(-|x - y|^2 / (2 h^2))`` for every pair of rows."""
    return _accel.rbf_gram(np.ascontiguousarray(as_2d(X)), np.ascontiguousarray(as_2d(Y)), float(bandwidth))


def resolve_bandwidth(spec, X) -> float:
    if spec == "median-heuristic":
        return median_bandwidth(X)
    h = float(spec)
    if not h > 0:
        raise ValueError(f"bandwidth must be positive, got {spec!r}")
    return h
