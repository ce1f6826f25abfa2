"""Behavioral-cloning baselines.

BC1 conditions on the current state only; BC2 also sees the lagged context,
either ``(s, w)`` or ``(s, z, w)``. Categorical samples give conditional-mode
tables; continuous samples give kernel ridge regression on one-hot labels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .core import CATEGORICAL, CONTINUOUS, PolicyArtifact, PooledSample, argmax_lowest, policy_inputs
from .errors import DomainError, EmptyInput, NumericError, ShapeError
from .kernels import Standardizer, as_2d, median_bandwidth, rbf

VARIANTS = ("bc1", "bc2")
DEFAULT_RIDGE = 1e-3


@dataclass(frozen=True)
class BcConfig:
    variant: str = "bc1"
    regime: str = CATEGORICAL
    context: str = "s,z,w"
    ridge: float = DEFAULT_RIDGE
    bandwidth: float | str = "median-heuristic"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DomainError(f"unknown BC variant {self.variant!r}")
        if self.regime not in (CATEGORICAL, CONTINUOUS):
            raise DomainError(f"unknown regime {self.regime!r}")
        if self.context not in ("s,w", "s,z,w"):
            raise DomainError(f"BC2 context must be 's,w' or 's,z,w', got {self.context!r}")
        if not self.ridge > 0:
            raise DomainError("ridge penalty must be positive")

    @property
    def signature(self) -> str:
        return "s" if self.variant == "bc1" else self.context


def _signature(variant: str, context: str) -> str:
    return BcConfig(variant=variant, context=context).signature


def fit_bc_discrete(sample: PooledSample, variant: str = "bc1", context: str = "s,z,w") -> PolicyArtifact:
    """Conditional-mode table of ``A`` given the covariate cell.

    Cells never observed get the global modal action; ties go to the lowest
    action index.
    """
    if sample.N == 0:
        raise EmptyInput("empty sample")
    if sample.kind != CATEGORICAL or sample.cards is None:
        raise DomainError("tabular BC needs a categorical sample with cardinalities")
    sig = _signature(variant, context)
    c = sample.cards
    sizes = {"s": c.k_s, "z": c.k_s, "w": c.k_w}
    domain = tuple(sizes[k] for k in sig.split(","))
    cols = [np.asarray(x, dtype=np.int64) for x in policy_inputs(sample, sig)]
    cell = np.ravel_multi_index(tuple(cols), domain)
    counts = np.zeros((int(np.prod(domain)), c.k_a))
    np.add.at(counts, (cell, np.asarray(sample.a)), 1.0)
    seen = np.flatnonzero(counts.sum(axis=1))
    modes = argmax_lowest(counts[seen])
    table = {tuple(int(v) for v in np.unravel_index(i, domain)): int(a) for i, a in zip(seen, np.atleast_1d(modes))}
    mode = int(argmax_lowest(np.bincount(sample.a, minlength=c.k_a).astype(float)))
    meta = {"unseen_cells": "global-mode", "n_cells_seen": int(len(seen)), "n_cells": int(np.prod(domain))}
    return PolicyArtifact(variant, sig, c.k_a, table=table, domain=domain, default_action=mode, metadata=meta)


@dataclass
class KernelRidgeScorer:
    """Kernel ridge regression of one-hot labels, ``(K + N lam I) beta = Y``."""

    standardizer: Standardizer
    bandwidth: float
    ridge: float
    support: np.ndarray
    beta: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.support = as_2d(self.support)
        self.beta = as_2d(self.beta)
        if self.beta.shape[0] != len(self.support):
            raise ShapeError("one coefficient row per support point expected")

    @property
    def n_actions(self) -> int:
        return self.beta.shape[1]

    def scores(self, X) -> np.ndarray:
        X = as_2d(X)
        if X.shape[1] != self.support.shape[1]:
            raise ShapeError(f"input dimension {X.shape[1]} does not match {self.support.shape[1]}")
        return rbf(self.standardizer.transform(X), self.support, self.bandwidth) @ self.beta

    def to_dict(self) -> dict:
        return {
            "type": "kernel_ridge", "standardizer": self.standardizer.to_dict(),
            "bandwidth": self.bandwidth, "ridge": self.ridge,
            "support": self.support.tolist(), "beta": self.beta.tolist(), "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelRidgeScorer":
        return cls(Standardizer.from_dict(d["standardizer"]), float(d["bandwidth"]), float(d["ridge"]),
                   np.asarray(d["support"], dtype=float), np.asarray(d["beta"], dtype=float),
                   d.get("diagnostics", {}))


def fit_kernel_ridge(X, a, k_a: int, ridge: float = DEFAULT_RIDGE, bandwidth="median-heuristic") -> KernelRidgeScorer:
    X = as_2d(X)
    N = len(X)
    std = Standardizer.fit(X)
    Xs = std.transform(X)
    h = median_bandwidth(Xs) if bandwidth == "median-heuristic" else float(bandwidth)
    K = rbf(Xs, Xs, h)
    Y = (np.asarray(a)[:, None] == np.arange(k_a)[None, :]).astype(float)
    beta = sla.solve(K + N * ridge * np.eye(N), Y, assume_a="pos")
    if not np.all(np.isfinite(beta)):
        raise NumericError("kernel ridge produced non-finite coefficients")
    return KernelRidgeScorer(std, h, ridge, Xs, beta)


def fit_bc_continuous(sample: PooledSample, variant: str = "bc1", config: BcConfig | None = None) -> PolicyArtifact:
    """Kernel ridge on one-hot labels; the policy takes the argmax score."""
    if sample.N == 0:
        raise EmptyInput("empty sample")
    config = config or BcConfig(variant=variant, regime=CONTINUOUS)
    sig = _signature(variant, config.context)
    X = np.hstack([as_2d(c) for c in policy_inputs(sample, sig)])
    k_a = max(sample.n_actions, 1)
    scorer = fit_kernel_ridge(X, sample.a, k_a, config.ridge, config.bandwidth)
    return PolicyArtifact(variant, sig, k_a, scorer=scorer, metadata={"ridge": config.ridge})


def fit_bc(sample: PooledSample, variant: str = "bc1", context: str = "s,z,w") -> PolicyArtifact:
    """Dispatch on the sample kind."""
    if sample.kind == CATEGORICAL:
        return fit_bc_discrete(sample, variant, context)
    return fit_bc_continuous(sample, variant, BcConfig(variant=variant, regime=CONTINUOUS, context=context))
