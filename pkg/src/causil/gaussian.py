"""Static linear-Gaussian model with closed-form targets.

``U ~ N(mu, sigma_u2)``, ``S = alpha U + eps_S``, ``W = U + eps_W`` and the
expert acts as ``A = 1{beta_s S + beta_u U >= c}``. The optimal policy, the
state-only clone and the proxy-aware clone all have closed forms, so the model
serves as an oracle for the continuous estimators.

The ``z`` column of a sample is a second, conditionally independent copy of the
state channel driven by the same ``U``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.special import ndtr

from . import rng
from .core import CONTINUOUS, Episode, PolicyArtifact, PooledSample, TrajectoryBatch
from .errors import DomainError, SingularError


@dataclass(frozen=True)
class GaussianDgpParams:
    mu: float = 0.0
    sigma_u2: float = 1.0
    alpha: float = 1.0
    sigma_s2: float = 1.0
    sigma_w2: float = 1.0
    beta_s: float = 1.0
    beta_u: float = 1.0
    c: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma_u2", "sigma_s2", "sigma_w2"):
            v = getattr(self, name)
            if not v > 0:
                raise DomainError(f"{name} must be positive, got {v}")
        if not self.beta_u > 0:
            raise DomainError(f"beta_u must be positive, got {self.beta_u}")

    def with_seed(self, seed: int) -> "GaussianDgpParams":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianDgpParams":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def gaussian_default(seed: int = 0) -> GaussianDgpParams:
    """Reference fixture: all unit variances, ``alpha = 1``, unit betas, ``c = 0.5``."""
    return GaussianDgpParams(seed=seed)


def sample_gaussian(params: GaussianDgpParams, n: int, seed: int | None = None) -> PooledSample:
    """Draw ``n`` i.i.d. tuples; each tuple is its own episode."""
    if n < 1:
        raise DomainError("n must be at least 1")
    seed = params.seed if seed is None else seed
    g_u = rng.stream(seed, 0, rng.CH_LATENT)
    g_s = rng.stream(seed, 0, rng.CH_STATE)
    g_w = rng.stream(seed, 0, rng.CH_PROXY)
    g_z = rng.stream(seed, 0, rng.CH_AUX)
    u = params.mu + math.sqrt(params.sigma_u2) * g_u.standard_normal(n)
    s = params.alpha * u + math.sqrt(params.sigma_s2) * g_s.standard_normal(n)
    w = u + math.sqrt(params.sigma_w2) * g_w.standard_normal(n)
    z = params.alpha * u + math.sqrt(params.sigma_s2) * g_z.standard_normal(n)
    a = (params.beta_s * s + params.beta_u * u >= params.c).astype(np.int64)
    return PooledSample(
        z=z[:, None], s=s[:, None], w=w[:, None], a=a,
        episode=np.arange(n), t=np.ones(n, dtype=np.int64), u=u, kind=CONTINUOUS,
    )


def _step(x) -> np.ndarray | int:
    out = (np.asarray(x) >= 0).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def analytic_pi_opt(params: GaussianDgpParams, s):
    """``1{beta_s s + beta_u mu >= c}``."""
    s = np.asarray(s, dtype=float)
    return _step(params.beta_s * s + params.beta_u * params.mu - params.c)


def posterior_mean_s(params: GaussianDgpParams, s):
    """``E[U | S = s]``."""
    p = params
    gain = p.alpha * p.sigma_u2 / (p.alpha ** 2 * p.sigma_u2 + p.sigma_s2)
    return p.mu + gain * (np.asarray(s, dtype=float) - p.alpha * p.mu)


def posterior_var_s(params: GaussianDgpParams) -> float:
    """``Var[U | S]``."""
    p = params
    return p.sigma_u2 * p.sigma_s2 / (p.alpha ** 2 * p.sigma_u2 + p.sigma_s2)


def _sigma_yy(p: GaussianDgpParams) -> np.ndarray:
    return np.array([
        [p.alpha ** 2 * p.sigma_u2 + p.sigma_s2, p.alpha * p.sigma_u2],
        [p.alpha * p.sigma_u2, p.sigma_u2 + p.sigma_w2],
    ])


def posterior_mean_sw(params: GaussianDgpParams, s, w):
    """``E[U | S = s, W = w]`` from the bivariate conditioning formula."""
    p = params
    syy = _sigma_yy(p)
    det = np.linalg.det(syy)
    if not np.isfinite(det) or abs(det) <= 1e-14 * max(1.0, float(np.abs(syy).max()) ** 2):
        raise SingularError("observation covariance of (S, W) is singular")
    s_uy = np.array([p.alpha * p.sigma_u2, p.sigma_u2])
    gain = np.linalg.solve(syy, s_uy)
    s = np.asarray(s, dtype=float)
    w = np.asarray(w, dtype=float)
    return p.mu + gain[0] * (s - p.alpha * p.mu) + gain[1] * (w - p.mu)


def analytic_bc1(params: GaussianDgpParams, s):
    """``1{beta_s s + beta_u E[U | s] >= c}``."""
    s = np.asarray(s, dtype=float)
    return _step(params.beta_s * s + params.beta_u * posterior_mean_s(params, s) - params.c)


def analytic_bc2(params: GaussianDgpParams, s, w):
    """``1{beta_s s + beta_u E[U | s, w] >= c}``."""
    s = np.asarray(s, dtype=float)
    return _step(params.beta_s * s + params.beta_u * posterior_mean_sw(params, s, w) - params.c)


def success_prob_s(params: GaussianDgpParams, s):
    """``P(A = 1 | S = s)`` under the expert."""
    p = params
    s = np.asarray(s, dtype=float)
    sd = p.beta_u * math.sqrt(posterior_var_s(p))
    return ndtr((p.beta_s * s + p.beta_u * posterior_mean_s(p, s) - p.c) / sd)


def interventional_prob_1(params: GaussianDgpParams, s):
    """``P(A^(s) = 1) = P(beta_s s + beta_u U >= c)`` with ``U`` at its marginal."""
    p = params
    s = np.asarray(s, dtype=float)
    return ndtr((p.beta_s * s + p.beta_u * p.mu - p.c) / (p.beta_u * math.sqrt(p.sigma_u2)))


def _boundary(slope: float, offset: float) -> float:
    if slope == 0:
        return math.nan
    return -offset / slope


def boundaries(params: GaussianDgpParams) -> dict:
    """Decision thresholds in ``s`` of the optimal policy and the state-only clone."""
    p = params
    gain = p.alpha * p.sigma_u2 / (p.alpha ** 2 * p.sigma_u2 + p.sigma_s2)
    return {
        "pi_opt": _boundary(p.beta_s, p.beta_u * p.mu - p.c),
        "bc1": _boundary(p.beta_s + p.beta_u * gain, p.beta_u * (p.mu - gain * p.alpha * p.mu) - p.c),
    }


TARGETS = {"pi_opt": ("oracle", "s"), "bc1": ("bc1", "s"), "bc2": ("bc2", "s,w")}


@dataclass(frozen=True)
class AnalyticScorer:
    """Closed-form target as a two-action score (one-hot of the chosen action)."""

    params: GaussianDgpParams
    target: str = "pi_opt"

    def __post_init__(self):
        if self.target not in TARGETS:
            raise DomainError(f"unknown analytic target {self.target!r}")

    def scores(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(len(X), -1)
        if self.target == "pi_opt":
            act = analytic_pi_opt(self.params, X[:, 0])
        elif self.target == "bc1":
            act = analytic_bc1(self.params, X[:, 0])
        else:
            act = analytic_bc2(self.params, X[:, 0], X[:, 1])
        act = np.atleast_1d(act)
        return np.column_stack([1 - act, act]).astype(float)

    def to_dict(self) -> dict:
        return {"type": "gaussian_analytic", "params": self.params.to_dict(), "target": self.target}

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticScorer":
        return cls(GaussianDgpParams.from_dict(d["params"]), d.get("target", "pi_opt"))


def analytic_policy(params: GaussianDgpParams, target: str = "pi_opt") -> PolicyArtifact:
    kind, sig = TARGETS.get(target, (None, None))
    if kind is None:
        raise DomainError(f"unknown analytic target {target!r}")
    return PolicyArtifact(kind, sig, 2, scorer=AnalyticScorer(params, target))


def sample_to_batch(sample: PooledSample) -> TrajectoryBatch:
    """Store i.i.d. tuples as one-step episodes: ``S_0 = z``, ``S_1 = s``, ``W_0 = w``."""
    z = np.asarray(sample.z, dtype=float).reshape(sample.N, -1)
    s = np.asarray(sample.s, dtype=float).reshape(sample.N, -1)
    w = np.asarray(sample.w, dtype=float).reshape(sample.N, -1)
    eps = tuple(
        Episode(np.stack([z[i], s[i]]), w[i:i + 1], sample.a[i:i + 1],
                None if sample.u is None else np.asarray(sample.u[i:i + 1], dtype=float))
        for i in range(sample.N)
    )
    return TrajectoryBatch(eps, CONTINUOUS, None, {"s": s.shape[1], "w": w.shape[1]}, {"dgp": "gaussian", "T": 1})
