"""Kernel bridge estimator for continuous states and proxies.

The bridge ``h_a(w, s)`` lives in a Gaussian RBF space over standardized
``(w, s)``; the adversary lives in a second RBF space over ``(z, s)``. With
one-vs-all labels ``y_a`` the regularized saddle-point problem has the closed
form

    Gamma   = K_Q (K_Q / N + lam_q I)^{-1} / 4
    alpha_a = (K_H Gamma K_H + N^2 lam_h K_H)^+ K_H Gamma y_a

and ``P(A^(s) = a)`` is estimated by averaging ``h_a(W_j, s)`` over the pooled
proxies. Dense ``N x N`` matrices are used throughout, so memory grows as
``N^2`` (``N = 5000`` needs roughly 200 MB per matrix).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .core import CONTINUOUS, PolicyArtifact, PooledSample
from .errors import DegenerateSample, DomainError, NumericError, ShapeError
from .kernels import Standardizer, as_2d, rbf, resolve_bandwidth

PINV_RCOND = 1e-10
CV_GRID = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2)
CV_FOLDS = 3
CV_SCORE_LAMBDA_Q = 1e-4
MEDIAN = "median-heuristic"
CV = "cv-grid"


@dataclass(frozen=True)
class KernelConfig:
    """Kernel and regularization settings.

    Bandwidths accept a positive float or ``"median-heuristic"``; the
    regularizers accept a positive float or ``"cv-grid"``.
    """

    family: str = "gaussian-rbf"
    bandwidth_h: float | str = MEDIAN
    bandwidth_q: float | str = MEDIAN
    lambda_h: float | str = CV
    lambda_q: float | str = CV
    cv_grid: tuple = CV_GRID
    cv_folds: int = CV_FOLDS
    cv_score_lambda_q: float = CV_SCORE_LAMBDA_Q

    def __post_init__(self):
        if self.family != "gaussian-rbf":
            raise DomainError(f"unsupported kernel family {self.family!r}")
        for name in ("bandwidth_h", "bandwidth_q"):
            v = getattr(self, name)
            if v != MEDIAN and not (isinstance(v, (int, float)) and v > 0):
                raise DomainError(f"{name} must be positive or {MEDIAN!r}, got {v!r}")
        for name in ("lambda_h", "lambda_q"):
            v = getattr(self, name)
            if v != CV and not (isinstance(v, (int, float)) and v > 0):
                raise DomainError(f"{name} must be positive or {CV!r}, got {v!r}")
        if not self.cv_grid or min(self.cv_grid) <= 0:
            raise DomainError("cv grid must hold positive values")
        if self.cv_folds < 2:
            raise DomainError("need at least two folds")

    def to_dict(self) -> dict:
        return {
            "family": self.family, "bandwidth_h": self.bandwidth_h, "bandwidth_q": self.bandwidth_q,
            "lambda_h": self.lambda_h, "lambda_q": self.lambda_q, "cv_grid": list(self.cv_grid),
            "cv_folds": self.cv_folds, "cv_score_lambda_q": self.cv_score_lambda_q,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelConfig":
        d = dict(d)
        if "cv_grid" in d:
            d["cv_grid"] = tuple(d["cv_grid"])
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


# ---------------------------------------------------------------------------
# kernel matrices


@dataclass(frozen=True)
class _Design:
    """Standardized H and Q inputs with resolved bandwidths."""

    std_w: Standardizer
    std_s: Standardizer
    std_z: Standardizer
    w: np.ndarray
    s: np.ndarray
    z: np.ndarray
    h_h: float
    h_q: float

    @property
    def xh(self):
        return np.hstack([self.w, self.s])

    @property
    def xq(self):
        return np.hstack([self.z, self.s])


def _design(sample: PooledSample, config: KernelConfig) -> _Design:
    if sample.N < 2:
        raise DegenerateSample("need at least two tuples")
    w, s, z = as_2d(sample.w), as_2d(sample.s), as_2d(sample.z)
    if z.shape[1] != s.shape[1]:
        raise ShapeError("z and s must share a dimension")
    std_w, std_s, std_z = Standardizer.fit(w), Standardizer.fit(s), Standardizer.fit(z)
    w, s, z = std_w.transform(w), std_s.transform(s), std_z.transform(z)
    h_h = resolve_bandwidth(config.bandwidth_h, np.hstack([w, s]))
    h_q = resolve_bandwidth(config.bandwidth_q, np.hstack([z, s]))
    return _Design(std_w, std_s, std_z, w, s, z, h_h, h_q)


def build_kernel_matrices(sample: PooledSample, config: KernelConfig | None = None):
    """``(K_H, K_Q)``: RBF Gram matrices over ``(w, s)`` and ``(z, s)``."""
    d = _design(sample, config or KernelConfig())
    return rbf(d.xh, d.xh, d.h_h), rbf(d.xq, d.xq, d.h_q)


# ---------------------------------------------------------------------------
# closed-form pieces


def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite input")


def compute_gamma(K_Q, lambda_q: float, N: int) -> np.ndarray:
    """``K_Q (K_Q / N + lambda_q I)^{-1} / 4``."""
    K_Q = np.asarray(K_Q, dtype=float)
    if not lambda_q > 0:
        raise DomainError("lambda_q must be positive")
    _finite(K_Q)
    inner = K_Q / N + lambda_q * np.eye(len(K_Q))
    # K_Q commutes with the inner matrix, so solving from the left gives the same product
    g = 0.25 * sla.solve(inner, K_Q, assume_a="pos")
    return 0.5 * (g + g.T)


def normal_matrix(K_H, Gamma, lambda_h: float, N: int) -> np.ndarray:
    M = K_H @ Gamma @ K_H + (N * N * lambda_h) * K_H
    return 0.5 * (M + M.T)


def solve_alpha(K_H, Gamma, y, lambda_h: float, N: int) -> np.ndarray:
    """Pseudoinverse solution of the normal equation.

    ``y`` may be a vector or an ``(N, k)`` matrix of label columns. Singular
    values below ``1e-10`` times the largest are discarded.
    """
    K_H = np.asarray(K_H, dtype=float)
    Gamma = np.asarray(Gamma, dtype=float)
    y = np.asarray(y, dtype=float)
    _finite(K_H, Gamma, y)
    if not lambda_h > 0:
        raise DomainError("lambda_h must be positive")
    M = normal_matrix(K_H, Gamma, lambda_h, N)
    rhs = K_H @ (Gamma @ y)
    alpha = np.linalg.pinv(M, rcond=PINV_RCOND, hermitian=True) @ rhs
    _finite(alpha)
    return alpha


def normal_residual(K_H, Gamma, y, alpha, lambda_h: float, N: int) -> float:
    """``|M alpha - rhs| / |rhs|`` (0 when the right-hand side vanishes)."""
    rhs = K_H @ (Gamma @ y)
    r = normal_matrix(K_H, Gamma, lambda_h, N) @ alpha - rhs
    nrm = np.linalg.norm(rhs)
    return float(np.linalg.norm(r) / nrm) if nrm > 0 else float(np.linalg.norm(r))


def saddle_value(alpha, K_H, K_Q, y, lambda_q: float, N: int) -> float:
    """Value of the inner supremum over the adversary at bridge ``K_H alpha``."""
    xi = (np.asarray(y, dtype=float) - K_H @ alpha) / N
    inner = K_Q / N + lambda_q * np.eye(len(K_Q))
    return float(0.25 * xi @ K_Q @ np.linalg.solve(inner, xi))


def adversary_objective(beta, alpha, K_H, K_Q, y, lambda_q: float, N: int) -> float:
    """Unreduced penalized moment at adversary ``q = K_Q beta``.

    ``(1/N) sum_j (y_j - h_j) q_j - (1/N) sum_j q_j^2 - lambda_q |q|^2``.
    """
    q = K_Q @ beta
    resid = np.asarray(y, dtype=float) - K_H @ alpha
    return float(resid @ q / N - q @ q / N - lambda_q * beta @ K_Q @ beta)


# ---------------------------------------------------------------------------
# regularization path for cross-validation


class _Path:
    """Fast ``alpha(lambda_h, lambda_q)`` on a fixed training design.

    With ``K_Q = Q diag(e) Q^T`` every ``Gamma`` is ``Q diag(g) Q^T``, and on
    the numerical range of ``K_H ~ V diag(d) V^T`` the normal matrix is
    ``V A V^T`` with ``A = d^{1/2} C d^{1/2} + N^2 lam_h diag(d)``,
    ``C = R^T diag(g) R`` and ``R = Q^T V d^{1/2}``. Pseudo-inverting the small
    ``A`` with the same relative cutoff reproduces :func:`solve_alpha`.
    """

    def __init__(self, K_H, K_Q, Y):
        self.N = len(K_H)
        e, Q = np.linalg.eigh(K_Q)
        self.e = np.clip(e, 0.0, None)
        d, V = np.linalg.eigh(K_H)
        keep = d > PINV_RCOND * d.max()
        self.V = V[:, keep]
        self.d = d[keep]
        self.sd = np.sqrt(self.d)
        self.R = Q.T @ (self.V * self.sd)
        self.QtY = Q.T @ Y

    def alphas(self, lambda_q, lambda_hs):
        N = self.N
        g = 0.25 * self.e / (self.e / N + lambda_q)
        C = self.R.T @ (g[:, None] * self.R)
        C = 0.5 * (C + C.T)
        # V^T K_H Gamma Y
        rhs = self.sd[:, None] * (self.R.T @ (g[:, None] * self.QtY))
        out = []
        for lam in lambda_hs:
            A = self.sd[:, None] * C * self.sd[None, :] + (N * N * lam) * np.diag(self.d)
            E, P = np.linalg.eigh(A)
            ok = np.abs(E) > PINV_RCOND * np.abs(E).max()
            x = P[:, ok] @ ((P[:, ok].T @ rhs) / E[ok][:, None])
            out.append(self.V @ x)
        return out


def episode_folds(episode, k: int) -> np.ndarray:
    """Fold id per tuple: episodes in sorted order are dealt round-robin."""
    uniq, inv = np.unique(np.asarray(episode), return_inverse=True)
    if len(uniq) < k:
        raise DegenerateSample(f"need at least {k} episodes for {k}-fold cross-validation")
    return (np.arange(len(uniq)) % k)[inv]


def one_vs_all(a, k_a: int) -> np.ndarray:
    a = np.asarray(a)
    return (a[:, None] == np.arange(k_a)[None, :]).astype(float)


def cross_validate(sample: PooledSample, config: KernelConfig, k_a: int | None = None):
    """Pick ``(lambda_h, lambda_q)`` on the grid by held-out saddle value.

    Returns the selected pair and the ``(len(grid), len(grid))`` score table
    indexed ``[lambda_h, lambda_q]``. Ties go to the earliest grid entry.
    """
    k_a = sample.n_actions if k_a is None else k_a
    grid_h = list(config.cv_grid) if config.lambda_h == CV else [float(config.lambda_h)]
    grid_q = list(config.cv_grid) if config.lambda_q == CV else [float(config.lambda_q)]
    folds = episode_folds(sample.episode, config.cv_folds)
    scores = np.zeros((len(grid_h), len(grid_q)))
    for f in range(config.cv_folds):
        tr, va = np.flatnonzero(folds != f), np.flatnonzero(folds == f)
        train, valid = sample.subset(tr), sample.subset(va)
        d = _design(train, config)
        xh, xq = d.xh, d.xq
        K_H, K_Q = rbf(xh, xh, d.h_h), rbf(xq, xq, d.h_q)
        Y = one_vs_all(train.a, k_a)
        vh = np.hstack([d.std_w.transform(valid.w), d.std_s.transform(valid.s)])
        vq = np.hstack([d.std_z.transform(valid.z), d.std_s.transform(valid.s)])
        K_vh = rbf(vh, xh, d.h_h)
        K_vq = rbf(vq, vq, d.h_q)
        Yv = one_vs_all(valid.a, k_a)
        Nv = valid.N
        inner = K_vq / Nv + config.cv_score_lambda_q * np.eye(Nv)
        path = _Path(K_H, K_Q, Y)
        for jq, lq in enumerate(grid_q):
            for ih, alpha in enumerate(path.alphas(lq, grid_h)):
                xi = (Yv - K_vh @ alpha) / Nv
                scores[ih, jq] += 0.25 * float(np.sum(xi * (K_vq @ np.linalg.solve(inner, xi))))
    flat = int(np.argmin(scores))
    ih, jq = np.unravel_index(flat, scores.shape)
    return (grid_h[ih], grid_q[jq]), scores


# ---------------------------------------------------------------------------
# fitted model


@dataclass
class BridgeModel:
    """Fitted bridges ``h_a(w, s) = sum_j alpha[a, j] k((w_j, s_j), (w, s))``.

    ``support_w`` and ``support_s`` hold the standardized support points.
    """

    config: KernelConfig
    std_w: Standardizer
    std_s: Standardizer
    std_z: Standardizer
    bandwidth_h: float
    bandwidth_q: float
    lambda_h: float
    lambda_q: float
    support_w: np.ndarray
    support_s: np.ndarray
    alpha: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.alpha = np.atleast_2d(np.asarray(self.alpha, dtype=float))
        self.support_w = as_2d(self.support_w)
        self.support_s = as_2d(self.support_s)
        if self.alpha.shape[1] != len(self.support_w):
            raise ShapeError("alpha rows must have one coefficient per support point")
        if not np.all(np.isfinite(self.alpha)):
            raise NumericError("non-finite bridge coefficients")
        # column sums of the proxy Gram matrix, used by the factorized plug-in mean
        kw = rbf(self.support_w, self.support_w, self.bandwidth_h)
        self._g = kw.sum(axis=0)

    @property
    def n_actions(self) -> int:
        return self.alpha.shape[0]

    @property
    def N(self) -> int:
        return self.alpha.shape[1]

    def _query_s(self, s) -> np.ndarray:
        s = as_2d(s)
        d = self.support_s.shape[1]
        if s.shape[1] != d:
            raise ShapeError(f"state dimension {s.shape[1]} does not match model dimension {d}")
        return self.std_s.transform(s)

    def h(self, w, s) -> np.ndarray:
        """Bridge values ``(m, k_a)`` at raw inputs."""
        x = np.hstack([self.std_w.transform(w), self._query_s(s)])
        sup = np.hstack([self.support_w, self.support_s])
        return rbf(x, sup, self.bandwidth_h) @ self.alpha.T

    def interventional(self, s) -> np.ndarray:
        """``(m, k_a)`` plug-in means ``(1/N) sum_j h_a(W_j, s)``.

        The RBF on concatenated inputs factorizes as ``k_w * k_s``, so the mean
        over ``j`` collapses to one pass over the support.
        """
        ks = rbf(self._query_s(s), self.support_s, self.bandwidth_h)
        return (ks * self._g[None, :]) @ self.alpha.T / self.N

    def scores(self, X) -> np.ndarray:
        return self.interventional(X)

    def to_dict(self) -> dict:
        return {
            "type": "bridge",
            "config": self.config.to_dict(),
            "std_w": self.std_w.to_dict(), "std_s": self.std_s.to_dict(), "std_z": self.std_z.to_dict(),
            "bandwidth_h": self.bandwidth_h, "bandwidth_q": self.bandwidth_q,
            "lambda_h": self.lambda_h, "lambda_q": self.lambda_q,
            "support_w": self.support_w.tolist(), "support_s": self.support_s.tolist(),
            "alpha": self.alpha.tolist(),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BridgeModel":
        return cls(
            config=KernelConfig.from_dict(d["config"]),
            std_w=Standardizer.from_dict(d["std_w"]), std_s=Standardizer.from_dict(d["std_s"]),
            std_z=Standardizer.from_dict(d["std_z"]),
            bandwidth_h=float(d["bandwidth_h"]), bandwidth_q=float(d["bandwidth_q"]),
            lambda_h=float(d["lambda_h"]), lambda_q=float(d["lambda_q"]),
            support_w=np.asarray(d["support_w"], dtype=float), support_s=np.asarray(d["support_s"], dtype=float),
            alpha=np.asarray(d["alpha"], dtype=float), diagnostics=d.get("diagnostics", {}),
        )


def fit_bridge(sample: PooledSample, config: KernelConfig | None = None, labels=None) -> BridgeModel:
    """Fit one bridge per action.

    ``labels`` overrides the one-vs-all label matrix (``(N, k)``), which is
    how a constant-label bridge is fitted for consistency checks.
    """
    config = config or KernelConfig()
    k_a = max(sample.n_actions, 1)
    Y = one_vs_all(sample.a, k_a) if labels is None else as_2d(labels)
    cv_scores = None
    if CV in (config.lambda_h, config.lambda_q):
        (lam_h, lam_q), cv_scores = cross_validate(sample, config, k_a)
    else:
        lam_h, lam_q = float(config.lambda_h), float(config.lambda_q)
    d = _design(sample, config)
    N = sample.N
    K_H, K_Q = rbf(d.xh, d.xh, d.h_h), rbf(d.xq, d.xq, d.h_q)
    Gamma = compute_gamma(K_Q, lam_q, N)
    alpha = solve_alpha(K_H, Gamma, Y, lam_h, N)
    eig = np.linalg.eigvalsh(K_H)
    diagnostics = {
        "saddle_value": [saddle_value(alpha[:, a], K_H, K_Q, Y[:, a], lam_q, N) for a in range(Y.shape[1])],
        "residual": [normal_residual(K_H, Gamma, Y[:, a], alpha[:, a], lam_h, N) for a in range(Y.shape[1])],
        "effective_rank_K_H": int(np.sum(eig > PINV_RCOND * eig.max())),
    }
    if cv_scores is not None:
        diagnostics["cv_scores"] = cv_scores.tolist()
    return BridgeModel(
        config=config, std_w=d.std_w, std_s=d.std_s, std_z=d.std_z,
        bandwidth_h=d.h_h, bandwidth_q=d.h_q, lambda_h=lam_h, lambda_q=lam_q,
        support_w=d.w, support_s=d.s, alpha=alpha.T, diagnostics=diagnostics,
    )


def interventional_prob(model: BridgeModel, s) -> np.ndarray:
    """Plug-in ``P(A^(s) = a)`` for one query state (vector over actions).

    A 2-d array of queries returns one row per query. Values are neither
    clipped nor normalized.
    """
    s = np.asarray(s, dtype=float)
    if s.ndim <= 1:
        return model.interventional(s.reshape(1, -1))[0]
    return model.interventional(s)


def fit_continuous_policy(sample: PooledSample, config: KernelConfig | None = None) -> PolicyArtifact:
    """State-only policy ``argmax_a P(A^(s) = a)`` from fitted bridges."""
    if sample.kind != CONTINUOUS:
        raise DomainError("continuous estimator needs a continuous-kind sample")
    model = fit_bridge(sample, config)
    return PolicyArtifact(
        kind="causil_continuous", signature="s", n_actions=model.n_actions, scorer=model,
        metadata={"lambda_h": model.lambda_h, "lambda_q": model.lambda_q},
    )


def decision_boundary(policy, grid) -> float:
    """Best single threshold ``t`` such that ``policy(s) = 1{s >= t}`` on ``grid``.

    ``policy`` is a scalar-state ``PolicyArtifact`` or any callable mapping an
    array of states to actions. Candidates are the midpoints between grid
    points plus one point past each end; the fewest disagreements win and ties
    go to the smallest threshold.
    """
    grid = np.sort(np.asarray(grid, dtype=float))
    if isinstance(policy, PolicyArtifact):
        pred = policy.predict(grid[:, None])
    else:
        pred = policy(grid)
    pred = np.asarray(pred, dtype=int)
    cands = np.concatenate([[grid[0] - 1.0], 0.5 * (grid[1:] + grid[:-1]), [grid[-1] + 1.0]])
    # errors(t) = #{s < t: pred = 1} + #{s >= t: pred = 0}
    ones_before = np.concatenate([[0], np.cumsum(pred == 1)])
    zeros_after = np.concatenate([np.cumsum((pred == 0)[::-1])[::-1], [0]])
    return float(cands[int(np.argmin(ones_before + zeros_after))])


def with_lambdas(config: KernelConfig, lambda_h: float, lambda_q: float) -> KernelConfig:
    return replace(config, lambda_h=lambda_h, lambda_q=lambda_q)


__all__ = [
    "KernelConfig", "BridgeModel", "build_kernel_matrices", "compute_gamma", "solve_alpha",
    "saddle_value", "adversary_objective", "normal_residual", "cross_validate", "fit_bridge",
    "interventional_prob", "fit_continuous_policy", "decision_boundary", "episode_folds",
]
