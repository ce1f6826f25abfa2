"""Categorical simulation model with shift injectors and latent-aware oracles.

Every kernel is a softmax over logits that are affine in one-hot encodings of
the parent variables, e.g. the latent transition is

    P(U_t = k | U_{t-1}, S_{t-1}, A_{t-1}) = softmax(a0 + A_U e(U_{t-1}) + A_S e(S_{t-1}) + A_A e(A_{t-1}))_k

and the expert is the deterministic ``argmax`` of
``g0 + G_S e(S_t) + G_U e(U_{t-1})``. Besides sampling, the module can compute
the exact distribution of pooled decision tuples by propagating the
``(U_t, S_t, A_t)`` Markov chain, which the tests use as ground truth.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import softmax

from . import _accel, rng
from .core import (CATEGORICAL, Cardinalities, Episode, PolicyArtifact, TrajectoryBatch,
                   argmax_lowest)
from .errors import DomainError, ShapeError

# JSON names of the coefficient fields, in document order
COEF_FIELDS = (
    "alpha_0", "A_U", "A_S", "A_A",
    "beta_0", "B_U", "B_U_minus", "B_S", "B_A",
    "omega_0", "Omega_U",
    "gamma_0", "Gamma_S", "Gamma_U",
)
INIT_FIELDS = ("init_u", "init_s", "init_a")
MEASUREMENT_FIELDS = ("omega_0", "Omega_U")
DYNAMICS_FIELDS = ("A_U", "A_S", "A_A", "B_U", "B_U_minus", "B_S", "B_A")


def _shapes(c: Cardinalities) -> dict:
    return {
        "alpha_0": (c.k_u,), "A_U": (c.k_u, c.k_u), "A_S": (c.k_u, c.k_s), "A_A": (c.k_u, c.k_a),
        "beta_0": (c.k_s,), "B_U": (c.k_s, c.k_u), "B_U_minus": (c.k_s, c.k_u),
        "B_S": (c.k_s, c.k_s), "B_A": (c.k_s, c.k_a),
        "omega_0": (c.k_w,), "Omega_U": (c.k_w, c.k_u),
        "gamma_0": (c.k_a,), "Gamma_S": (c.k_a, c.k_s), "Gamma_U": (c.k_a, c.k_u),
        "init_u": (c.k_u,), "init_s": (c.k_s,), "init_a": (c.k_a,),
    }


@dataclass(frozen=True)
class CategoricalDgpParams:
    cards: Cardinalities
    alpha_0: np.ndarray
    A_U: np.ndarray
    A_S: np.ndarray
    A_A: np.ndarray
    beta_0: np.ndarray
    B_U: np.ndarray
    B_U_minus: np.ndarray
    B_S: np.ndarray
    B_A: np.ndarray
    omega_0: np.ndarray
    Omega_U: np.ndarray
    gamma_0: np.ndarray
    Gamma_S: np.ndarray
    Gamma_U: np.ndarray
    init_u: np.ndarray
    init_s: np.ndarray
    init_a: np.ndarray
    seed: int = 0

    def __post_init__(self):
        shapes = _shapes(self.cards)
        for name, shape in shapes.items():
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise DomainError(f"{name} has non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in INIT_FIELDS:
            p = getattr(self, name)
            if p.min() < 0 or abs(p.sum() - 1.0) > 1e-9:
                raise DomainError(f"{name} is not a probability vector")
        object.__setattr__(self, "seed", int(self.seed))

    def with_seed(self, seed: int) -> "CategoricalDgpParams":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        out = {"cards": self.cards.as_dict(), "seed": self.seed}
        for name in COEF_FIELDS + INIT_FIELDS:
            out[name] = getattr(self, name).tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "CategoricalDgpParams":
        cards = Cardinalities(**d["cards"])
        base = default_params(cards=cards, seed=d.get("seed", 0))
        kw = {name: d[name] for name in COEF_FIELDS + INIT_FIELDS if name in d}
        return replace(base, **kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _eye(rows, cols, scale):
    return scale * np.eye(rows, cols)


def default_params(cards: Cardinalities | None = None, seed: int = 0) -> CategoricalDgpParams:
    """The reference simulation constants; identities are rectangular when counts differ."""
    c = cards or Cardinalities(4, 4, 4, 4)
    return CategoricalDgpParams(
        cards=c,
        alpha_0=np.zeros(c.k_u),
        A_U=_eye(c.k_u, c.k_u, -0.5),
        A_S=_eye(c.k_u, c.k_s, 0.6),
        A_A=_eye(c.k_u, c.k_a, 0.15),
        beta_0=np.zeros(c.k_s),
        B_U=_eye(c.k_s, c.k_u, 0.15),
        B_U_minus=_eye(c.k_s, c.k_u, 0.1),
        B_S=_eye(c.k_s, c.k_s, 0.35),
        B_A=_eye(c.k_s, c.k_a, 0.15),
        omega_0=np.zeros(c.k_w),
        Omega_U=_eye(c.k_w, c.k_u, 1.5),
        gamma_0=np.zeros(c.k_a),
        Gamma_S=_eye(c.k_a, c.k_s, 0.15),
        Gamma_U=_eye(c.k_a, c.k_u, 1.5),
        init_u=np.full(c.k_u, 1.0 / c.k_u),
        init_s=np.full(c.k_s, 1.0 / c.k_s),
        init_a=np.full(c.k_a, 1.0 / c.k_a),
        seed=seed,
    )


# --------------------------------------------------------------------------
# shifts


@dataclass(frozen=True)
class ShiftSpec:
    """A train/test mechanism change.

    ``measurement`` payloads replace ``omega_0`` / ``Omega_U``; ``dynamics``
    payloads replace any of the transition coefficients. Omitted fields keep
    their base values.
    """

    kind: str = "none"
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        allowed = {"none": (), "measurement": MEASUREMENT_FIELDS, "dynamics": DYNAMICS_FIELDS}
        if self.kind not in allowed:
            raise DomainError(f"unknown shift kind {self.kind!r}")
        if self.kind == "none" and self.payload:
            raise DomainError("a 'none' shift carries no payload")
        extra = set(self.payload) - set(allowed[self.kind])
        if extra:
            raise DomainError(f"fields {sorted(extra)} not allowed in a {self.kind} shift")
        object.__setattr__(self, "payload", {k: np.asarray(v, dtype=np.float64) for k, v in self.payload.items()})

    def to_dict(self) -> dict:
        return {"kind": self.kind, "payload": {k: v.tolist() for k, v in self.payload.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftSpec":
        return cls(d.get("kind", "none"), d.get("payload", {}))


NO_SHIFT = ShiftSpec()


def apply_shift(params: CategoricalDgpParams, shift: ShiftSpec | None) -> CategoricalDgpParams:
    if shift is None or shift.kind == "none":
        return params
    shapes = _shapes(params.cards)
    for name, val in shift.payload.items():
        if val.shape != shapes[name]:
            raise ShapeError(f"shift payload {name} has shape {val.shape}, expected {shapes[name]}")
    return replace(params, **shift.payload)


def measurement_flip(params: CategoricalDgpParams) -> ShiftSpec:
    """Measurement shift that sign-flips the proxy logits."""
    return ShiftSpec("measurement", {"omega_0": -params.omega_0, "Omega_U": -params.Omega_U})


# --------------------------------------------------------------------------
# kernels


def latent_kernel(p: CategoricalDgpParams) -> np.ndarray:
    """``P[u_prev, s_prev, a_prev, u]``."""
    logits = (p.alpha_0[None, None, None, :]
              + p.A_U.T[:, None, None, :]
              + p.A_S.T[None, :, None, :]
              + p.A_A.T[None, None, :, :])
    return softmax(logits, axis=-1)


def state_kernel(p: CategoricalDgpParams) -> np.ndarray:
    """``P[u, u_prev, s_prev, a_prev, s]``."""
    logits = (p.beta_0[None, None, None, None, :]
              + p.B_U.T[:, None, None, None, :]
              + p.B_U_minus.T[None, :, None, None, :]
              + p.B_S.T[None, None, :, None, :]
              + p.B_A.T[None, None, None, :, :])
    return softmax(logits, axis=-1)


def proxy_kernel(p: CategoricalDgpParams) -> np.ndarray:
    """``P[u, w]``."""
    return softmax(p.omega_0[None, :] + p.Omega_U.T, axis=-1)


def expert_table(p: CategoricalDgpParams) -> np.ndarray:
    """Deterministic expert ``pi_E[s, u_prev]``, lowest-index tie-break."""
    logits = p.gamma_0[None, None, :] + p.Gamma_S.T[:, None, :] + p.Gamma_U.T[None, :, :]
    return argmax_lowest(softmax(logits, axis=-1)).astype(np.int64)


def _cum(prob):
    c = np.cumsum(prob, axis=-1)
    c[..., -1] = np.inf
    return np.ascontiguousarray(c)


# --------------------------------------------------------------------------
# sampling


def simulate(params: CategoricalDgpParams, n: int, T: int, shift: ShiftSpec | None = None,
             keep_latents: bool = True, seed: int | None = None, backend=None) -> TrajectoryBatch:
    """Sample ``n`` episodes of length ``T``.

    Episode ``i`` draws from independent Philox streams keyed by
    ``(seed, i, channel)`` with separate channels for initial values, latent
    transitions, state transitions and proxies. A measurement shift therefore
    changes only the proxies of an otherwise identical run.
    """
    if n < 1 or T < 1:
        raise DomainError("n and T must be >= 1")
    p = apply_shift(params, shift)
    seed = p.seed if seed is None else int(seed)
    kern = backend or _accel
    c = p.cards
    states, proxies, actions, latents = kern.simulate_categorical(
        _cum(latent_kernel(p)), _cum(state_kernel(p)), _cum(proxy_kernel(p)),
        np.ascontiguousarray(expert_table(p)),
        _cum(p.init_u), _cum(p.init_s), _cum(p.init_a),
        rng.uniforms(seed, n, 3, rng.CH_INIT),
        rng.uniforms(seed, n, T, rng.CH_LATENT),
        rng.uniforms(seed, n, T, rng.CH_STATE),
        rng.uniforms(seed, n, T, rng.CH_PROXY),
    )
    eps = tuple(
        Episode(states[i], proxies[i], actions[i], latents[i] if keep_latents else None)
        for i in range(n)
    )
    meta = {"dgp": "categorical", "seed": seed, "shift": (shift or NO_SHIFT).kind, "T": T}
    return TrajectoryBatch(eps, CATEGORICAL, c, None, meta)


def estimate_latent_marginal(params: CategoricalDgpParams, burn_in: int = 1000, horizon: int = 100_000,
                             seed: int | None = None, shift: ShiftSpec | None = None) -> np.ndarray:
    """Empirical frequency of ``U`` along one long chain, after ``burn_in`` steps."""
    k = params.cards.k_u
    if horizon < 10 * k:
        raise DomainError(f"horizon must be >= 10 * k_u = {10 * k}")
    batch = simulate(params, 1, burn_in + horizon, shift=shift, seed=seed)
    u = batch.episodes[0].latents[burn_in:burn_in + horizon]
    return np.bincount(u, minlength=k) / float(len(u))


# --------------------------------------------------------------------------
# oracles


def _check_marginal(latent_marginal, k_u):
    m = np.asarray(latent_marginal, dtype=np.float64)
    if m.shape != (k_u,):
        raise DomainError(f"latent marginal must have length {k_u}")
    if np.any(m < 0) or abs(m.sum() - 1.0) > 1e-12 or not np.all(np.isfinite(m)):
        raise DomainError("latent marginal is not a probability distribution")
    return m


def oracle_interventional(params: CategoricalDgpParams, s: int, latent_marginal) -> np.ndarray:
    """``P(A^(s) = a) = sum_u 1{pi_E(s, u) = a} P(U = u)``."""
    c = params.cards
    m = _check_marginal(latent_marginal, c.k_u)
    if not (0 <= int(s) < c.k_s) or int(s) != s:
        raise DomainError(f"state code {s!r} outside [0, {c.k_s})")
    expert = expert_table(params)
    out = np.zeros(c.k_a)
    np.add.at(out, expert[int(s)], m)
    return out


def oracle_pi_opt(params: CategoricalDgpParams, latent_marginal) -> PolicyArtifact:
    c = params.cards
    table = {}
    probs = {}
    for s in range(c.k_s):
        p = oracle_interventional(params, s, latent_marginal)
        table[(s,)] = int(argmax_lowest(p))
        probs[str(s)] = p.tolist()
    return PolicyArtifact("oracle", "s", c.k_a, table=table, domain=(c.k_s,), default_action=None,
                          metadata={"interventional": probs})


def expert_policy_probs(params: CategoricalDgpParams) -> np.ndarray:
    """One-hot ``P[s, u, a]`` of the deterministic expert."""
    c = params.cards
    ex = expert_table(params)
    out = np.zeros((c.k_s, c.k_u, c.k_a))
    s_idx, u_idx = np.meshgrid(np.arange(c.k_s), np.arange(c.k_u), indexing="ij")
    out[s_idx, u_idx, ex] = 1.0
    return out


# --------------------------------------------------------------------------
# exact population distribution


def chain_transition(params: CategoricalDgpParams) -> np.ndarray:
    """Transition matrix of the ``(U_t, S_t, A_t)`` chain, flattened row-major."""
    c = params.cards
    lat = latent_kernel(params)          # u, s, a, u'
    st = state_kernel(params)            # u', u, s, a, s'
    ex = expert_policy_probs(params)     # s', u, a'
    # K[u, s, a, u', s', a'] = lat[u,s,a,u'] st[u',u,s,a,s'] 1{a' = pi_E(s', u)}
    K = np.einsum("isaj,jisat,tib->isajtb", lat, st, ex)
    n = c.k_u * c.k_s * c.k_a
    return K.reshape(n, n)


def initial_chain_law(params: CategoricalDgpParams) -> np.ndarray:
    return np.einsum("i,s,a->isa", params.init_u, params.init_s, params.init_a).ravel()


def stationary_chain_law(params: CategoricalDgpParams) -> np.ndarray:
    K = chain_transition(params)
    vals, vecs = np.linalg.eig(K.T)
    i = int(np.argmin(np.abs(vals - 1.0)))
    v = np.real(vecs[:, i])
    v = np.abs(v) / np.abs(v).sum()
    # polish with a few power steps to wash out eigen-solver noise
    for _ in range(50):
        v = v @ K
    return v / v.sum()


def exact_tuple_joint(params: CategoricalDgpParams, T: int | None = None,
                      shift: ShiftSpec | None = None) -> np.ndarray:
    """Exact law of the pooled tuple ``(U_{t-1}, Z, S, W, A)``.

    With ``T`` given, the law is averaged over t = 1..T starting from the
    initial distributions (what pooling ``T``-step episodes estimates);
    with ``T=None`` the chain is taken at stationarity.

    Returns an array indexed ``[u_prev, z, s, w, a]``.
    """
    p = apply_shift(params, shift)
    c = p.cards
    if T is None:
        mu = stationary_chain_law(p)
    else:
        K = chain_transition(p)
        mu_t = initial_chain_law(p)
        acc = np.zeros_like(mu_t)
        for _ in range(T):
            acc += mu_t
            mu_t = mu_t @ K
        mu = acc / T
    mu = mu.reshape(c.k_u, c.k_s, c.k_a)
    lat = latent_kernel(p)
    st = state_kernel(p)
    prox = proxy_kernel(p)
    ex = expert_policy_probs(p)
    # sum over a_prev (b) and u_t (j)
    zs = np.einsum("izb,izbj,jizbs->izs", mu, lat, st)
    return np.einsum("izs,iw,sia->izswa", zs, prox, ex)


def exact_latent_marginal(params: CategoricalDgpParams, T: int | None = None,
                          shift: ShiftSpec | None = None) -> np.ndarray:
    """Law of the pooled delayed latent ``U_{t-1}``."""
    J = exact_tuple_joint(params, T, shift)
    m = J.sum(axis=(1, 2, 3, 4))
    return m / m.sum()


def exact_bc_tables(joint: np.ndarray) -> dict:
    """Population BC targets from an exact tuple joint.

    Returns ``{"bc1": P[s, a], "bc2": P[s, z, w, a]}`` conditional tables
    (rows with zero mass are left as zeros).
    """
    j_szwa = joint.sum(axis=0).transpose(1, 0, 2, 3)   # s, z, w, a
    j_sa = j_szwa.sum(axis=(1, 2))
    with np.errstate(invalid="ignore", divide="ignore"):
        bc1 = np.nan_to_num(j_sa / j_sa.sum(axis=-1, keepdims=True))
        bc2 = np.nan_to_num(j_szwa / j_szwa.sum(axis=-1, keepdims=True))
    return {"bc1": bc1, "bc2": bc2}
