"""Shared domain types, tuple pooling, policy evaluation and the one-hot MSE.

A demonstration episode of length ``T`` holds states ``S_0..S_T``, proxies
``W_0..W_{T-1}``, actions ``A_1..A_T`` and (in simulation) latents
``U_0..U_{T-1}``. Estimators never see episodes directly: they consume the
pooled decision tuples ``(z, s, w, a) = (S_{t-1}, S_t, W_{t-1}, A_t)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import DomainError, EmptyInput, ShapeError

CATEGORICAL = "categorical"
CONTINUOUS = "continuous"

# score entries within this distance of the maximum count as tied
TIE_ATOL = 1e-12

SIGNATURES = ("s", "s,w", "s,z,w")
POLICY_KINDS = ("bc1", "bc2", "causil_discrete", "causil_continuous", "oracle")


@dataclass(frozen=True)
class Cardinalities:
    """Category counts for the latent, state, proxy and action variables."""

    k_u: int
    k_s: int
    k_w: int
    k_a: int

    def __post_init__(self):
        for name in ("k_u", "k_s", "k_w", "k_a"):
            v = getattr(self, name)
            if int(v) != v or v < 2:
                raise DomainError(f"{name} must be an integer >= 2, got {v!r}")

    def as_dict(self):
        return {"k_u": self.k_u, "k_s": self.k_s, "k_w": self.k_w, "k_a": self.k_a}


def _frozen(x, dtype=None):
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Episode:
    states: np.ndarray
    proxies: np.ndarray
    actions: np.ndarray
    latents: np.ndarray | None = None

    @property
    def T(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class TrajectoryBatch:
    """A validated, immutable collection of episodes.

    ``kind`` is ``"categorical"`` (integer codes bounded by ``cards``) or
    ``"continuous"`` (real vectors; ``dims`` gives the state and proxy
    dimensions).
    """

    episodes: tuple
    kind: str = CATEGORICAL
    cards: Cardinalities | None = None
    dims: dict | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in (CATEGORICAL, CONTINUOUS):
            raise DomainError(f"unknown batch kind {self.kind!r}")
        eps = []
        for i, ep in enumerate(self.episodes):
            eps.append(self._check_episode(i, ep))
        object.__setattr__(self, "episodes", tuple(eps))

    def _check_episode(self, i, ep):
        if self.kind == CATEGORICAL:
            conv = lambda x: _frozen(x, np.int64)  # noqa: E731
        else:
            conv = lambda x: _frozen(x, np.float64)  # noqa: E731
        states = conv(ep.states)
        proxies = conv(ep.proxies)
        actions = _frozen(ep.actions, np.int64)
        latents = None if ep.latents is None else conv(ep.latents)
        T = len(actions)
        if len(states) != T + 1 or len(proxies) != T:
            raise ShapeError(
                f"episode {i}: expected len(states)=T+1 and len(proxies)=T with T={T}, "
                f"got {len(states)} and {len(proxies)}"
            )
        if latents is not None and len(latents) != T:
            raise ShapeError(f"episode {i}: latents must have length T={T}")
        if self.kind == CATEGORICAL:
            if states.ndim != 1 or proxies.ndim != 1:
                raise ShapeError(f"episode {i}: categorical values must be 1-d code arrays")
            if self.cards is not None:
                c = self.cards
                for name, arr, k in (("states", states, c.k_s), ("proxies", proxies, c.k_w),
                                     ("actions", actions, c.k_a)):
                    if arr.size and (arr.min() < 0 or arr.max() >= k):
                        raise DomainError(f"episode {i}: {name} code outside [0, {k})")
                if latents is not None and latents.size and (latents.min() < 0 or latents.max() >= c.k_u):
                    raise DomainError(f"episode {i}: latents code outside [0, {c.k_u})")
        else:
            if self.dims is not None:
                ds, dw = self.dims.get("s"), self.dims.get("w")
                if states.ndim != 2 or states.shape[1] != ds or proxies.ndim != 2 or proxies.shape[1] != dw:
                    raise ShapeError(f"episode {i}: continuous values must have dims s={ds}, w={dw}")
        return Episode(states, proxies, actions, latents)

    @property
    def n(self) -> int:
        return len(self.episodes)

    @property
    def has_latents(self) -> bool:
        return bool(self.episodes) and all(ep.latents is not None for ep in self.episodes)

    def __len__(self):
        return len(self.episodes)

    def __eq__(self, other):
        if not isinstance(other, TrajectoryBatch):
            return NotImplemented
        if (self.kind, self.cards, self.dims, len(self)) != (other.kind, other.cards, other.dims, len(other)):
            return False
        for a, b in zip(self.episodes, other.episodes):
            if not (np.array_equal(a.states, b.states) and np.array_equal(a.proxies, b.proxies)
                    and np.array_equal(a.actions, b.actions)):
                return False
            if (a.latents is None) != (b.latents is None):
                return False
            if a.latents is not None and not np.array_equal(a.latents, b.latents):
                return False
        return True

    __hash__ = None

    def hide_latents(self) -> "TrajectoryBatch":
        eps = [Episode(e.states, e.proxies, e.actions, None) for e in self.episodes]
        return TrajectoryBatch(tuple(eps), self.kind, self.cards, self.dims, dict(self.metadata))


@dataclass(frozen=True)
class PooledSample:
    """Flattened decision tuples.

    Row ``j`` holds ``z = S_{t-1}``, ``s = S_t``, ``w = W_{t-1}``, ``a = A_t``
    for some episode/time pair, in episode-then-time order. ``u`` carries the
    matching latent ``U_{t-1}`` when the source batch had latents.
    """

    z: np.ndarray
    s: np.ndarray
    w: np.ndarray
    a: np.ndarray
    episode: np.ndarray
    t: np.ndarray
    u: np.ndarray | None = None
    kind: str = CATEGORICAL
    cards: Cardinalities | None = None

    def __post_init__(self):
        n = len(self.a)
        for name in ("z", "s", "w", "episode", "t"):
            if len(getattr(self, name)) != n:
                raise ShapeError(f"column {name} has length {len(getattr(self, name))}, expected {n}")
        if self.u is not None and len(self.u) != n:
            raise ShapeError("latent column length mismatch")

    @property
    def N(self) -> int:
        return len(self.a)

    @property
    def tuples(self) -> list:
        """The rows as plain ``(z, s, w, a)`` tuples."""
        def cell(v):
            return v.item() if np.ndim(v) == 0 else tuple(np.asarray(v).tolist())
        return [(cell(self.z[j]), cell(self.s[j]), cell(self.w[j]), int(self.a[j])) for j in range(self.N)]

    def subset(self, idx) -> "PooledSample":
        idx = np.asarray(idx)
        return PooledSample(
            self.z[idx], self.s[idx], self.w[idx], self.a[idx], self.episode[idx], self.t[idx],
            None if self.u is None else self.u[idx], self.kind, self.cards,
        )

    @property
    def n_actions(self) -> int:
        if self.cards is not None:
            return self.cards.k_a
        return int(self.a.max()) + 1 if self.N else 0


def pool_tuples(batch: TrajectoryBatch) -> PooledSample:
    """Flatten a batch into ``(S_{t-1}, S_t, W_{t-1}, A_t)`` tuples, t = 1..T."""
    if len(batch) == 0:
        raise EmptyInput("cannot pool an empty batch")
    zs, ss, ws, as_, eps, ts, us = [], [], [], [], [], [], []
    for i, ep in enumerate(batch.episodes):
        T = ep.T
        if T < 1:
            raise EmptyInput(f"episode {i} has T=0")
        zs.append(ep.states[:-1])
        ss.append(ep.states[1:])
        ws.append(ep.proxies)
        as_.append(ep.actions)
        eps.append(np.full(T, i, dtype=np.int64))
        ts.append(np.arange(1, T + 1, dtype=np.int64))
        if ep.latents is not None:
            us.append(ep.latents)
    u = np.concatenate(us) if len(us) == len(batch.episodes) else None
    return PooledSample(
        np.concatenate(zs), np.concatenate(ss), np.concatenate(ws), np.concatenate(as_),
        np.concatenate(eps), np.concatenate(ts), u, batch.kind, batch.cards,
    )


def argmax_lowest(scores, atol: float = TIE_ATOL):
    """Argmax along the last axis, ties (within ``atol``) going to the lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[-1] == 0:
        raise EmptyInput("empty score vector")
    top = scores.max(axis=-1, keepdims=True)
    return np.argmax(scores >= top - atol, axis=-1)


# --------------------------------------------------------------------------
# policies


@dataclass(frozen=True)
class PolicyArtifact:
    """A deterministic learned (or oracle) policy.

    Tabular policies map categorical input tuples to actions; cells never seen
    in training go to ``default_action`` (recorded in ``metadata``). Score-based
    policies delegate to ``scorer.scores(X)`` and take the lowest-index argmax.
    """

    kind: str
    signature: str
    n_actions: int
    table: dict | None = None
    domain: tuple | None = None
    default_action: int | None = None
    scorer: Any = None
    tie_break: str = "lowest-index"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise DomainError(f"unknown policy kind {self.kind!r}")
        if self.signature not in SIGNATURES:
            raise DomainError(f"unknown input signature {self.signature!r}")
        if (self.table is None) == (self.scorer is None):
            raise DomainError("a policy needs exactly one of table or scorer")
        if self.table is not None:
            if self.domain is None or len(self.domain) != len(self.signature.split(",")):
                raise DomainError("tabular policy needs one domain size per input slot")
            table = {}
            for key, act in self.table.items():
                key = (int(key),) if np.ndim(key) == 0 else tuple(int(k) for k in key)
                table[key] = int(act)
            object.__setattr__(self, "table", table)
            object.__setattr__(self, "domain", tuple(int(d) for d in self.domain))
            object.__setattr__(self, "_lookup", None)

    @property
    def is_tabular(self) -> bool:
        return self.table is not None

    @property
    def state_only(self) -> bool:
        return self.signature == "s"

    def _dense(self):
        lut = self.__dict__.get("_lookup")
        if lut is None:
            fill = -1 if self.default_action is None else self.default_action
            lut = np.full(int(np.prod(self.domain)), fill, dtype=np.int64)
            for key, act in self.table.items():
                lut[np.ravel_multi_index(key, self.domain)] = act
            object.__setattr__(self, "_lookup", lut)
        return lut

    def predict(self, *columns) -> np.ndarray:
        """Vectorized evaluation; one array per input slot, in signature order."""
        slots = self.signature.split(",")
        if len(columns) != len(slots):
            raise ShapeError(f"policy with signature {self.signature!r} takes {len(slots)} inputs")
        if self.is_tabular:
            cols = [np.asarray(c) for c in columns]
            for c, d, name in zip(cols, self.domain, slots):
                if c.ndim != 1 or not np.issubdtype(c.dtype, np.integer):
                    raise DomainError(f"input {name} must be integer codes")
                if c.size and (c.min() < 0 or c.max() >= d):
                    raise DomainError(f"input {name} has a code outside [0, {d})")
            flat = np.ravel_multi_index(tuple(cols), self.domain) if cols[0].size else np.zeros(0, np.int64)
            out = self._dense()[flat]
            if out.size and out.min() < 0:
                raise DomainError("unseen input cell and no default action")
            return out
        X = np.column_stack([np.asarray(c, dtype=np.float64).reshape(len(c), -1) for c in columns])
        return argmax_lowest(self.scorer.scores(X))

    def __call__(self, *x) -> int:
        return evaluate_policy(self, x if len(x) > 1 else x[0])

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "signature": self.signature,
            "n_actions": self.n_actions,
            "tie_break": self.tie_break,
        }
        if self.is_tabular:
            out["table"] = {",".join(str(k) for k in key): act for key, act in sorted(self.table.items())}
            out["domain"] = list(self.domain)
            out["default_action"] = self.default_action
        else:
            out["scorer"] = self.scorer.to_dict()
        for key, val in self.metadata.items():
            if key in out:
                raise DomainError(f"metadata key {key!r} collides with a policy field")
            out[key] = val
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyArtifact":
        base = {"kind", "signature", "n_actions", "tie_break", "table", "domain", "default_action", "scorer"}
        meta = {k: v for k, v in d.items() if k not in base}
        if "table" in d:
            table = {tuple(int(p) for p in key.split(",")): act for key, act in d["table"].items()}
            return cls(d["kind"], d["signature"], d["n_actions"], table=table, domain=tuple(d["domain"]),
                       default_action=d.get("default_action"), tie_break=d.get("tie_break", "lowest-index"),
                       metadata=meta)
        return cls(d["kind"], d["signature"], d["n_actions"], scorer=scorer_from_dict(d["scorer"]),
                   tie_break=d.get("tie_break", "lowest-index"), metadata=meta)


def scorer_from_dict(d: dict):
    kind = d.get("type")
    if kind == "bridge":
        from .continuous import BridgeModel
        return BridgeModel.from_dict(d)
    if kind == "kernel_ridge":
        from .baselines import KernelRidgeScorer
        return KernelRidgeScorer.from_dict(d)
    if kind == "gaussian_analytic":
        from .gaussian import AnalyticScorer
        return AnalyticScorer.from_dict(d)
    raise DomainError(f"unknown scorer type {kind!r}")


def evaluate_policy(policy: PolicyArtifact, x) -> int:
    """Action chosen by ``policy`` for a single input.

    ``x`` is a state code (or state vector) for state-only policies and a tuple
    ``(s, w)`` / ``(s, z, w)`` for context policies.
    """
    slots = policy.signature.split(",")
    parts = [x] if len(slots) == 1 else list(x)
    if len(parts) != len(slots):
        raise ShapeError(f"expected {len(slots)} inputs for signature {policy.signature!r}")
    if policy.is_tabular:
        cols = []
        for p in parts:
            if np.ndim(p) != 0 or int(p) != p:
                raise DomainError(f"categorical input expected, got {p!r}")
            cols.append(np.array([int(p)], dtype=np.int64))
    else:
        cols = [np.atleast_1d(np.asarray(p, dtype=np.float64))[None, :] for p in parts]
    return int(policy.predict(*cols)[0])


def policy_inputs(sample: PooledSample, signature: str) -> list:
    cols = {"s": sample.s, "z": sample.z, "w": sample.w}
    return [cols[k] for k in signature.split(",")]


def predict_sample(policy: PolicyArtifact, sample: PooledSample) -> np.ndarray:
    return policy.predict(*policy_inputs(sample, policy.signature))


def one_hot_mse(policy: PolicyArtifact, testset: PooledSample) -> float:
    """Mean squared distance between one-hot expert and policy actions.

    For deterministic policies each mismatch costs exactly 2, so the value is
    twice the misclassification rate.
    """
    if testset.N == 0:
        raise EmptyInput("empty test set")
    pred = predict_sample(policy, testset)
    return mse_from_actions(testset.a, pred)


def mse_from_actions(actions, predicted) -> float:
    actions = np.asarray(actions)
    predicted = np.asarray(predicted)
    if actions.size == 0:
        raise EmptyInput("empty test set")
    return 2.0 * float(np.count_nonzero(actions != predicted)) / actions.size


# --------------------------------------------------------------------------
# NDJSON serialization


def _tolist(arr):
    return None if arr is None else np.asarray(arr).tolist()


def write_ndjson(batch: TrajectoryBatch, path) -> None:
    """Write one JSON object per episode.

    Keys are ``states``, ``proxies``, ``actions`` and optionally ``latents``.
    A leading ``{"__meta__": {...}}`` line records kind, cardinalities and
    dimensions; readers accept files without it.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_ndjson(batch))


def dumps_ndjson(batch: TrajectoryBatch) -> str:
    meta = {"kind": batch.kind}
    if batch.cards is not None:
        meta["cards"] = batch.cards.as_dict()
    if batch.dims is not None:
        meta["dims"] = dict(batch.dims)
    if batch.metadata:
        meta["metadata"] = batch.metadata
    lines = [json.dumps({"__meta__": meta}, sort_keys=True)]
    for ep in batch.episodes:
        rec = {"states": _tolist(ep.states), "proxies": _tolist(ep.proxies), "actions": _tolist(ep.actions)}
        if ep.latents is not None:
            rec["latents"] = _tolist(ep.latents)
        lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


def read_ndjson(path, cards: Cardinalities | None = None) -> TrajectoryBatch:
    with open(path, encoding="utf-8") as fh:
        return loads_ndjson(fh.read(), cards)


def loads_ndjson(text: str, cards: Cardinalities | None = None) -> TrajectoryBatch:
    meta: dict = {}
    episodes = []
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if "__meta__" in rec:
            meta = rec["__meta__"]
            continue
        episodes.append(Episode(rec["states"], rec["proxies"], rec["actions"], rec.get("latents")))
    kind = meta.get("kind")
    if kind is None:
        first = episodes[0].states if episodes else []
        kind = CONTINUOUS if first and isinstance(first[0], list) else CATEGORICAL
    if cards is None and "cards" in meta:
        cards = Cardinalities(**meta["cards"])
    if cards is None and kind == CATEGORICAL and episodes:
        cards = _infer_cards(episodes)
    return TrajectoryBatch(tuple(episodes), kind, cards, meta.get("dims"), meta.get("metadata", {}))


def _infer_cards(episodes: Sequence[Episode]) -> Cardinalities:
    def top(vals: Iterable):
        vals = [np.max(v) for v in vals if len(v)]
        return max(2, int(max(vals)) + 1) if vals else 2
    return Cardinalities(
        k_u=top(e.latents for e in episodes if e.latents is not None),
        k_s=top(e.states for e in episodes),
        k_w=top(e.proxies for e in episodes),
        k_a=top(e.actions for e in episodes),
    )
