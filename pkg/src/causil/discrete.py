"""Discrete plug-in estimator of the interventional action distribution.

For a state ``s`` and coarsenings ``Z' = phi_Z(Z)``, ``W' = phi_W(W)`` onto
``m`` blocks, the estimate is

    p(A^(s)) = P[A | Z', s] @ inv(P[W' | Z', s]) @ P[W']

with every matrix replaced by empirical frequencies over the pooled tuples.
Conditional matrices are column-stochastic: column ``j`` is the distribution
given ``Z' = j`` (and ``S = s``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .core import PolicyArtifact, PooledSample, argmax_lowest
from .errors import DomainError, EmptyInput, InsufficientSupport, RankDeficient

SV_FLOOR = 1e-8
NEGATIVE_WARN = -0.05
EXHAUSTIVE_LIMIT = 10_000
GREEDY_RESTARTS = 200


@dataclass(frozen=True)
class StochasticMatrix:
    entries: np.ndarray
    row_labels: tuple
    col_labels: tuple
    kind: str

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.entries, dtype=dtype)


@dataclass(frozen=True)
class Coarsening:
    """Block maps for the lagged state and the proxy.

    ``z_map[code]`` / ``w_map[code]`` give the block of each category code.
    """

    z_map: np.ndarray
    w_map: np.ndarray
    m: int
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        z = np.asarray(self.z_map, dtype=np.int64)
        w = np.asarray(self.w_map, dtype=np.int64)
        for name, arr in (("z_map", z), ("w_map", w)):
            if arr.ndim != 1 or arr.min() < 0 or arr.max() >= self.m:
                raise DomainError(f"{name} must map codes into [0, {self.m})")
            if len(np.unique(arr)) != self.m:
                raise DomainError(f"{name} is not surjective onto {self.m} blocks")
        z.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "z_map", z)
        object.__setattr__(self, "w_map", w)

    @classmethod
    def identity(cls, k_z: int, k_w: int | None = None) -> "Coarsening":
        k_w = k_z if k_w is None else k_w
        if k_z != k_w:
            raise DomainError("identity coarsening needs equal code counts")
        return cls(np.arange(k_z), np.arange(k_w), k_z)

    def to_dict(self) -> dict:
        return {"z_map": self.z_map.tolist(), "w_map": self.w_map.tolist(), "m": self.m}

    @classmethod
    def from_dict(cls, d: dict) -> "Coarsening":
        return cls(d["z_map"], d["w_map"], d["m"], d.get("diagnostics", {}))


@dataclass(frozen=True)
class PluginEstimate:
    """Raw plug-in vector plus diagnostics; ``probs`` is never clipped or renormalized."""

    probs: np.ndarray
    mass: float
    negative_warning: bool
    min_singular_value: float
    determinant: float


# --------------------------------------------------------------------------
# counting


def count_tensor(sample: PooledSample) -> np.ndarray:
    """Counts indexed ``[z, s, w, a]``."""
    if sample.kind != "categorical" or sample.cards is None:
        raise DomainError("discrete estimation needs a categorical sample with cardinalities")
    c = sample.cards
    shape = (c.k_s, c.k_s, c.k_w, c.k_a)
    flat = np.ravel_multi_index((sample.z, sample.s, sample.w, sample.a), shape)
    return np.bincount(flat, minlength=int(np.prod(shape))).reshape(shape).astype(np.float64)


def joint_to_tensor(joint: np.ndarray) -> np.ndarray:
    """Collapse an exact ``[u, z, s, w, a]`` law onto ``[z, s, w, a]``."""
    return np.asarray(joint).sum(axis=0)


def _onehot(mapping, m):
    out = np.zeros((len(mapping), m))
    out[np.arange(len(mapping)), mapping] = 1.0
    return out


def _block_tables(tensor, z_map, w_map, m_z, m_w):
    """Coarsened tables: ``zsw[s, w', z']``, ``zsa[s, a, z']`` and ``w_marg[w']``."""
    Mz = _onehot(z_map, m_z)
    Mw = _onehot(w_map, m_w)
    zsw = np.einsum("zsw,zj,wi->sij", tensor.sum(axis=3), Mz, Mw)
    zsa = np.einsum("zsa,zj->saj", tensor.sum(axis=2), Mz)
    w_marg = tensor.sum(axis=(0, 1, 3)) @ Mw
    return zsw, zsa, w_marg


def _matrices(tensor, s, coarsening):
    m = coarsening.m
    zsw, zsa, w_marg = _block_tables(tensor, coarsening.z_map, coarsening.w_map, m, m)
    col = zsw[s].sum(axis=0)
    empty = np.flatnonzero(col <= 0)
    if empty.size:
        raise InsufficientSupport(f"no tuples with S={s} in z-block {int(empty[0])}",
                                  block=int(empty[0]), state=int(s))
    total = w_marg.sum()
    if total <= 0:
        raise EmptyInput("empty sample")
    return zsa[s] / col, zsw[s] / col, w_marg / total


def empirical_matrices(sample: PooledSample, s: int, coarsening: Coarsening):
    """Empirical ``(P[A|Z',s], P[W'|Z',s], P[W'])``."""
    if sample.N == 0:
        raise EmptyInput("empty sample")
    pa, pw, pm = _matrices(count_tensor(sample), int(s), coarsening)
    blocks = tuple(range(coarsening.m))
    return (
        StochasticMatrix(pa, tuple(range(pa.shape[0])), blocks, "A|Z,s"),
        StochasticMatrix(pw, blocks, blocks, "W|Z,s"),
        StochasticMatrix(pm, blocks, (), "marginal-W"),
    )


def population_matrices(joint: np.ndarray, s: int, coarsening: Coarsening):
    """Same as :func:`empirical_matrices` but from an exact ``[u, z, s, w, a]`` law."""
    return _matrices(joint_to_tensor(joint), int(s), coarsening)


# --------------------------------------------------------------------------
# plug-in algebra


def plugin_from_matrices(p_a_z, p_w_z, p_w, state=None) -> PluginEstimate:
    """``p_a_z @ inv(p_w_z) @ p_w`` through an SVD solve.

    Raises :class:`RankDeficient` when the smallest singular value of
    ``p_w_z`` falls below ``1e-8`` times the largest.
    """
    p_a_z = np.asarray(p_a_z, dtype=np.float64)
    p_w_z = np.asarray(p_w_z, dtype=np.float64)
    p_w = np.asarray(p_w, dtype=np.float64)
    U, sv, Vt = np.linalg.svd(p_w_z)
    if sv[-1] < SV_FLOOR * sv[0] or sv[0] == 0:
        raise RankDeficient(f"proxy matrix for S={state} is singular (min sv {sv[-1]:.3g})",
                            state=state, min_singular_value=float(sv[-1]))
    x = Vt.T @ ((U.T @ p_w) / sv)
    probs = p_a_z @ x
    det = float(np.prod(sv) * np.linalg.det(U) * np.linalg.det(Vt))
    return PluginEstimate(probs, float(probs.sum()), bool(np.any(probs < NEGATIVE_WARN)),
                          float(sv[-1]), det)


def plugin_interventional(sample: PooledSample, s: int, coarsening: Coarsening) -> PluginEstimate:
    pa, pw, pm = _matrices(count_tensor(sample), int(s), coarsening)
    return plugin_from_matrices(pa, pw, pm, state=int(s))


def population_interventional(joint: np.ndarray, s: int, coarsening: Coarsening) -> PluginEstimate:
    pa, pw, pm = population_matrices(joint, s, coarsening)
    return plugin_from_matrices(pa, pw, pm, state=int(s))


# --------------------------------------------------------------------------
# coarsening search


def set_partitions(n: int, k: int):
    """Yield every partition of ``range(n)`` into exactly ``k`` blocks as label arrays.

    Labels follow the restricted-growth convention (first occurrence order).
    """
    if k < 1 or k > n:
        return
    labels = [0] * n

    def rec(i, used):
        if n - i < k - used:
            return
        if i == n:
            if used == k:
                yield np.array(labels)
            return
        for b in range(min(used + 1, k)):
            labels[i] = b
            yield from rec(i + 1, max(used, b + 1))

    yield from rec(0, 0)


def stirling2(n: int, k: int) -> int:
    if k < 0 or k > n:
        return 0
    row = [1] + [0] * k
    for i in range(1, n + 1):
        new = [0] * (k + 1)
        for j in range(1, min(i, k) + 1):
            new[j] = j * row[j] + row[j - 1]
        row = new
    return row[k]


def _objective(zsw, states):
    """``(n_supported, min over supported s of sigma_min, per-state diagnostics)``.

    ``zsw[s]`` is the (w-block x z-block) count matrix; rectangular matrices
    use their ``min(rows, cols)``-th singular value.
    """
    sub = zsw[states]
    colsum = sub.sum(axis=1)                      # (n_states, m_z)
    ok = np.all(colsum > 0, axis=1)
    diag = {}
    if not ok.any():
        return 0, -np.inf, diag
    mats = sub[ok] / colsum[ok][:, None, :]
    sv = np.linalg.svd(mats, compute_uv=False)
    smin = sv[:, -1]
    square = mats.shape[1] == mats.shape[2]
    dets = np.linalg.det(mats) if square else np.full(len(mats), np.nan)
    for s, v, d in zip(np.asarray(states)[ok], smin, dets):
        diag[int(s)] = {"min_sv": float(v), "det": float(d)}
    for s in np.asarray(states)[~ok]:
        diag[int(s)] = {"min_sv": None, "det": None, "unsupported": True}
    return int(ok.sum()), float(smin.min()), diag


def coarsening_objective(sample: PooledSample, z_map, w_map) -> float:
    """Min over observed states of the smallest singular value of ``P[W'|Z', s]``.

    Maps may have different block counts; states lacking some z-block give
    ``-inf``.
    """
    tensor = count_tensor(sample)
    z_map = np.asarray(z_map)
    w_map = np.asarray(w_map)
    zsw, _, _ = _block_tables(tensor, z_map, w_map, int(z_map.max()) + 1, int(w_map.max()) + 1)
    states = np.flatnonzero(tensor.sum(axis=(0, 2, 3)) > 0)
    n_ok, val, _ = _objective(zsw, states)
    return val if n_ok == len(states) else -np.inf


def _expand(labels, support, size):
    full = np.zeros(size, dtype=np.int64)
    full[support] = labels
    return full


def _ward_merge(counts, n_blocks_target, labels, gen):
    """Greedy agglomeration of rows of ``counts`` (blocks x features).

    Each step merges the pair with the smallest Ward cost
    ``n_i n_j / (n_i + n_j) * |p_i - p_j|^2`` on normalized profiles, so
    blocks with proportional profiles merge first at zero cost. ``gen``, when
    given, breaks near-ties at random.
    """
    blocks = {}
    for b in np.unique(labels):
        blocks[int(b)] = counts[labels == b].sum(axis=0)
    members = {b: np.flatnonzero(labels == b) for b in blocks}
    while len(blocks) > n_blocks_target:
        keys = list(blocks)
        mat = np.array([blocks[k] for k in keys])
        n = mat.sum(axis=1)
        prof = mat / np.maximum(n, 1e-300)[:, None]
        d2 = ((prof[:, None, :] - prof[None, :, :]) ** 2).sum(axis=-1)
        w = (n[:, None] * n[None, :]) / np.maximum(n[:, None] + n[None, :], 1e-300)
        cost = w * d2
        iu = np.triu_indices(len(keys), 1)
        flat = cost[iu]
        if gen is not None:
            flat = flat + gen.random(flat.size) * 1e-3 * (flat.std() + 1e-12)
        best = int(np.argmin(flat))
        i, j = keys[iu[0][best]], keys[iu[1][best]]
        blocks[i] = blocks[i] + blocks.pop(j)
        members[i] = np.concatenate([members[i], members.pop(j)])
    out = np.empty(len(labels), dtype=np.int64)
    for new, b in enumerate(sorted(members, key=lambda b: members[b].min())):
        out[members[b]] = new
    return out


def search_coarsening(sample: PooledSample, m: int, seed: int = 0,
                      restarts: int = GREEDY_RESTARTS,
                      exhaustive_limit: int = EXHAUSTIVE_LIMIT) -> Coarsening:
    """Pick block maps maximizing the worst-case smallest singular value.

    The criterion is ``min_s sigma_min(P[W'|Z', s])`` over observed states.
    Candidates that leave some state without support in a z-block rank below
    every fully supported candidate. Search is exhaustive over pairs of set
    partitions of the observed codes when there are at most
    ``exhaustive_limit`` pairs; otherwise ``restarts`` runs of greedy Ward
    merging are scored (restart ``r`` uses the random stream ``(seed, r)``).

    Raises
    ------
    RankDeficient
        If the best candidate still has a singular value below ``1e-8``.
    """
    if m < 2:
        raise DomainError("need at least m = 2 blocks")
    tensor = count_tensor(sample)
    c = sample.cards
    z_sup = np.flatnonzero(tensor.sum(axis=(1, 2, 3)) > 0)
    w_sup = np.flatnonzero(tensor.sum(axis=(0, 1, 3)) > 0)
    states = np.flatnonzero(tensor.sum(axis=(0, 2, 3)) > 0)
    if m > min(len(z_sup), len(w_sup)):
        raise DomainError(f"m={m} exceeds the observed support ({len(z_sup)} z codes, {len(w_sup)} w codes)")

    best = None
    n_cand = stirling2(len(z_sup), m) * stirling2(len(w_sup), m)

    def consider(zl, wl, method):
        nonlocal best
        z_map = _expand(zl, z_sup, c.k_s)
        w_map = _expand(wl, w_sup, c.k_w)
        zsw, _, _ = _block_tables(tensor, z_map, w_map, m, m)
        n_ok, val, diag = _objective(zsw, states)
        key = (n_ok, val)
        if best is None or key > best[0]:
            best = (key, z_map, w_map, diag, method)

    if n_cand <= exhaustive_limit:
        w_parts = list(set_partitions(len(w_sup), m))
        for zl in set_partitions(len(z_sup), m):
            for wl in w_parts:
                consider(zl, wl, "exhaustive")
    else:
        zw = tensor.sum(axis=(1, 3))[z_sup][:, w_sup]   # z-code x w-code counts
        for r in range(restarts):
            gen = None if r == 0 else rng.stream(seed, r, rng.CH_AUX)
            zl0 = np.arange(len(z_sup))
            wl0 = np.arange(len(w_sup))
            if gen is not None:
                zl0 = _random_labels(gen, len(z_sup), m)
                wl0 = _random_labels(gen, len(w_sup), m)
            zl = _ward_merge(zw, m, zl0, gen)
            wl = _ward_merge(zw.T, m, wl0, gen)
            consider(zl, wl, "greedy")

    (n_ok, val), z_map, w_map, diag, method = best
    diagnostics = {"per_state": {str(k): v for k, v in sorted(diag.items())},
                   "objective": val, "supported_states": n_ok, "n_states": int(len(states)),
                   "method": method, "candidates": int(n_cand) if method == "exhaustive" else restarts}
    if n_ok == 0 or val < SV_FLOOR:
        raise RankDeficient(f"best coarsening has min singular value {val:.3g} < {SV_FLOOR}",
                            min_singular_value=val)
    return Coarsening(z_map, w_map, m, diagnostics)


def _random_labels(gen, n, m):
    """Random surjective labels onto between ``m`` and ``n`` blocks."""
    b = int(gen.integers(m, n + 1))
    labels = np.concatenate([np.arange(b), gen.integers(0, b, size=n - b)])
    gen.shuffle(labels)
    return labels


# --------------------------------------------------------------------------
# policy


def global_mode(actions, k_a: int) -> int:
    return int(argmax_lowest(np.bincount(np.asarray(actions), minlength=k_a).astype(float)))


def fit_discrete_policy(sample: PooledSample, m: int | None = None, coarsening: Coarsening | None = None,
                        seed: int = 0) -> PolicyArtifact:
    """Tabulate ``argmax_a p(A^(s) = a)`` for every observed state.

    States never observed, or lacking support in some z-block, fall back to
    the global modal action and are listed under ``fallback_states``.
    """
    if sample.N == 0:
        raise EmptyInput("empty sample")
    c = sample.cards
    tensor = count_tensor(sample)
    if coarsening is None:
        if m is None:
            z_sup = np.count_nonzero(tensor.sum(axis=(1, 2, 3)))
            w_sup = np.count_nonzero(tensor.sum(axis=(0, 1, 3)))
            m = int(min(z_sup, w_sup))
        coarsening = search_coarsening(sample, m, seed=seed)
    mode = global_mode(sample.a, c.k_a)
    table, diag, fallback = {}, {}, []
    observed = set(np.unique(sample.s).tolist())
    for s in range(c.k_s):
        if s not in observed:
            fallback.append(s)
            continue
        try:
            pa, pw, pm = _matrices(tensor, s, coarsening)
        except InsufficientSupport:
            fallback.append(s)
            continue
        est = plugin_from_matrices(pa, pw, pm, state=s)
        table[(s,)] = int(argmax_lowest(est.probs))
        diag[str(s)] = {"probs": est.probs.tolist(), "mass": est.mass,
                        "negative_warning": est.negative_warning, "min_sv": est.min_singular_value}
    meta = {
        "coarsening": {**coarsening.to_dict(), "diagnostics": coarsening.diagnostics},
        "diagnostics": diag,
        "fallback_states": fallback,
    }
    return PolicyArtifact("causil_discrete", "s", c.k_a, table=table, domain=(c.k_s,),
                          default_action=mode, metadata=meta)
