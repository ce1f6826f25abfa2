"""Semi-simulated ICU imitation task built from hourly vital-sign records.

Pipeline: read per-patient pipe-separated files, impute each patient's series
over ICU time, discretize vitals into a 6-component state and lactate into a
binary latent, then simulate a deterministic expert and two categorical
proxies of the latent. Two test-time shifts are provided: a sign flip of the
proxy mechanism from a pooled index onwards, and selection of a severe,
long-stay subpopulation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from . import rng
from .core import CATEGORICAL, Cardinalities, Episode, TrajectoryBatch, argmax_lowest
from .errors import (DegenerateCut, DomainError, EmptySelection, IoError, ParseError, SchemaError,
                     ShapeError)

VITALS = ("HR", "MAP", "DBP", "SBP", "O2Sat", "Resp")
LATENT = "Lactate"
VARIABLES = VITALS + (LATENT,)
# component order of the discretized state vector
STATE_ORDER = ("MAP", "HR", "DBP", "SBP", "O2Sat", "Resp")
THREE_LEVEL = ("MAP", "HR", "SBP")
TWO_LEVEL = ("DBP", "O2Sat", "Resp")
RADICES = tuple(3 if v in THREE_LEVEL else 2 for v in STATE_ORDER)
N_STATES = int(np.prod(RADICES))
N_ACTIONS = 3
N_PROXY = 3

# clinical cut pairs (low | normal | high), mmHg or bpm
DEFAULT_THRESHOLDS = {"MAP": (65.0, 100.0), "HR": (60.0, 100.0), "SBP": (90.0, 140.0)}
# used when a variable other than Resp is never observed during a stay
DEFAULT_FALLBACK = {"HR": 80.0, "MAP": 80.0, "DBP": 60.0, "SBP": 120.0, "O2Sat": 97.0, "Lactate": 1.5}
DEFAULT_T0 = 4000
MISSING_TOKENS = ("", "nan", "NaN", "NA", "na", "null")


# ---------------------------------------------------------------------------
# records and ingestion


@dataclass(frozen=True)
class PatientRecord:
    """Hourly rows of one ICU stay; missing cells are NaN."""

    pid: str
    iculos: np.ndarray
    values: dict

    def __post_init__(self):
        t = np.asarray(self.iculos, dtype=np.int64)
        if t.ndim != 1:
            raise ShapeError("ICULOS must be one-dimensional")
        if len(t) and (t[0] < 1 or np.any(np.diff(t) <= 0)):
            raise DomainError(f"patient {self.pid}: ICULOS must be strictly increasing positive integers")
        vals = {}
        for name in VARIABLES:
            v = np.asarray(self.values.get(name, np.full(len(t), np.nan)), dtype=np.float64)
            if v.shape != t.shape:
                raise ShapeError(f"patient {self.pid}: column {name} has {len(v)} rows, expected {len(t)}")
            vals[name] = v
        object.__setattr__(self, "iculos", t)
        object.__setattr__(self, "values", vals)

    @property
    def n_rows(self) -> int:
        return len(self.iculos)

    @property
    def stay(self) -> int:
        """ICU stay in hours (largest ICULOS)."""
        return int(self.iculos[-1]) if self.n_rows else 0

    def has_missing(self) -> bool:
        return any(np.isnan(v).any() for v in self.values.values())


def _parse_cell(cell: str, path, line: int) -> float:
    cell = cell.strip()
    if cell in MISSING_TOKENS:
        return math.nan
    try:
        return float(cell)
    except ValueError:
        raise ParseError(f"malformed numeric cell {cell!r}", file=str(path), line=line) from None


def read_psv(path) -> PatientRecord:
    """One patient file; the record id is the file stem."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise SchemaError(f"{path}: empty file")
    header = [h.strip() for h in lines[0].split("|")]
    if "ICULOS" not in header:
        raise SchemaError(f"{path}: no ICULOS column")
    cols = {name: header.index(name) for name in VARIABLES + ("ICULOS",) if name in header}
    rows = {name: [] for name in cols}
    for lineno, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        cells = text.split("|")
        if len(cells) != len(header):
            raise ParseError(f"expected {len(header)} cells, found {len(cells)}", file=str(path), line=lineno)
        for name, j in cols.items():
            rows[name].append(_parse_cell(cells[j], path, lineno))
    t = np.asarray(rows.pop("ICULOS"), dtype=float)
    prev = 0.0
    for i, x in enumerate(t):
        if math.isnan(x) or x != round(x) or x <= prev:
            raise ParseError("ICULOS must be strictly increasing positive integers", file=str(path), line=i + 2)
        prev = x
    return PatientRecord(path.stem, t.astype(np.int64), {k: np.asarray(v) for k, v in rows.items()})


def ingest_psv(directory) -> list:
    """All ``*.psv`` files of a directory, ordered by patient id."""
    d = Path(directory)
    if not d.is_dir():
        raise IoError(f"{d} is not a directory")
    return [read_psv(p) for p in sorted(d.glob("*.psv"), key=lambda p: p.stem)]


def write_psv(record: PatientRecord, path, extra_columns: dict | None = None) -> None:
    """Inverse of ``read_psv`` (NaN written as ``NaN``)."""
    extra = extra_columns or {}
    names = list(VARIABLES) + list(extra) + ["ICULOS"]
    cols = [record.values[n] for n in VARIABLES] + [np.asarray(v) for v in extra.values()] + [record.iculos]

    def fmt(x):
        return "NaN" if isinstance(x, float) and math.isnan(x) else (str(int(x)) if float(x).is_integer() else repr(float(x)))

    out = ["|".join(names)]
    for i in range(record.n_rows):
        out.append("|".join(fmt(float(c[i])) for c in cols))
    try:
        Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# imputation


@dataclass(frozen=True)
class Excluded:
    pid: str
    reason: str


def interpolate_series(t, y, query) -> np.ndarray:
    """Fill a series observed at some times onto ``query`` times.

    Natural cubic spline through the observed points (linear with fewer than
    four), constant continuation before the first and after the last
    observation.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    q = np.asarray(query, dtype=float)
    if len(t) == 0:
        raise DomainError("no observations to interpolate")
    if len(t) == 1:
        return np.full(q.shape, y[0])
    if len(t) < 4:
        return np.interp(q, t, y)
    inside = np.clip(q, t[0], t[-1])
    out = CubicSpline(t, y, bc_type="natural")(inside)
    out[q <= t[0]] = y[0]
    out[q >= t[-1]] = y[-1]
    # land exactly on observed values at the knots
    pos = np.searchsorted(t, q)
    hit = (pos < len(t)) & (t[np.minimum(pos, len(t) - 1)] == q)
    out[hit] = y[pos[hit]]
    return out


def impute(record: PatientRecord, fallback: dict | None = None):
    """Complete every column of a record, or exclude it.

    A record whose Resp column is never observed is returned as ``Excluded``.
    Other never-observed variables take the constant from ``fallback``
    (defaults in ``DEFAULT_FALLBACK``); without a fallback entry the record
    is excluded as well.
    """
    fallback = DEFAULT_FALLBACK if fallback is None else fallback
    if record.n_rows == 0:
        return Excluded(record.pid, "no rows")
    t = record.iculos.astype(float)
    out = {}
    for name in VARIABLES:
        v = record.values[name]
        obs = ~np.isnan(v)
        if not obs.any():
            if name == "Resp":
                return Excluded(record.pid, "Resp never observed")
            if name not in fallback:
                return Excluded(record.pid, f"{name} never observed and no fallback configured")
            out[name] = np.full(len(v), float(fallback[name]))
            continue
        out[name] = v if obs.all() else interpolate_series(t[obs], v[obs], t)
    return PatientRecord(record.pid, record.iculos, out)


def impute_all(records, fallback: dict | None = None):
    """``(kept, excluded)`` lists in input order."""
    kept, excluded = [], []
    for r in records:
        res = impute(r, fallback)
        (excluded if isinstance(res, Excluded) else kept).append(res)
    return kept, excluded


# ---------------------------------------------------------------------------
# discretization


@dataclass(frozen=True)
class DiscretizationSpec:
    """Fitted cut points per variable; a value ``>= cut`` moves up one level."""

    cuts: dict
    binary_quantile: float = 0.5
    lactate_quantile: float = 0.9

    def __post_init__(self):
        cuts = {}
        for name in VARIABLES:
            if name not in self.cuts:
                raise SchemaError(f"missing cuts for {name}")
            c = tuple(float(x) for x in np.atleast_1d(self.cuts[name]))
            want = 2 if name in THREE_LEVEL else 1
            if len(c) != want:
                raise SchemaError(f"{name} needs {want} cut(s), got {len(c)}")
            if any(b <= a for a, b in zip(c, c[1:])):
                raise DomainError(f"cuts for {name} must be strictly increasing")
            cuts[name] = c
        object.__setattr__(self, "cuts", cuts)

    def levels(self, name: str) -> int:
        return len(self.cuts[name]) + 1

    def code(self, name: str, values) -> np.ndarray:
        return np.searchsorted(np.asarray(self.cuts[name]), np.asarray(values, dtype=float), side="right")

    def to_dict(self) -> dict:
        return {"cuts": {k: list(v) for k, v in self.cuts.items()},
                "binary_quantile": self.binary_quantile, "lactate_quantile": self.lactate_quantile}

    @classmethod
    def from_dict(cls, d: dict) -> "DiscretizationSpec":
        return cls(d["cuts"], d.get("binary_quantile", 0.5), d.get("lactate_quantile", 0.9))


def _quantile_cut(name: str, values: np.ndarray, q: float) -> float:
    values = values[~np.isnan(values)]
    if len(values) == 0:
        raise DegenerateCut(f"{name}: no training values")
    if values.min() == values.max():
        raise DegenerateCut(f"{name}: constant on the training rows")
    cut = float(np.quantile(values, q))
    if not (values.min() < cut <= values.max()):
        raise DegenerateCut(f"{name}: quantile cut {cut} does not split the training rows")
    return cut


def fit_discretization(train, thresholds: dict | None = None, binary_quantile: float = 0.5,
                       lactate_quantile: float = 0.9) -> DiscretizationSpec:
    """Cuts from the training records only.

    MAP, HR and SBP use clinical threshold pairs; DBP, O2Sat and Resp are cut
    at ``binary_quantile`` of the pooled training rows and lactate at
    ``lactate_quantile``.
    """
    train = list(train)
    if not train:
        raise DomainError("empty training set")
    th = dict(DEFAULT_THRESHOLDS)
    th.update(thresholds or {})
    pooled = {n: np.concatenate([r.values[n] for r in train]) for n in VARIABLES}
    cuts = {n: tuple(th[n]) for n in THREE_LEVEL}
    for n in TWO_LEVEL:
        cuts[n] = (_quantile_cut(n, pooled[n], binary_quantile),)
    cuts[LATENT] = (_quantile_cut(LATENT, pooled[LATENT], lactate_quantile),)
    return DiscretizationSpec(cuts, binary_quantile, lactate_quantile)


@dataclass(frozen=True)
class DiscreteRecord:
    pid: str
    iculos: np.ndarray
    state_codes: np.ndarray  # (rows, 6) in STATE_ORDER
    latent: np.ndarray  # (rows,)

    @property
    def states(self) -> np.ndarray:
        return encode_state(self.state_codes)


def discretize(record: PatientRecord, spec: DiscretizationSpec) -> DiscreteRecord:
    if record.has_missing():
        raise DomainError(f"patient {record.pid}: impute before discretizing")
    codes = np.column_stack([spec.code(n, record.values[n]) for n in STATE_ORDER]).astype(np.int64)
    lat = spec.code(LATENT, record.values[LATENT]).astype(np.int64)
    return DiscreteRecord(record.pid, record.iculos, codes, lat)


def encode_state(codes) -> np.ndarray:
    """Mixed-radix integer of the 6-component state (MAP most significant)."""
    codes = np.asarray(codes, dtype=np.int64)
    return np.ravel_multi_index(tuple(codes.T), RADICES)


def decode_state(index) -> np.ndarray:
    return np.stack(np.unravel_index(np.asarray(index, dtype=np.int64), RADICES), axis=-1)


# ---------------------------------------------------------------------------
# expert and proxies


def _softmax(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class ExpertParams:
    gamma_0: np.ndarray = field(default_factory=lambda: np.zeros(N_ACTIONS))
    Gamma_S: np.ndarray = field(default_factory=lambda: 0.15 * np.array([
        [1, 0, 1, 1, 1, 0],
        [0, 1, 0, 0, 0, 1],
        [0, 1, 0, 0, 0, 1],
    ], dtype=float))
    Gamma_U: np.ndarray = field(default_factory=lambda: 1.5 * np.array([[0.0], [0.5], [1.0]]))

    def __post_init__(self):
        for name, shape in (("gamma_0", (N_ACTIONS,)), ("Gamma_S", (N_ACTIONS, len(STATE_ORDER))),
                            ("Gamma_U", (N_ACTIONS, 1))):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != shape:
                raise ShapeError(f"{name} has shape {v.shape}, expected {shape}")
            object.__setattr__(self, name, v)

    def table(self) -> np.ndarray:
        """Expert action for every ``(state index, u)``, shape ``(216, 2)``."""
        codes = decode_state(np.arange(N_STATES)).astype(float)
        u = np.arange(2, dtype=float)
        logits = (self.gamma_0[None, None, :] + (codes @ self.Gamma_S.T)[:, None, :]
                  + u[None, :, None] * self.Gamma_U[:, 0][None, None, :])
        return argmax_lowest(_softmax(logits))

    def to_dict(self) -> dict:
        return {"gamma_0": self.gamma_0.tolist(), "Gamma_S": self.Gamma_S.tolist(), "Gamma_U": self.Gamma_U.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ExpertParams":
        return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()})


@dataclass(frozen=True)
class ProxyChannel:
    omega_0: np.ndarray
    Omega_U: np.ndarray

    def __post_init__(self):
        for name, shape in (("omega_0", (N_PROXY,)), ("Omega_U", (N_PROXY, 1))):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != shape:
                raise ShapeError(f"{name} has shape {v.shape}, expected {shape}")
            object.__setattr__(self, name, v)

    def probs(self) -> np.ndarray:
        """``P[u, w]`` for ``u`` in {0, 1} (the raw latent multiplies ``Omega_U``)."""
        u = np.arange(2, dtype=float)
        return _softmax(self.omega_0[None, :] + u[:, None] * self.Omega_U[:, 0][None, :])

    def to_dict(self) -> dict:
        return {"omega_0": self.omega_0.tolist(), "Omega_U": self.Omega_U.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ProxyChannel":
        return cls(np.asarray(d["omega_0"], dtype=float), np.asarray(d["Omega_U"], dtype=float))


def default_channels() -> tuple:
    return (
        ProxyChannel(np.zeros(N_PROXY), 1.5 * np.array([[-1.0], [0.0], [1.0]])),
        ProxyChannel(np.zeros(N_PROXY), 1.5 * np.array([[0.0], [1.0], [0.0]])),
    )


def flip_channel(ch: ProxyChannel) -> ProxyChannel:
    """Sign flip of both proxy parameters."""
    return ProxyChannel(-ch.omega_0, -ch.Omega_U)


PROXY_MODES = ("first", "concat")


def _draw(probs_rows, u) -> np.ndarray:
    cum = np.cumsum(probs_rows, axis=-1)
    cum[..., -1] = np.inf
    return (cum <= u[..., None]).sum(axis=-1).astype(np.int64)


def _combine(w1, w2, mode):
    return w1 if mode == "first" else w1 * N_PROXY + w2


def _proxy_uniforms(seed: int, episode: int, T: int, channel_stream: int) -> np.ndarray:
    return rng.stream(seed, episode, channel_stream).random((2, T))


def build_task(records, expert: ExpertParams | None = None, channels: tuple | None = None, seed: int = 0,
               proxy_mode: str = "first") -> TrajectoryBatch:
    """Trajectories from discretized records.

    A patient with ``L`` hourly rows yields an episode with ``T = L - 1``:
    states from all rows, latents ``U_0..U_{T-1}``, expert actions
    ``A_t = pi_E(S_t, U_{t-1})`` and proxies ``W_t`` drawn from ``U_t``.
    Patients with a single row are skipped.
    """
    expert = expert or ExpertParams()
    channels = channels or default_channels()
    if len(channels) != 2:
        raise ShapeError("exactly two proxy channels expected")
    if proxy_mode not in PROXY_MODES:
        raise DomainError(f"proxy mode must be one of {PROXY_MODES}")
    table = expert.table()
    p1, p2 = channels[0].probs(), channels[1].probs()
    episodes, pids, skipped = [], [], []
    for rec in records:
        if len(rec.latent) < 2:
            skipped.append(rec.pid)
            continue
        s = rec.states
        u = rec.latent[:-1]
        T = len(u)
        a = table[s[1:], u]
        unif = _proxy_uniforms(seed, len(episodes), T, rng.CH_PROXY)
        w = _combine(_draw(p1[u], unif[0]), _draw(p2[u], unif[1]), proxy_mode)
        episodes.append(Episode(s, w, a, u))
        pids.append(rec.pid)
    if not episodes:
        raise EmptySelection("no patient has at least two rows")
    k_w = N_PROXY if proxy_mode == "first" else N_PROXY * N_PROXY
    meta = {
        "dgp": "clinical", "seed": int(seed), "proxy_mode": proxy_mode, "patients": pids, "skipped": skipped,
        "expert": expert.to_dict(), "channels": [c.to_dict() for c in channels], "shift": "none",
    }
    return TrajectoryBatch(tuple(episodes), CATEGORICAL, Cardinalities(2, N_STATES, k_w, N_ACTIONS), None, meta)


def apply_measurement_shift(batch: TrajectoryBatch, t0: int = DEFAULT_T0, channels: tuple | None = None,
                            seed: int | None = None) -> TrajectoryBatch:
    """Redraw proxies of pooled tuples with index ``>= t0`` from sign-flipped channels.

    Tuples are indexed in episode-then-time order; tuple ``j`` of episode ``i``
    at time ``t`` owns proxy ``W_{t-1}``. States, latents and actions are not
    touched. With ``t0`` beyond the pooled size the batch comes back
    unchanged with ``metadata["shift_warning"]`` set.
    """
    if not batch.has_latents:
        raise DomainError("measurement shift needs latents")
    if t0 < 0:
        raise DomainError("t0 must be non-negative")
    meta = dict(batch.metadata)
    if channels is None:
        channels = tuple(ProxyChannel.from_dict(c) for c in meta.get("channels", [])) or default_channels()
    mode = meta.get("proxy_mode", "first")
    seed = int(meta.get("seed", 0) if seed is None else seed)
    N = sum(ep.T for ep in batch.episodes)
    if t0 > N:
        meta["shift_warning"] = f"t0={t0} exceeds pooled size {N}; nothing shifted"
        return replace(batch, metadata=meta)
    f1, f2 = (flip_channel(c).probs() for c in channels)
    episodes, start = [], 0
    for i, ep in enumerate(batch.episodes):
        first = max(t0 - start, 0)
        if first >= ep.T:
            episodes.append(ep)
        else:
            u = np.asarray(ep.latents)
            unif = _proxy_uniforms(seed, i, ep.T, rng.CH_AUX)
            new = _combine(_draw(f1[u], unif[0]), _draw(f2[u], unif[1]), mode)
            w = np.array(ep.proxies)
            w[first:] = new[first:]
            episodes.append(Episode(ep.states, w, ep.actions, ep.latents))
        start += ep.T
    meta.update({"shift": "measurement", "t0": int(t0)})
    return TrajectoryBatch(tuple(episodes), batch.kind, batch.cards, batch.dims, meta)


def select_shifted_population(records, q: float = 0.9, h: float = 12) -> list:
    """Patients whose peak lactate reaches the pooled ``q``-quantile and who stay at least ``h`` hours."""
    if not (0.0 <= q < 1.0):
        raise DomainError("q must lie in [0, 1)")
    if h < 0:
        raise DomainError("h must be non-negative")
    records = list(records)
    pooled = np.concatenate([r.values[LATENT] for r in records]) if records else np.zeros(0)
    pooled = pooled[~np.isnan(pooled)]
    if len(pooled) == 0:
        raise EmptySelection("no lactate observations")
    thr = float(np.quantile(pooled, q))
    keep = []
    for r in records:
        lac = r.values[LATENT]
        peak = np.nanmax(lac) if (~np.isnan(lac)).any() else -np.inf
        if peak >= thr and r.stay >= h:
            keep.append(r)
    if not keep:
        raise EmptySelection(f"no patient with peak lactate >= {thr:g} and stay >= {h} h")
    return keep
