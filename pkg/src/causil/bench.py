"""Experiment sweeps: train-size grids, shift scenarios and seed replications.

For every ``(seed, N, method)`` cell a training sample of ``N`` tuples is drawn
under the training mechanism, the method is fitted, and its one-hot MSE is
scored on a test sample drawn under the test mechanism. The test sample
depends on the seed only, so every train size and method within a seed is
scored on the same tuples.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import gaussian as gauss
from . import simgen
from .baselines import fit_bc
from .continuous import KernelConfig, fit_continuous_policy
from .core import PolicyArtifact, PooledSample, argmax_lowest, one_hot_mse, pool_tuples, predict_sample
from .discrete import fit_discrete_policy
from .errors import CausilError, DomainError, IoError
from .rng import derive_seed

METHODS = ("bc1", "bc2", "causil", "oracle")
DGPS = ("categorical", "gaussian")
CSV_FLOAT = "{:.10g}"

# labels mixed into derive_seed so train and test draws never share streams
_TRAIN, _TEST = 0, 1


@dataclass(frozen=True)
class ExperimentConfig:
    """A sweep definition.

    ``params`` is a ``CategoricalDgpParams`` or ``GaussianDgpParams`` (defaults
    when ``None``). Shifts apply to the categorical model only; for the
    Gaussian model ``gaussian_test`` holds parameter overrides for the test
    draw (for example a different ``sigma_w2``).
    """

    dgp: str = "categorical"
    params: object = None
    shift_train: simgen.ShiftSpec = simgen.NO_SHIFT
    shift_test: simgen.ShiftSpec = simgen.NO_SHIFT
    gaussian_test: dict = field(default_factory=dict)
    methods: tuple = ("bc1", "bc2", "causil")
    train_sizes: tuple = (100, 200, 300, 400, 500, 600, 700, 800, 900, 1000)
    test_size: int = 1000
    seeds: tuple = tuple(range(20))
    T: int = 10
    bc2_context: str = "s,z,w"
    coarsening_m: int | None = None
    kernel: KernelConfig = field(default_factory=KernelConfig)
    score_against_oracle: bool = False
    label: str | None = None
    out: str | None = None

    def __post_init__(self):
        if self.dgp not in DGPS:
            raise DomainError(f"unknown dgp {self.dgp!r}")
        if not self.methods:
            raise DomainError("at least one method is required")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise DomainError(f"unknown methods {sorted(bad)}")
        if any(int(n) < 1 for n in self.train_sizes) or not self.train_sizes:
            raise DomainError("train sizes must be >= 1")
        if self.test_size < 1 or self.T < 1:
            raise DomainError("test size and T must be >= 1")
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise DomainError("seeds must be distinct and non-empty")
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "train_sizes", tuple(int(n) for n in self.train_sizes))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.params is None:
            default = simgen.default_params() if self.dgp == "categorical" else gauss.gaussian_default()
            object.__setattr__(self, "params", default)

    @property
    def shift_kind(self) -> str:
        if self.dgp == "gaussian":
            return "measurement" if self.gaussian_test else "none"
        return self.shift_test.kind if self.shift_test.kind != "none" else self.shift_train.kind

    @property
    def scenario(self) -> str:
        return self.label or self.shift_kind

    def to_dict(self) -> dict:
        return {
            "dgp": self.dgp,
            "params": self.params.to_dict(),
            "shift_train": self.shift_train.to_dict(),
            "shift_test": self.shift_test.to_dict(),
            "gaussian_test": dict(self.gaussian_test),
            "methods": list(self.methods),
            "train_sizes": list(self.train_sizes),
            "test_size": self.test_size,
            "seeds": list(self.seeds),
            "T": self.T,
            "bc2_context": self.bc2_context,
            "coarsening_m": self.coarsening_m,
            "kernel": self.kernel.to_dict(),
            "score_against_oracle": self.score_against_oracle,
            "label": self.label,
            "out": self.out,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        dgp = d.get("dgp", "categorical")
        if d.get("params") is not None:
            ptype = simgen.CategoricalDgpParams if dgp == "categorical" else gauss.GaussianDgpParams
            d["params"] = ptype.from_dict(d["params"])
        for key in ("shift_train", "shift_test"):
            if key in d:
                d[key] = simgen.ShiftSpec.from_dict(d[key])
        if "kernel" in d:
            d["kernel"] = KernelConfig.from_dict(d["kernel"])
        for key in ("methods", "train_sizes", "seeds"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DomainError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class ResultRow:
    method: str
    train_size: int
    seed: int
    shift: str
    mse: float
    runtime_ms: float = 0.0
    diagnostics: dict = field(default_factory=dict)
    error: str | None = None
    mse_vs_oracle: float | None = None

    def __post_init__(self):
        if self.error is None and not (0.0 <= self.mse <= 2.0):
            raise DomainError(f"mse {self.mse} outside [0, 2]")

    def to_dict(self) -> dict:
        return {
            "method": self.method, "train_size": self.train_size, "seed": self.seed, "shift": self.shift,
            "mse": None if self.error else self.mse, "runtime_ms": self.runtime_ms,
            "diagnostics": self.diagnostics, "error": self.error, "mse_vs_oracle": self.mse_vs_oracle,
        }


# ---------------------------------------------------------------------------
# sampling


def _episodes_for(n_tuples: int, T: int) -> int:
    return -(-n_tuples // T)


def draw_sample(config: ExperimentConfig, n_tuples: int, seed: int, test: bool) -> PooledSample:
    """``n_tuples`` pooled tuples under the train or test mechanism."""
    label = _TEST if test else _TRAIN
    s = derive_seed(seed, label) if test else derive_seed(seed, label, n_tuples)
    if config.dgp == "gaussian":
        params = config.params
        if test and config.gaussian_test:
            params = replace(params, **config.gaussian_test)
        return gauss.sample_gaussian(params, n_tuples, seed=s)
    shift = config.shift_test if test else config.shift_train
    batch = simgen.simulate(config.params, _episodes_for(n_tuples, config.T), config.T, shift=shift, seed=s)
    sample = pool_tuples(batch)
    return sample if sample.N == n_tuples else sample.subset(np.arange(n_tuples))


def oracle_policy(config: ExperimentConfig) -> PolicyArtifact:
    """The optimal state-only policy under the training mechanism."""
    if config.dgp == "gaussian":
        return gauss.analytic_policy(config.params, "pi_opt")
    p = simgen.apply_shift(config.params, config.shift_train)
    return simgen.oracle_pi_opt(p, simgen.exact_latent_marginal(p, config.T))


def fit_method(config: ExperimentConfig, method: str, train: PooledSample, seed: int) -> PolicyArtifact:
    if method in ("bc1", "bc2"):
        return fit_bc(train, method, config.bc2_context)
    if method == "causil":
        if config.dgp == "gaussian":
            return fit_continuous_policy(train, config.kernel)
        return fit_discrete_policy(train, m=config.coarsening_m, seed=seed)
    if method == "oracle":
        return oracle_policy(config)
    raise DomainError(f"unknown method {method!r}")


def _diagnostics(policy: PolicyArtifact) -> dict:
    meta = policy.metadata
    out = {}
    if "fallback_states" in meta:
        out["fallback_states"] = len(meta["fallback_states"])
        diag = meta.get("diagnostics", {})
        if diag:
            out["min_sv"] = min(d["min_sv"] for d in diag.values())
            out["negative_warning"] = any(d["negative_warning"] for d in diag.values())
    for key in ("lambda_h", "lambda_q", "ridge"):
        if key in meta:
            out[key] = meta[key]
    return out


def _run_cell(args) -> ResultRow:
    config, seed, n, method, test, oracle_pred = args
    t0 = time.perf_counter()
    try:
        train = draw_sample(config, n, seed, test=False)
        policy = fit_method(config, method, train, seed)
        pred = predict_sample(policy, test)
        mse = float(one_hot_mse(policy, test))
        vs = None
        if oracle_pred is not None:
            vs = 2.0 * float(np.count_nonzero(pred != oracle_pred)) / len(pred)
        row = ResultRow(method, n, seed, config.scenario, mse, diagnostics=_diagnostics(policy), mse_vs_oracle=vs)
    except CausilError as exc:
        row = ResultRow(method, n, seed, config.scenario, math.nan, error=f"{type(exc).__name__}: {exc}")
    row.runtime_ms = 1000.0 * (time.perf_counter() - t0)
    return row


def run_experiment(config: ExperimentConfig, workers: int = 1) -> list:
    """All ``(seed, N, method)`` cells, in that nesting order.

    Estimator failures become rows with ``error`` set; the sweep continues.
    With ``workers > 1`` cells run in a process pool; row order is unchanged.
    """
    jobs = []
    for seed in config.seeds:
        test = draw_sample(config, config.test_size, seed, test=True)
        oracle_pred = None
        if config.score_against_oracle:
            oracle_pred = predict_sample(oracle_policy(config), test)
        for n in config.train_sizes:
            for method in config.methods:
                jobs.append((config, seed, n, method, test, oracle_pred))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_cell, jobs))
    return [_run_cell(j) for j in jobs]


# ---------------------------------------------------------------------------
# aggregation and output


@dataclass(frozen=True)
class Aggregate:
    method: str
    train_size: int
    shift: str
    n: int
    mean: float
    se: float
    n_errors: int = 0


def summarize(rows) -> list:
    """Mean and standard error of the MSE per ``(shift, N, method)``.

    Error rows are counted but excluded from the statistics. Groups keep the
    order of first appearance.
    """
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.shift, r.train_size, r.method), []).append(r)
    out = []
    for (shift, n, method), rs in groups.items():
        vals = np.array([r.mse for r in rs if r.error is None], dtype=float)
        errs = sum(r.error is not None for r in rs)
        if len(vals) == 0:
            out.append(Aggregate(method, n, shift, 0, math.nan, math.nan, errs))
            continue
        se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        out.append(Aggregate(method, n, shift, len(vals), float(vals.mean()), se, errs))
    return out


def _fmt(x) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else CSV_FLOAT.format(x)


ROW_COLUMNS = ("method", "train_size", "seed", "shift", "mse", "mse_vs_oracle", "error")
SUMMARY_COLUMNS = ("shift", "train_size", "method", "n", "mean_mse", "se", "n_errors")
PLOT_COLUMNS = ("N", "method", "mean_mse", "se")


def rows_csv(rows) -> str:
    """Per-cell CSV (runtimes are left out so reruns are byte-identical)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_COLUMNS)
    for r in rows:
        w.writerow([r.method, r.train_size, r.seed, r.shift, _fmt(r.mse),
                    "" if r.mse_vs_oracle is None else _fmt(r.mse_vs_oracle), r.error or ""])
    return buf.getvalue()


def summary_csv(aggregates) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for a in aggregates:
        w.writerow([a.shift, a.train_size, a.method, a.n, _fmt(a.mean), _fmt(a.se), a.n_errors])
    return buf.getvalue()


def _plot_rows(aggregates, shift):
    sel = [a for a in aggregates if a.shift == shift]
    order = {m: i for i, m in enumerate(dict.fromkeys(a.method for a in sel))}
    return sorted(sel, key=lambda a: (a.train_size, order[a.method]))


def plot_csv(aggregates, shift: str | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if shift is None:
        w.writerow(("shift",) + PLOT_COLUMNS)
        for s in dict.fromkeys(a.shift for a in aggregates):
            for a in _plot_rows(aggregates, s):
                w.writerow([s, a.train_size, a.method, _fmt(a.mean), _fmt(a.se)])
    else:
        w.writerow(PLOT_COLUMNS)
        for a in _plot_rows(aggregates, shift):
            w.writerow([a.train_size, a.method, _fmt(a.mean), _fmt(a.se)])
    return buf.getvalue()


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def plot_svg(aggregates, shift: str, width: int = 480, height: int = 320) -> str:
    """A small self-contained line chart of mean MSE against N with s.e. bars."""
    rows = [a for a in _plot_rows(aggregates, shift) if not math.isnan(a.mean)]
    pad = 48
    xs = sorted({a.train_size for a in rows}) or [0, 1]
    x0, x1 = min(xs), max(xs) if max(xs) > min(xs) else min(xs) + 1
    y0, y1 = 0.0, 2.0

    def px(x):
        return pad + (width - 2 * pad) * (x - x0) / (x1 - x0)

    def py(y):
        return height - pad - (height - 2 * pad) * (y - y0) / (y1 - y0)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">shift: {shift}</text>',
        f'<line x1="{pad}" y1="{py(0):.1f}" x2="{width - pad}" y2="{py(0):.1f}" stroke="black"/>',
        f'<line x1="{pad}" y1="{py(0):.1f}" x2="{pad}" y2="{py(2):.1f}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 10}" text-anchor="middle" font-size="12">N</text>',
        f'<text x="14" y="{height / 2:.1f}" font-size="12" transform="rotate(-90 14 {height / 2:.1f})">MSE</text>',
    ]
    for tick in (0.0, 0.5, 1.0, 1.5, 2.0):
        parts.append(f'<text x="{pad - 6}" y="{py(tick) + 4:.1f}" text-anchor="end" font-size="10">{tick:g}</text>')
    for x in xs:
        parts.append(f'<text x="{px(x):.1f}" y="{py(0) + 14:.1f}" text-anchor="middle" font-size="10">{x}</text>')
    methods = list(dict.fromkeys(a.method for a in rows))
    for i, m in enumerate(methods):
        col = _COLORS[i % len(_COLORS)]
        pts = [a for a in rows if a.method == m]
        path = " ".join(f"{px(a.train_size):.1f},{py(a.mean):.1f}" for a in pts)
        parts.append(f'<polyline fill="none" stroke="{col}" stroke-width="2" points="{path}"/>')
        for a in pts:
            parts.append(f'<line x1="{px(a.train_size):.1f}" y1="{py(a.mean - a.se):.1f}" '
                         f'x2="{px(a.train_size):.1f}" y2="{py(a.mean + a.se):.1f}" stroke="{col}"/>')
        parts.append(f'<text x="{width - pad + 4}" y="{pad + 14 * i}" font-size="11" fill="{col}">{m}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def emit_plotdata(aggregates, path, svg: bool = True) -> list:
    """Write ``plotdata.csv`` plus one CSV (and SVG) per shift scenario.

    Returns the written paths. Output is byte-stable for identical input.
    """
    root = Path(path)
    if root.exists() and not root.is_dir():
        raise IoError(f"{root} exists and is not a directory")
    written = []
    _write(root / "plotdata.csv", plot_csv(aggregates))
    written.append(root / "plotdata.csv")
    for shift in dict.fromkeys(a.shift for a in aggregates):
        p = root / f"plot_{shift}.csv"
        _write(p, plot_csv(aggregates, shift))
        written.append(p)
        if svg:
            p = root / f"plot_{shift}.svg"
            _write(p, plot_svg(aggregates, shift))
            written.append(p)
    return written


def write_results(config: ExperimentConfig, rows, out) -> list:
    """Echo the config and write per-cell rows, the summary and plot data."""
    root = Path(out)
    aggs = summarize(rows)
    _write(root / "config.json", json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    _write(root / "rows.csv", rows_csv(rows))
    _write(root / "summary.csv", summary_csv(aggs))
    ndjson = "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in rows)
    _write(root / "rows.ndjson", ndjson)
    return [root / n for n in ("config.json", "rows.csv", "summary.csv", "rows.ndjson")] + emit_plotdata(aggs, root)


def mean_mse(rows, method: str, train_size: int, shift: str | None = None) -> float:
    vals = [r.mse for r in rows if r.method == method and r.train_size == train_size
            and r.error is None and (shift is None or r.shift == shift)]
    return float(np.mean(vals)) if vals else math.nan


# ---------------------------------------------------------------------------
# exact population scoring and the dynamics-shift search


def exact_mse(policy: PolicyArtifact, joint: np.ndarray) -> float:
    """Population one-hot MSE of a tabular policy under an exact ``[u, z, s, w, a]`` law."""
    P = np.asarray(joint).sum(axis=0)  # z, s, w, a
    kz, ks, kw, ka = P.shape
    z, s, w = np.meshgrid(np.arange(kz), np.arange(ks), np.arange(kw), indexing="ij")
    cols = {"z": z.ravel(), "s": s.ravel(), "w": w.ravel()}
    pred = policy.predict(*[cols[k] for k in policy.signature.split(",")]).reshape(kz, ks, kw)
    hit = np.take_along_axis(P, pred[..., None], axis=3).sum()
    return 2.0 * (1.0 - float(hit) / float(P.sum()))


def population_bc_policy(joint: np.ndarray, variant: str = "bc1", context: str = "s,z,w") -> PolicyArtifact:
    """BC target computed from an exact law instead of counts."""
    P = np.asarray(joint).sum(axis=0)
    kz, ks, kw, ka = P.shape
    if variant == "bc1":
        tab = P.sum(axis=(0, 2))
        table = {(s,): int(argmax_lowest(tab[s])) for s in range(ks)}
        return PolicyArtifact("bc1", "s", ka, table=table, domain=(ks,), default_action=0)
    if context == "s,w":
        tab = P.sum(axis=0)  # s, w, a
        table = {(s, w): int(argmax_lowest(tab[s, w])) for s in range(ks) for w in range(kw)}
        return PolicyArtifact("bc2", "s,w", ka, table=table, domain=(ks, kw), default_action=0)
    table = {(s, z, w): int(argmax_lowest(P[z, s, w])) for s in range(ks) for z in range(kz) for w in range(kw)}
    return PolicyArtifact("bc2", "s,z,w", ka, table=table, domain=(ks, kz, kw), default_action=0)


SEARCH_FIELDS = ("B_U_minus", "B_U", "A_S", "B_S", "A_U")
SEARCH_SCALES = (-3.0, -2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0, 3.0)


def search_dynamics_shift(params=None, T: int = 10, fields=SEARCH_FIELDS, scales=SEARCH_SCALES,
                          marginal_tol: float = 0.05) -> dict:
    """Single-coefficient dynamics shift that hurts BC1 most while keeping the latent marginal.

    Each candidate replaces one transition coefficient by ``scale * I``. Among
    candidates whose pooled delayed-latent marginal stays within
    ``marginal_tol`` (L1) of the training one, the winner maximizes the exact
    population MSE gap between the training BC1 table and the optimal policy
    on the shifted law. Ties keep the first candidate in search order.
    """
    params = params or simgen.default_params()
    base = simgen.exact_tuple_joint(params, T)
    m0 = base.sum(axis=(1, 2, 3, 4))
    bc1 = population_bc_policy(base, "bc1")
    oracle = simgen.oracle_pi_opt(params, m0 / m0.sum())
    shapes = simgen._shapes(params.cards)
    best = None
    for name in fields:
        for scale in scales:
            val = scale * np.eye(*shapes[name])
            if np.array_equal(val, getattr(params, name)):
                continue
            shift = simgen.ShiftSpec("dynamics", {name: val})
            J = simgen.exact_tuple_joint(params, T, shift)
            m = J.sum(axis=(1, 2, 3, 4))
            l1 = float(np.abs(m - m0).sum())
            if l1 > marginal_tol:
                continue
            gap = exact_mse(bc1, J) - exact_mse(oracle, J)
            if best is None or gap > best["gap"] + 1e-12:
                best = {"shift": shift, "field": name, "scale": scale, "gap": gap, "marginal_l1": l1,
                        "bc1_mse": exact_mse(bc1, J), "oracle_mse": exact_mse(oracle, J)}
    if best is None:
        raise DomainError("no candidate preserves the latent marginal")
    return best


def load_shift(path) -> simgen.ShiftSpec:
    try:
        with open(path, encoding="utf-8") as f:
            d = json.load(f)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return simgen.ShiftSpec.from_dict(d.get("shift", d))
