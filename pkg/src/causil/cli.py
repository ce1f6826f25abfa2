"""Command-line interface: ``causil simulate | fit | eval | sweep | clinical``.

Settings come from built-in defaults, then an optional ``--config`` JSON file,
then explicit flags (highest precedence). Each command writes the effective
settings next to its output.

Exit codes: 0 success, 2 usage or configuration error, 3 estimation or
numeric failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import bench, clinical, gaussian, simgen
from .baselines import fit_bc
from .continuous import KernelConfig, fit_continuous_policy
from .core import CATEGORICAL, PolicyArtifact, one_hot_mse, pool_tuples, read_ndjson, write_ndjson
from .discrete import fit_discrete_policy
from .errors import (CausilError, DegenerateCut, DegenerateSample, DomainError, EmptyInput, EmptySelection,
                     InsufficientSupport, IoError, NumericError, ParseError, RankDeficient, SchemaError,
                     ShapeError, SingularError)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("causil")

DEFAULTS = {
    "simulate": {"dgp": "categorical", "n": 100, "T": 10, "seed": 0, "shift": "none", "payload": None,
                 "params": None, "gaussian_default": False, "hide_latents": False},
    "fit": {"method": "causil", "context": "s,z,w", "m": None, "seed": 0, "kernel": None},
    "eval": {"context": None},
    "sweep": {"workers": 1},
    "clinical": {"shift": "none", "t0": clinical.DEFAULT_T0, "q": 0.9, "h": 12.0, "seed": 0,
                 "proxy_mode": "first", "lactate_quantile": 0.9, "train_patients": None},
}


class UsageError(CausilError):
    pass


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (IoError, ParseError, OSError)):
        return EXIT_IO
    if isinstance(exc, (RankDeficient, InsufficientSupport, NumericError, SingularError, DegenerateSample,
                        DegenerateCut, EmptySelection, EmptyInput)):
        return EXIT_NUMERIC
    if isinstance(exc, (UsageError, DomainError, ShapeError, SchemaError, json.JSONDecodeError, KeyError,
                        TypeError, ValueError)):
        return EXIT_USAGE
    return EXIT_NUMERIC


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from exc


def _write_json(path, obj) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(obj, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def effective(cmd: str, args: argparse.Namespace) -> dict:
    """Defaults, overridden by the config file, overridden by explicit flags."""
    cfg = dict(DEFAULTS.get(cmd, {}))
    if getattr(args, "config", None) and cmd != "sweep":
        file_cfg = _load_json(args.config)
        unknown = set(file_cfg) - set(cfg) - {"out", "data", "policy", "input"}
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)}")
        cfg.update(file_cfg)
    for key, val in vars(args).items():
        if key in ("cmd", "config", "log_level", "func") or val is None:
            continue
        cfg[key] = val
    return cfg


def _sidecar(out) -> Path:
    out = Path(out)
    return out.with_name(out.stem + ".config.json")


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    cfg = effective("simulate", args)
    seed = int(cfg["seed"])
    if cfg["gaussian_default"] or cfg["dgp"] == "gaussian":
        params = (gaussian.GaussianDgpParams.from_dict(_load_json(cfg["params"])) if cfg["params"]
                  else gaussian.gaussian_default())
        if cfg["shift"] != "none":
            raise UsageError("shifts apply to the categorical model only")
        batch = gaussian.sample_to_batch(gaussian.sample_gaussian(params, int(cfg["n"]), seed=seed))
        cfg.update({"dgp": "gaussian", "T": 1, "resolved_params": params.to_dict()})
    elif cfg["dgp"] == "categorical":
        params = (simgen.CategoricalDgpParams.from_dict(_load_json(cfg["params"])) if cfg["params"]
                  else simgen.default_params())
        shift = _shift_from(cfg, params)
        batch = simgen.simulate(params, int(cfg["n"]), int(cfg["T"]), shift=shift, seed=seed)
        cfg.update({"resolved_params": params.to_dict(), "resolved_shift": shift.to_dict()})
    else:
        raise UsageError(f"unknown dgp {cfg['dgp']!r}")
    if cfg["hide_latents"]:
        batch = batch.hide_latents()
    _write_batch(batch, cfg["out"])
    _write_json(_sidecar(cfg["out"]), cfg)
    N = sum(ep.T for ep in batch.episodes)
    print(f"n={batch.n} T={cfg['T']} N={N} shift={cfg['shift']}")
    return EXIT_OK


def _shift_from(cfg, params) -> simgen.ShiftSpec:
    kind = cfg["shift"]
    if kind == "none":
        return simgen.NO_SHIFT
    if cfg.get("payload"):
        d = _load_json(cfg["payload"])
        d = d.get("shift", d)
        spec = simgen.ShiftSpec.from_dict(d) if "kind" in d else simgen.ShiftSpec(kind, d)
        if spec.kind != kind:
            raise UsageError(f"payload describes a {spec.kind} shift, not {kind}")
        return spec
    if kind == "measurement":
        return simgen.measurement_flip(params)
    raise UsageError("a dynamics shift needs --payload")


def _write_batch(batch, out) -> None:
    try:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        write_ndjson(batch, out)
    except OSError as exc:
        raise IoError(f"cannot write {out}: {exc}") from exc


def _read_batch(path):
    try:
        return read_ndjson(path)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except (json.JSONDecodeError, KeyError) as exc:
        raise ParseError(f"{path}: not a trajectory NDJSON file ({exc})", file=str(path)) from exc


def cmd_fit(args) -> int:
    cfg = effective("fit", args)
    method = cfg["method"]
    if method not in ("causil", "bc1", "bc2"):
        raise UsageError(f"unknown method {method!r}")
    sample = pool_tuples(_read_batch(cfg["data"]))
    out = Path(cfg["out"])
    diag_path = out.with_name(out.stem + ".diagnostics.json")
    _write_json(_sidecar(out), cfg)
    t0 = time.perf_counter()
    try:
        if method == "causil":
            if sample.kind == CATEGORICAL:
                policy = fit_discrete_policy(sample, m=cfg["m"], seed=int(cfg["seed"]))
            else:
                kernel = KernelConfig.from_dict(_load_json(cfg["kernel"])) if cfg["kernel"] else KernelConfig()
                policy = fit_continuous_policy(sample, kernel)
        else:
            policy = fit_bc(sample, method, cfg["context"])
    except CausilError as exc:
        _write_json(diag_path, {"status": "error", "error": f"{type(exc).__name__}: {exc}", "N": sample.N,
                                "method": method})
        raise
    _write_json(out, policy.to_dict())
    log.info("fit took %.1f ms", 1000.0 * (time.perf_counter() - t0))
    _write_json(diag_path, {"status": "ok", "N": sample.N, "method": method, "kind": policy.kind,
                            "diagnostics": policy.metadata.get("diagnostics", {})})
    print(f"fitted {policy.kind} on N={sample.N} -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = effective("eval", args)
    policy = PolicyArtifact.from_dict(_load_json(cfg["policy"]))
    batch = _read_batch(cfg["data"])
    test = pool_tuples(batch)
    if cfg["context"] and cfg["context"] != policy.signature:
        raise UsageError(f"policy reads {policy.signature!r} but {cfg['context']!r} was requested")
    mse = one_hot_mse(policy, test)
    row = bench.ResultRow(policy.kind, -1, int(batch.metadata.get("seed", -1)), str(batch.metadata.get("shift", "none")),
                          mse, diagnostics={"N_test": test.N, "signature": policy.signature})
    out = row.to_dict()
    _write_json(cfg["out"], out)
    _write_json(_sidecar(cfg["out"]), cfg)
    print(f"mse={mse:.6f} N_test={test.N}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg_file = _load_json(args.config) if args.config else {}
    if args.out:
        cfg_file["out"] = args.out
    if not cfg_file.get("out"):
        raise UsageError("sweep needs --out (or 'out' in the config)")
    if args.seeds:
        cfg_file["seeds"] = args.seeds
    config = bench.ExperimentConfig.from_dict(cfg_file)
    rows = bench.run_experiment(config, workers=args.workers or 1)
    bench.write_results(config, rows, config.out)
    n_err = sum(r.error is not None for r in rows)
    for a in bench.summarize(rows):
        print(f"{a.shift:12s} N={a.train_size:5d} {a.method:7s} mean={a.mean:.4f} se={a.se:.4f} errors={a.n_errors}")
    return EXIT_NUMERIC if n_err else EXIT_OK


def cmd_clinical(args) -> int:
    cfg = effective("clinical", args)
    records = clinical.ingest_psv(cfg["input"])
    kept, excluded = clinical.impute_all(records)
    if not kept:
        raise EmptySelection("every patient was excluded")
    n_train = cfg["train_patients"] or len(kept)
    spec = clinical.fit_discretization(kept[:int(n_train)], lactate_quantile=float(cfg["lactate_quantile"]))
    if cfg["shift"] == "population":
        # the lactate quantile is taken over observed readings, not imputed ones
        ids = {r.pid for r in kept}
        chosen = clinical.select_shifted_population([r for r in records if r.pid in ids], q=float(cfg["q"]),
                                                    h=float(cfg["h"]))
        chosen_ids = {r.pid for r in chosen}
        kept = [r for r in kept if r.pid in chosen_ids]
    elif cfg["shift"] not in ("none", "measurement"):
        raise UsageError(f"unknown clinical shift {cfg['shift']!r}")
    batch = clinical.build_task([clinical.discretize(r, spec) for r in kept], seed=int(cfg["seed"]),
                                proxy_mode=cfg["proxy_mode"])
    if cfg["shift"] == "measurement":
        batch = clinical.apply_measurement_shift(batch, int(cfg["t0"]))
        if "shift_warning" in batch.metadata:
            log.warning(batch.metadata["shift_warning"])
    _write_batch(batch, cfg["out"])
    cfg.update({"excluded": [e.pid for e in excluded], "discretization": spec.to_dict()})
    _write_json(_sidecar(cfg["out"]), cfg)
    print(f"patients={batch.n} excluded={len(excluded)} N={sum(ep.T for ep in batch.episodes)} shift={cfg['shift']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="causil", description="Causal imitation learning under measurement error.")
    p.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("simulate", help="simulate demonstration trajectories")
    s.add_argument("--config")
    s.add_argument("--dgp", choices=("categorical", "gaussian"))
    s.add_argument("--gaussian-default", action="store_const", const=True, dest="gaussian_default")
    s.add_argument("--params", help="JSON parameter file")
    s.add_argument("--n", type=int)
    s.add_argument("--T", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--shift", choices=("none", "measurement", "dynamics"))
    s.add_argument("--payload", help="JSON shift payload")
    s.add_argument("--hide-latents", action="store_const", const=True, dest="hide_latents")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit a policy")
    f.add_argument("--config")
    f.add_argument("--data", required=True)
    f.add_argument("--method")
    f.add_argument("--context", choices=("s,w", "s,z,w"))
    f.add_argument("--m", type=int, help="coarsening size (discrete CausIL)")
    f.add_argument("--seed", type=int)
    f.add_argument("--kernel", help="JSON kernel config (continuous CausIL)")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="score a policy on a test batch")
    e.add_argument("--config")
    e.add_argument("--policy", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--context", choices=("s", "s,w", "s,z,w"))
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("sweep", help="run a train-size / seed sweep")
    w.add_argument("--config")
    w.add_argument("--out")
    w.add_argument("--workers", type=int)
    w.add_argument("--seeds", type=int, nargs="+")
    w.set_defaults(func=cmd_sweep)

    c = sub.add_parser("clinical", help="build the semi-simulated ICU task")
    c.add_argument("--config")
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--shift", choices=("none", "measurement", "population"))
    c.add_argument("--t0", type=int)
    c.add_argument("--q", type=float)
    c.add_argument("--h", type=float)
    c.add_argument("--seed", type=int)
    c.add_argument("--proxy-mode", choices=clinical.PROXY_MODES, dest="proxy_mode")
    c.add_argument("--lactate-quantile", type=float, dest="lactate_quantile")
    c.add_argument("--train-patients", type=int, dest="train_patients")
    c.set_defaults(func=cmd_clinical)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CausilError, OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        print(f"causil {args.cmd}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
