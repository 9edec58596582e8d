"""Command-line front end: configured runs, study grids, rate tables, oracles.

Config files are INI with four sections::

    [model]       d-independent portfolio parameters (S0, K, mu, mu0, T, tau,
                  c, var_first, var_rest, decay)
    [study]       methods, dims, tol_list, profile, seed, output
    [smoothing]   mode, newton_tol, max_iterations, m_lag, lag_scale
    [algorithm1]  omega, L0, N_star, m0, alpha, max_level_cap

Every key is optional; unknown sections or keys are errors.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .driver import (
    PROFILES,
    InsufficientLevelsError,
    RunConfig,
    RunReport,
    fit_cost_exponent,
    fit_rates,
    run_mlmc,
)
from .estimators import MethodKind, nested_indicators
from .model import ModelSpec, conditional_loss, outer_map, paper_model
from .numkit import RngStream
from .smoothing import SmoothingParams

__all__ = [
    "ConfigError",
    "StudySpec",
    "parse_config",
    "run_study",
    "emit_rate_table",
    "compute_oracle",
    "main",
    "OUT_ENV",
]

log = logging.getLogger(__name__)

OUT_ENV = "NESTED_MLMC_OUT"
LEVELS_HEADER = ["level", "m_l", "N_l", "mean", "variance", "kurtosis", "cost_units"]
COST_HEADER = ["method", "d", "tol", "total_cost", "estimate"]
RATES_HEADER = ["method", "d", "alpha_hat", "beta_hat", "cost_exponent", "max_kurtosis",
                "kurtosis_deepest", "status"]


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


MODEL_DEFAULTS = {"S0": 100.0, "K": 95.0, "mu": 0.08, "mu0": 0.05, "T": 0.1, "tau": 0.02,
                  "c": None, "var_first": 0.3, "var_rest": 0.3, "decay": 0.98}
STUDY_DEFAULTS = {"methods": "SmoothedMLMC", "dims": "4", "tol_list": "0.01",
                  "profile": "desk", "seed": 0, "output": "results"}
SMOOTHING_DEFAULTS = {"mode": "analytic", "newton_tol": 1e-10, "max_iterations": 100,
                      "m_lag": 32, "lag_scale": 0.2}
ALG_DEFAULTS = {"omega": 0.16, "L0": 2, "N_star": None, "m0": 32, "alpha": 1.0,
                "max_level_cap": None}
SECTIONS = {"model": MODEL_DEFAULTS, "study": STUDY_DEFAULTS,
            "smoothing": SMOOTHING_DEFAULTS, "algorithm1": ALG_DEFAULTS}


@dataclass(frozen=True)
class StudySpec:
    """A validated study grid: every (method, d, tol) cell is one adaptive run."""

    model_params: dict
    methods: tuple
    dims: tuple
    tol_list: tuple
    profile: str
    seed: int
    output: Path
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        if not self.methods or not self.dims or not self.tol_list:
            raise ConfigError("study: methods, dims and tol_list must be non-empty")

    def model_for(self, d: int) -> ModelSpec:
        return paper_model(d, **self.model_params)

    @property
    def model(self) -> ModelSpec:
        return self.model_for(self.dims[0])

    def cells(self):
        for mk in self.methods:
            for d in self.dims:
                for tol in self.tol_list:
                    yield mk, d, tol

    def config_for(self, method: MethodKind, tol: float) -> RunConfig:
        return self.run.replace(method=method, tol=tol, seed=self.seed)

    def to_dict(self) -> dict:
        return {
            "model": self.model_params,
            "methods": [m.value for m in self.methods],
            "dims": list(self.dims),
            "tol_list": list(self.tol_list),
            "profile": self.profile,
            "seed": self.seed,
            "output": str(self.output),
            "algorithm1": self.run.to_dict(),
        }


def _number(section, key, raw, kind):
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}: expected {kind.__name__}, got {raw!r}") from None


def _list(section, key, raw, kind):
    items = [x.strip() for x in str(raw).replace(";", ",").split(",") if x.strip()]
    if not items:
        raise ConfigError(f"{section}.{key}: must not be empty")
    return [_number(section, key, x, kind) for x in items]


def parse_config(path, *, profile: str | None = None, seed: int | None = None,
                 output=None) -> StudySpec:
    """Read and validate an INI study config.

    ``profile``, ``seed`` and ``output`` override the file; the output
    directory may also come from the ``NESTED_MLMC_OUT`` environment variable
    (the ``output`` argument wins over both).
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as err:
        raise ConfigError(f"malformed config {path}: {err}") from None
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]; expected one of {sorted(SECTIONS)}")
        for key in parser[sec]:
            if key not in SECTIONS[sec]:
                raise ConfigError(f"{sec}.{key}: unknown key")
    get = lambda sec, key: parser.get(sec, key, fallback=None)

    model = {}
    for key, default in MODEL_DEFAULTS.items():
        raw = get("model", key)
        model[key] = default if raw is None else _number("model", key, raw, float)
    if not model["tau"] < model["T"]:
        raise ConfigError(f"model.tau: constraint tau < T violated (tau={model['tau']}, T={model['T']})")
    if not model["tau"] > 0:
        raise ConfigError(f"model.tau: constraint tau > 0 violated (tau={model['tau']})")
    for key in ("S0", "K"):
        if not model[key] > 0:
            raise ConfigError(f"model.{key}: constraint {key} > 0 violated")
    for key in ("var_first", "var_rest"):
        if model[key] < 0:
            raise ConfigError(f"model.{key}: constraint {key} >= 0 violated")
    if not 0.0 <= model["decay"] <= 1.0:
        raise ConfigError("model.decay: constraint 0 <= decay <= 1 violated")

    study = {k: (get("study", k) if get("study", k) is not None else v)
             for k, v in STUDY_DEFAULTS.items()}
    methods = []
    for name in str(study["methods"]).split(","):
        name = name.strip()
        if not name:
            continue
        try:
            mk = MethodKind.parse(name)
        except ValueError as err:
            raise ConfigError(f"study.methods: {err}") from None
        if mk in methods:
            warnings.warn(f"study.methods: duplicate entry {mk.value} ignored", stacklevel=2)
            continue
        methods.append(mk)
    dims = _list("study", "dims", study["dims"], int)
    if any(d < 1 for d in dims):
        raise ConfigError("study.dims: constraint d >= 1 violated")
    dims = list(dict.fromkeys(dims))
    tols = _list("study", "tol_list", study["tol_list"], float)
    if any(not t > 0 for t in tols):
        raise ConfigError("study.tol_list: constraint tol > 0 violated")
    tols = list(dict.fromkeys(tols))
    prof = profile or str(study["profile"])
    if prof not in PROFILES:
        raise ConfigError(f"study.profile: expected one of {sorted(PROFILES)}, got {prof!r}")
    seed_v = seed if seed is not None else _number("study", "seed", study["seed"], int)
    out = output or os.environ.get(OUT_ENV) or study["output"]

    sm = {}
    for key, default in SMOOTHING_DEFAULTS.items():
        raw = get("smoothing", key)
        kind = type(default)
        sm[key] = default if raw is None else (raw.strip() if kind is str
                                               else _number("smoothing", key, raw, kind))
    try:
        smoothing = SmoothingParams(**sm)
    except ValueError as err:
        raise ConfigError(f"smoothing: {err}") from None

    alg = dict(PROFILES[prof])
    for key, default in ALG_DEFAULTS.items():
        raw = get("algorithm1", key)
        kind = float if key in ("omega", "alpha") else int
        if raw is not None:
            alg[key] = _number("algorithm1", key, raw, kind)
        elif default is not None:
            alg[key] = default
    try:
        run = RunConfig(method=methods[0] if methods else MethodKind.SMOOTHED_MLMC,
                        tol=tols[0], omega_split=alg["omega"], L0=alg["L0"],
                        N_star=alg["N_star"], m0=alg["m0"], alpha=alg["alpha"], seed=seed_v,
                        max_level_cap=alg["max_level_cap"], smoothing=smoothing)
    except ValueError as err:
        raise ConfigError(f"algorithm1: {err}") from None

    spec = StudySpec(model_params=model, methods=tuple(methods), dims=tuple(dims),
                     tol_list=tuple(tols), profile=prof, seed=seed_v, output=Path(out), run=run)
    for d in dims:
        try:
            m = spec.model_for(d)
        except ValueError as err:
            raise ConfigError(f"model (d={d}): {err}") from None
        if any(mk.smoothed for mk in methods) and not m.separable:
            raise ConfigError(f"model.var_first: smoothed methods need var_first > 0 (d={d})")
    return spec


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, MethodKind):
        return x.value
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def _json_default(x):
    if isinstance(x, MethodKind):
        return x.value
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, Path):
        return str(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def cell_dir(root: Path, method: MethodKind, d: int, tol: float) -> Path:
    return Path(root) / method.value / f"d{d}" / f"tol{tol:.6g}"


def write_run(directory: Path, report: RunReport, seed: int, extra: dict | None = None):
    """``levels.csv`` and ``summary.json`` for one run.

    ``wall_time`` goes to summary.json only, so the CSV is reproducible.
    """
    rows = [[r.level, r.m_l, r.N_l, r.mean, r.variance, r.kurtosis, r.cost_units]
            for r in report.levels]
    _atomic_write(directory / "levels.csv", _csv_text(LEVELS_HEADER, rows))
    summary = report.to_dict()
    summary["seed"] = seed
    if extra:
        summary.update(extra)
    _atomic_write(directory / "summary.json", _json_text(summary))


def _run_cell(spec: StudySpec, method: MethodKind, d: int, tol: float):
    model = spec.model_for(d)
    cfg = spec.config_for(method, tol)
    try:
        report = run_mlmc(model, cfg)
    except Exception as err:  # recorded, the study continues
        log.exception("run %s d=%d tol=%g failed", method.value, d, tol)
        summary = {"method": method.value, "d": d, "tol": tol, "status": "failed",
                   "message": f"{type(err).__name__}: {err}", "converged": False,
                   "seed": spec.seed, "config": cfg.to_dict(), "model": model.to_dict(),
                   "study": spec.to_dict()}
        _atomic_write(cell_dir(spec.output, method, d, tol) / "summary.json", _json_text(summary))
        return method, d, tol, None
    write_run(cell_dir(spec.output, method, d, tol), report, spec.seed,
              {"d": d, "tol": tol, "study": spec.to_dict()})
    return method, d, tol, (report.total_cost, report.estimate, report.converged)


def run_study(spec: StudySpec, *, parallel: int = 0) -> int:
    """Run every cell of the grid and write outputs; returns the exit status."""
    cells = list(spec.cells())
    if parallel and parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_run_cell, [spec] * len(cells), *zip(*cells)))
    else:
        results = [_run_cell(spec, *c) for c in cells]
    rows, ok = [], True
    for method, d, tol, res in results:
        if res is None:
            ok = False
            continue
        cost, est, converged = res
        ok &= converged
        rows.append([method, d, tol, cost, est])
    _atomic_write(Path(spec.output) / "cost_vs_tol.csv", _csv_text(COST_HEADER, rows))
    emit_rate_table(spec.output, spec)
    return 0 if ok else 1


def _read_levels(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LEVELS_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return list(reader)


class _Rec:
    """Minimal level record for :func:`fit_rates` built from a CSV row."""

    def __init__(self, row):
        self.level = int(row["level"])
        self.N_l = int(row["N_l"])
        self.mean = float(row["mean"])
        self.variance = float(row["variance"])
        self.cost_per_sample = int(row["cost_units"]) / self.N_l
        self.kurtosis = float(row["kurtosis"]) if row["kurtosis"] else None


def emit_rate_table(root, spec: StudySpec | None = None) -> Path:
    """Summarize a study directory into ``rates.csv``.

    One row per (method, d): rates from the tightest-tolerance run, the cost
    exponent over all tolerances, and kurtosis diagnostics.  Rows with a
    missing or failed run are flagged ``incomplete``.
    """
    root = Path(root)
    found: dict = {}
    for summary in sorted(root.glob("*/d*/tol*/summary.json")):
        tol_dir = summary.parent
        method = MethodKind.parse(tol_dir.parent.parent.name)
        d = int(tol_dir.parent.name[1:])
        found.setdefault((method, d), []).append(tol_dir)
    if spec is not None:
        for mk, d, _ in spec.cells():
            found.setdefault((mk, d), [])
    rows = []
    for (method, d), dirs in sorted(found.items(), key=lambda kv: (kv[0][0].value, kv[0][1])):
        status = "complete"
        runs = []
        for tdir in dirs:
            info = json.loads((tdir / "summary.json").read_text())
            if info.get("status") == "failed" or not (tdir / "levels.csv").exists():
                status = "incomplete"
                continue
            runs.append((float(info.get("tol", tdir.name[3:])), info, _read_levels(tdir / "levels.csv")))
        expected = {t for mk, dd, t in spec.cells() if mk is method and dd == d} if spec else set()
        if not runs or (expected and {r[0] for r in runs} != expected):
            status = "incomplete"
        alpha = beta = expo = kmax = kdeep = None
        if runs:
            runs.sort(key=lambda r: r[0])
            recs = [_Rec(row) for row in runs[0][2]]
            try:
                rates = fit_rates(recs)
                alpha, beta = rates.alpha_hat, rates.beta_hat
            except InsufficientLevelsError:
                pass
            kurts = [r.kurtosis for r in recs if r.kurtosis is not None]
            kmax = max(kurts) if kurts else None
            kdeep = recs[-1].kurtosis
            if len(runs) >= 2:
                expo = fit_cost_exponent([r[0] for r in runs], [r[1]["total_cost"] for r in runs])
        rows.append([method, d, alpha, beta, expo, kmax, kdeep, status])
    path = root / "rates.csv"
    _atomic_write(path, _csv_text(RATES_HEADER, rows))
    return path


# ---------------------------------------------------------------------------
# Oracle
# ---------------------------------------------------------------------------


_ORACLE_STREAM = 0xC0FFEE


def compute_oracle(d: int = 4, n: int = 2_000_000, m: int = 1 << 14, seed: int = 2024,
                   nested_n: int = 20_000, model: ModelSpec | None = None,
                   chunk: int = 1 << 18) -> dict:
    """Reference loss probability with provenance.

    The primary value averages ``1{phi(omega) > c}`` over ``n`` outer
    scenarios with the conditional loss ``phi`` in closed form, i.e. the
    nested estimator in the limit of infinite inner samples.  A plain nested
    run with ``nested_n`` scenarios and ``m`` inner samples is recorded as a
    cross-check of the same quantity.
    """
    spec = model if model is not None else paper_model(d)
    t0 = time.perf_counter()
    stream = RngStream(seed, _ORACLE_STREAM)
    hits = 0
    for a in range(0, n, chunk):
        k = min(chunk, n - a)
        z = stream.normals(a * spec.d, k * spec.d).reshape(k, spec.d)
        hits += int(np.count_nonzero(conditional_loss(spec, outer_map(spec, z)) > spec.c))
    p = hits / n
    se = math.sqrt(p * (1.0 - p) / (n - 1)) if n > 1 else math.inf
    out = {
        "estimate": p,
        "std_error": se,
        "n": n,
        "method": "closed-form conditional loss, n outer scenarios",
        "seed": seed,
        "model": spec.to_dict(),
        "V0": spec.V0,
    }
    if nested_n > 0:
        g = nested_indicators(spec, m, 0, nested_n, seed)
        q = float(g.mean())
        out["nested_check"] = {
            "estimate": q,
            "std_error": math.sqrt(q * (1.0 - q) / (nested_n - 1)) if nested_n > 1 else math.inf,
            "n": nested_n,
            "m": m,
        }
    out["wall_time"] = time.perf_counter() - t0
    return out


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


_HELP_EPILOG = """config defaults:
  [model]      S0=100 K=95 mu=0.08 mu0=0.05 T=0.1 tau=0.02 c=0.5*V0
               var_first=0.3 var_rest=0.3 decay=0.98
  [study]      methods=SmoothedMLMC dims=4 tol_list=0.01 profile=desk seed=0
               output=results  (env {env} overrides output)
  [smoothing]  mode=analytic newton_tol=1e-10 max_iterations=100 m_lag=32
               lag_scale=0.2
  [algorithm1] omega=0.16 L0=2 m0=32 alpha=1
               N_star / max_level_cap from the profile
               (desk: 20000 / 7, paper: 200000 / 12)
methods: {methods}
""".format(env=OUT_ENV, methods=", ".join(m.value for m in MethodKind))


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nested-mlmc", description=__doc__.splitlines()[0],
                                epilog=_HELP_EPILOG,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--profile", choices=sorted(PROFILES))
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=f"output directory (default: config, then ${OUT_ENV})")

    sp = sub.add_parser("run", help="one adaptive run (config with a single method, d and tol)")
    sp.add_argument("config")
    common(sp)
    sp = sub.add_parser("study", help="every (method, d, tol) cell of a config")
    sp.add_argument("config")
    sp.add_argument("--parallel", type=int, default=0, metavar="N",
                    help="run cells in N worker processes")
    common(sp)
    sp = sub.add_parser("rates", help="rebuild rates.csv from a study directory")
    sp.add_argument("directory")
    sp = sub.add_parser("oracle", help="reference loss probability as JSON")
    sp.add_argument("--d", type=int, default=4)
    sp.add_argument("--n", type=int, default=2_000_000)
    sp.add_argument("--m", type=int, default=1 << 14)
    sp.add_argument("--nested-n", type=int, default=20_000)
    sp.add_argument("--seed", type=int, default=2024)
    sp.add_argument("--out", help="JSON file (default: stdout)")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb in ("run", "study"):
            spec = parse_config(args.config, profile=args.profile, seed=args.seed, output=args.out)
            if args.verb == "run":
                if len(spec.methods) * len(spec.dims) * len(spec.tol_list) != 1:
                    raise ConfigError("run: config must name exactly one method, d and tol; "
                                      "use 'study' for grids")
                (mk, d, tol), = spec.cells()
                model = spec.model_for(d)
                report = run_mlmc(model, spec.config_for(mk, tol))
                write_run(Path(spec.output), report, spec.seed,
                          {"d": d, "tol": tol, "study": spec.to_dict()})
                print(f"{mk.value} d={d} tol={tol:g}: estimate {report.estimate:.6g} "
                      f"L={report.L} cost={report.total_cost} status={report.status}")
                return 0 if report.converged else 1
            status = run_study(spec, parallel=args.parallel)
            print(f"study written to {spec.output} (exit {status})")
            return status
        if args.verb == "rates":
            print(emit_rate_table(args.directory))
            return 0
        if args.verb == "oracle":
            res = compute_oracle(args.d, args.n, args.m, args.seed, args.nested_n)
            text = _json_text(res)
            if args.out:
                _atomic_write(Path(args.out), text)
            else:
                sys.stdout.write(text)
            return 0
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
