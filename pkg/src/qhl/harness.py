"""Config-driven experiment runner behind the ``qhl`` command line.

A config is a JSON object::

    {"experiment": "simulate-hawkes", "master_seed": 7, "n_reps": 4,
     "threads": 0, "params": {...}}

``params`` depends on the experiment (see ``SCHEMAS``). Unknown fields are
rejected everywhere. Artifacts are written to a scratch directory which is
renamed into place only when the run succeeds, together with a
``manifest.json`` listing every file and its SHA-256 digest. Artifact bytes
depend only on the config and the seed: replications use their own random
streams and fixed-size work chunks, whatever the number of workers.
"""

import hashlib
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed
from scipy import stats
from threadpoolctl import threadpool_limits

from . import diagnostics as diag
from ._random import stream
from .exceptions import (
    AccuracyLossError,
    ConfigurationError,
    DivergenceError,
    ExplosionError,
    InsufficientDataError,
    QHLError,
    StabilityError,
    UndefinedExponentError,
    ValidationError,
)
from .kernels import MittagLeffler, kernel_from_dict
from .qhawkes import QHawkesParams, simulate, time_change_residuals
from .scaling import _check_schedule, make_schedule, rescale_stable, rescale_unstable
from .volterra import model_from_dict, model_to_dict, simulate_limit

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

CHUNK = 16
THREADS_ENV = "QHL_THREADS"

EXPERIMENTS = ("simulate-hawkes", "simulate-limit", "converge", "zumbach", "holder", "ml-table")
TOP_FIELDS = {"experiment", "master_seed", "n_reps", "threads", "output", "params"}
SCHEMAS = {
    "simulate-hawkes": {"required": {"hawkes"}, "optional": {"rescale", "residuals"}},
    "simulate-limit": {"required": {"model"}, "optional": set()},
    "converge": {
        "required": {"macro", "mother_k", "T_ladder"},
        "optional": {"mother_phi", "functional", "t_fixed", "n_macro", "schedule"},
    },
    "zumbach": {"required": {"model"}, "optional": {"window", "block", "burn_in", "n_boot", "level", "proxy"}},
    "holder": {"required": {"model"}, "optional": {"series", "q_list", "lag_range"}},
    "ml-table": {"required": {"alpha", "lambda", "t"}, "optional": set()},
}
_RESCALE_FIELDS = {"n_grid", "schedule"}
_SCHEDULE_FIELDS = {"alpha", "lambda_macro", "mu_star", "K"}


@dataclass
class ExperimentConfig:
    experiment: str
    params: dict
    master_seed: int = 0
    n_reps: int = 1
    threads: int = 0
    output: str = None
    raw: dict = field(default_factory=dict)

    def canonical(self):
        """Everything that determines the artifacts (threads excluded)."""
        return {
            "experiment": self.experiment,
            "master_seed": self.master_seed,
            "n_reps": self.n_reps,
            "params": self.params,
        }


def _check_fields(block, allowed, where, required=()):
    if not isinstance(block, dict):
        raise ValidationError(f"{where} must be a JSON object")
    extra = set(block) - set(allowed)
    if extra:
        raise ValidationError(f"unknown field(s) in {where}: {sorted(extra)}")
    missing = set(required) - set(block)
    if missing:
        raise ValidationError(f"missing field(s) in {where}: {sorted(missing)}")


def parse_config(obj, experiment=None, seed=None, threads=None, output=None):
    """Validate a config object; command-line values override the file."""
    _check_fields(obj, TOP_FIELDS, "config")
    kind = obj.get("experiment", experiment)
    if experiment is not None and kind != experiment:
        raise ValidationError(f"config is for experiment {kind!r} but {experiment!r} was requested")
    if kind not in EXPERIMENTS:
        raise ValidationError(f"experiment must be one of {EXPERIMENTS}, got {kind!r}")
    params = obj.get("params", {})
    schema = SCHEMAS[kind]
    _check_fields(params, schema["required"] | schema["optional"], "params", schema["required"])
    master_seed = seed if seed is not None else obj.get("master_seed", 0)
    if not isinstance(master_seed, int) or not 0 <= master_seed < 2**64:
        raise ValidationError(f"master_seed must be an unsigned 64-bit integer, got {master_seed!r}")
    n_reps = obj.get("n_reps", 1)
    if not isinstance(n_reps, int) or n_reps < 1:
        raise ValidationError(f"n_reps must be a positive integer, got {n_reps!r}")
    if threads is None:
        threads = obj.get("threads")
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "0") or 0)
    if not isinstance(threads, int) or threads < 0:
        raise ValidationError(f"threads must be a non-negative integer, got {threads!r}")
    cfg = ExperimentConfig(kind, params, master_seed, n_reps, threads, output or obj.get("output"), obj)
    _validate_params(cfg)
    return cfg


def _schedule_from(d):
    _check_fields(d, _SCHEDULE_FIELDS, "schedule", _SCHEDULE_FIELDS)
    return make_schedule(d["alpha"], d["lambda_macro"], d["mu_star"], d["K"])


def _validate_params(cfg):
    """Build every model object once so that errors surface before any work."""
    p = cfg.params
    if cfg.experiment == "simulate-hawkes":
        hp = QHawkesParams.from_dict(p["hawkes"])
        if "rescale" in p:
            _check_fields(p["rescale"], _RESCALE_FIELDS, "rescale")
            if "schedule" in p["rescale"]:
                _check_schedule(hp, _schedule_from(p["rescale"]["schedule"]))
    elif cfg.experiment in ("simulate-limit", "zumbach", "holder"):
        model_from_dict(p["model"])
        if p.get("proxy", "realized") not in ("realized", "true_variance"):
            raise ValidationError("proxy must be 'realized' or 'true_variance'")
        if p.get("series", "V") not in ("V", "Z", "P"):
            raise ValidationError("series must be one of 'V', 'Z', 'P'")
    elif cfg.experiment == "converge":
        macro = model_from_dict(p["macro"])
        k = kernel_from_dict(p["mother_k"])
        phi = kernel_from_dict(p.get("mother_phi", {"variant": "zero"}))
        sched = _schedule_from(p["schedule"]) if "schedule" in p else None
        if len(p["T_ladder"]) < 3:
            raise ConfigurationError("a convergence ladder needs at least three horizons")
        for T in p["T_ladder"]:
            diag._micro_params(macro, k, phi, float(T), sched)
    elif cfg.experiment == "ml-table":
        for name in ("alpha", "lambda", "t"):
            if not isinstance(p[name], list) or not p[name]:
                raise ValidationError(f"{name} must be a non-empty list")


# --- workers -----------------------------------------------------------------


def _n_jobs(threads):
    return (os.cpu_count() or 1) if threads == 0 else threads


def _map_chunks(fn, n_items, threads, *args):
    """Run ``fn(indices, *args)`` over fixed chunks; results merged by index."""
    chunks = [list(range(s, min(s + CHUNK, n_items))) for s in range(0, n_items, CHUNK)]
    n_jobs = min(_n_jobs(threads), len(chunks))
    if n_jobs <= 1:
        parts = [fn(c, *args) for c in chunks]
    else:
        parts = Parallel(n_jobs=n_jobs)(delayed(fn)(c, *args) for c in chunks)
    out = []
    for part in parts:
        out.extend(part)
    return out


def _hawkes_chunk(indices, hp_dict, seed, residuals):
    hp = QHawkesParams.from_dict(hp_dict)
    out = []
    with threadpool_limits(1):
        for i in indices:
            ev = simulate(hp, stream(seed, i))
            r = time_change_residuals(hp, ev) if residuals else None
            out.append((i, ev, r))
    return out


def _limit_chunk(indices, model_dict, seed):
    spec = model_from_dict(model_dict)
    with threadpool_limits(1):
        path = simulate_limit(spec, seed, len(indices), indices[0])
    return [path[j] for j in range(len(indices))]


# --- experiments ---------------------------------------------------------------


def _fmt(v):
    return repr(float(v))


def _write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _run_simulate_hawkes(cfg, out):
    p = cfg.params
    hp = QHawkesParams.from_dict(p["hawkes"])
    want_res = bool(p.get("residuals", False))
    results = _map_chunks(_hawkes_chunk, cfg.n_reps, cfg.threads, hp.to_dict(), cfg.master_seed, want_res)
    rescale = p.get("rescale")
    sched = _schedule_from(rescale["schedule"]) if rescale and "schedule" in rescale else None
    summary = []
    for i, ev, res in results:
        ev.to_csv(out / f"events_{i:04d}.csv")
        row = {"replication": i, "n_events": len(ev), "final_price": int(ev.signs.sum())}
        if res is not None and res.size:
            row["residual_mean"] = float(res.mean())
            row["residual_ks_pvalue"] = float(stats.kstest(res, "expon").pvalue)
        if rescale is not None:
            n_grid = rescale.get("n_grid", 512)
            rp = rescale_stable(ev, hp, n_grid) if sched is None else rescale_unstable(ev, hp, sched, n_grid)
            meta = {"seed": cfg.master_seed, "replication": i, "params": hp.to_dict()}
            if sched is not None:
                meta["schedule"] = sched.to_dict()
            rp.to_csv(out / f"rescaled_{i:04d}.csv", metadata=meta)
            row["oversampled_grid"] = bool(rp.oversampled)
        summary.append(row)
    _write_json(out / "summary.json", {"replications": summary})


def _simulate_paths(cfg, model_dict):
    return _map_chunks(_limit_chunk, cfg.n_reps, cfg.threads, model_dict, cfg.master_seed)


def _stack(paths, attr):
    return np.vstack([getattr(p, attr) for p in paths])


def _run_simulate_limit(cfg, out):
    spec = model_from_dict(cfg.params["model"])
    paths = _simulate_paths(cfg, model_to_dict(spec))
    rows = []
    for i, path in enumerate(paths):
        path.to_csv(out / f"path_{i:04d}.csv")
        rows.append({"replication": i, "V_end": float(path.V[0, -1]), "clip_fraction": path.clip_fraction})
    _write_json(out / "summary.json", {"model": model_to_dict(spec), "replications": rows})


def _run_zumbach(cfg, out):
    p = cfg.params
    spec = model_from_dict(p["model"])
    paths = _simulate_paths(cfg, model_to_dict(spec))
    price = _stack(paths, "P")
    vol = _stack(paths, "V") if p.get("proxy", "realized") == "true_variance" else None
    res = diag.weak_zumbach(
        price,
        vol,
        window=p.get("window", 4),
        block=p.get("block", diag.ZUMBACH_BLOCK),
        dt=spec.horizon / spec.n_steps,
        burn_in=p.get("burn_in", 0.0),
        n_boot=p.get("n_boot", diag.N_BOOT),
        level=p.get("level", 0.99),
        random_state=stream(cfg.master_seed, None),
    )
    report = diag.DiagnosticsReport(
        zumbach={
            "statistic": res.statistic,
            "ci": [res.ci_low, res.ci_high],
            "window": res.window,
            "n_anchors": res.n_anchors,
            "n_paths": res.n_paths,
            "level": res.level,
            "proxy": res.proxy,
        },
        metadata={"seed": cfg.master_seed, "model": model_to_dict(spec)},
    )
    report.to_json(out / "report.json")


def _run_holder(cfg, out):
    p = cfg.params
    spec = model_from_dict(p["model"])
    paths = _simulate_paths(cfg, model_to_dict(spec))
    series = _stack(paths, p.get("series", "V"))
    res = diag.holder_estimate(series, tuple(p.get("q_list", diag.HOLDER_QS)), p.get("lag_range"))
    report = diag.DiagnosticsReport(
        holder={
            "H": res.H,
            "label": res.label,
            "r2": res.r2,
            "slopes": {str(q): s for q, s in res.slopes.items()},
            "lags": res.lags,
        },
        metadata={"seed": cfg.master_seed, "model": model_to_dict(spec)},
    )
    report.to_json(out / "report.json")


def _run_converge(cfg, out):
    p = cfg.params
    macro = model_from_dict(p["macro"])
    sched = _schedule_from(p["schedule"]) if "schedule" in p else None
    with threadpool_limits(1):
        report = diag.convergence_ladder(
            macro,
            kernel_from_dict(p["mother_k"]),
            p["T_ladder"],
            cfg.n_reps,
            cfg.master_seed,
            mother_phi=kernel_from_dict(p.get("mother_phi", {"variant": "zero"})),
            functional=p.get("functional", "X1"),
            t_fixed=p.get("t_fixed", 0.5),
            n_macro=p.get("n_macro"),
            schedule=sched,
            n_jobs=min(_n_jobs(cfg.threads), 8),
        )
    report.metadata["model"] = model_to_dict(macro)
    report.metadata["monotone_within_2_mc_error"] = report.monotone_within_noise(2.0)
    report.to_json(out / "report.json")
    report.ladder_to_csv(out / "ladder.csv")


def ml_table(alpha_list, lambda_list, t_grid):
    """Rows ``(alpha, lambda, t, f, F)`` of the Mittag-Leffler density and its integral."""
    if not alpha_list or not lambda_list or len(t_grid) == 0:
        raise ValidationError("parameter grids must be non-empty")
    rows = []
    for a in alpha_list:
        for lam in lambda_list:
            ker = MittagLeffler(float(a), float(lam))
            for t in t_grid:
                t = float(t)
                rows.append((float(a), float(lam), t, float(ker(t)), float(ker.integral(t))))
    return rows


def write_ml_table(rows, path):
    with open(path, "w") as fh:
        fh.write("alpha,lambda,t,f,F\n")
        for a, lam, t, f, F in rows:
            fval = "inf" if math.isinf(f) else _fmt(f)
            fh.write(f"{_fmt(a)},{_fmt(lam)},{_fmt(t)},{fval},{_fmt(F)}\n")


def _run_ml_table(cfg, out):
    p = cfg.params
    write_ml_table(ml_table(p["alpha"], p["lambda"], p["t"]), out / "ml_table.csv")


RUNNERS = {
    "simulate-hawkes": _run_simulate_hawkes,
    "simulate-limit": _run_simulate_limit,
    "converge": _run_converge,
    "zumbach": _run_zumbach,
    "holder": _run_holder,
    "ml-table": _run_ml_table,
}


# --- orchestration -------------------------------------------------------------


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    out = {}
    for dist in ("artifact", "numpy", "scipy", "numba", "mpmath", "scikit-learn", "joblib"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = None
    return out


def run(cfg, out_dir, force=False):
    """Execute ``cfg`` and move its artifacts to ``out_dir``; returns the manifest."""
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise FileExistsError(f"output directory {out_dir} is not empty (use --force to replace it)")
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        RUNNERS[cfg.experiment](cfg, tmp)
        canon = cfg.canonical()
        blob = json.dumps(canon, sort_keys=True, separators=(",", ":")).encode()
        files = sorted(p.name for p in tmp.iterdir())
        manifest = {
            "experiment": cfg.experiment,
            "config": canon,
            "config_sha256": hashlib.sha256(blob).hexdigest(),
            "master_seed": cfg.master_seed,
            "versions": _versions(),
            "files": [{"name": f, "sha256": _sha256(tmp / f)} for f in files],
        }
        _write_json(tmp / "manifest.json", manifest)
        if out_dir.exists():
            shutil.rmtree(out_dir)
        tmp.rename(out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest


_NUMERICAL = (AccuracyLossError, ExplosionError, DivergenceError, UndefinedExponentError, InsufficientDataError, ArithmeticError)


def exit_code_for(exc):
    if isinstance(exc, _NUMERICAL):
        return EXIT_NUMERICAL
    if isinstance(exc, (QHLError, ValueError, TypeError, KeyError, json.JSONDecodeError)):
        return EXIT_VALIDATION
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_NUMERICAL


def error_payload(exc):
    code = exit_code_for(exc)
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, StabilityError):
        payload["invariant"] = "stability"
    return payload


def report_error(exc, stream_=None):
    payload = error_payload(exc)
    print(json.dumps(payload, sort_keys=True), file=stream_ or sys.stderr)
    return payload["exit_code"]


__all__ = [
    "EXIT_IO",
    "EXIT_NUMERICAL",
    "EXIT_OK",
    "EXIT_VALIDATION",
    "EXPERIMENTS",
    "ExperimentConfig",
    "ml_table",
    "parse_config",
    "run",
    "write_ml_table",
]
