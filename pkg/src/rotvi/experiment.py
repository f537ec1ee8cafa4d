"""Run configuration, experiment orchestration and file output.

A run configuration is a JSON object; every key is optional::

    {
      "preset": "fig3c",                  # or "target": {"weights", "means", "covariances"}
      "seed": 0,
      "quadrature": "mc:4096",            # or "gh:40"
      "dictionary": [{"alphas": [1, 2, 4], "betas": [-2, -1, 0, 1, 2]}, ...],
      "floor": 0.001, "tau": 1e-8,
      "mfvi": {"eta": 0.001, "max_iter": 20000, "tol": 1e-8, "restarts": 8, "metric": "curvature", ...},
      "rovi": {"eta_mf": 0.001, "eta_o": 0.01, "inner": 25, "restarts": 16, ...},
      "lmc":  {"step": 0.05, "steps": 20000, "chains": 64, "burn_in": 2000, ...},
      "output": {"grid": 200, "n_eval": 100000, "write_samples": true}
    }

The nested objects accept the fields of :class:`~rotvi.mfvi.MfviConfig`,
:class:`~rotvi.rovi.RoviConfig` and :class:`~rotvi.lmc.LmcConfig`.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import theory
from .errors import ConfigurationError, InputError
from .lmc import LmcConfig, lmc_moment_check, lmc_run, write_samples_csv
from .mfvi import MfviConfig, run_mfvi
from .presets import NOTES, preset_spec
from .rovi import RoviConfig, fit_summary, run_rovi
from .target import LOG_2PI, MixtureTarget, mixture_log_density
from .transport import DEFAULT_FLOOR, DEFAULT_TANH_GRID, DEFAULT_TAU, map_derivatives, map_inverse

SCHEMA_VERSION = 1
COLLAPSE_THRESHOLD = 0.05
METHOD_INDEX = {"mfvi": 1, "rovi": 2, "lmc": 3}

_TOP_KEYS = {"preset", "target", "seed", "quadrature", "dictionary", "floor", "tau", "mfvi", "rovi", "lmc", "output", "schema_version"}
_OUTPUT_DEFAULTS = {"grid": 200, "n_eval": 100_000, "write_samples": True}


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclasses.dataclass
class RunConfig:
    """Resolved configuration of one run."""

    target: MixtureTarget
    target_spec: dict
    preset: Optional[str]
    seed: int
    mfvi: MfviConfig
    rovi: RoviConfig
    lmc: LmcConfig
    output: dict

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "target": self.target_spec,
            "seed": self.seed,
            "mfvi": _jsonable(dataclasses.asdict(self.mfvi)),
            "rovi": _jsonable(dataclasses.asdict(self.rovi)),
            "lmc": _jsonable(dataclasses.asdict(self.lmc)),
            "output": dict(self.output),
        }

    def hash(self) -> str:
        return config_hash(self.to_dict())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def config_hash(cfg: dict) -> str:
    blob = json.dumps(_jsonable(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _sub_config(cls, raw: dict, shared: dict, name: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - fields
    if unknown:
        raise ConfigurationError(f"unknown {name} settings: {', '.join(sorted(unknown))}")
    kwargs = {k: v for k, v in shared.items() if k in fields}
    kwargs.update(raw)
    if "dictionary" in kwargs:
        kwargs["dictionary"] = tuple(
            {"alphas": tuple(b["alphas"]), "betas": tuple(b["betas"])} for b in kwargs["dictionary"]
        )
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"invalid {name} settings: {exc}") from None


def resolve_config(raw: Optional[dict] = None, preset: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Merge a JSON config, an optional preset name and command-line overrides.

    ``overrides`` may contain ``seed``, ``quadrature``, ``restarts``,
    ``iters``, ``eta_mf`` and ``eta_o``; ``None`` values are ignored.
    """
    raw = dict(raw or {})
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigurationError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
    ov = {k: v for k, v in (overrides or {}).items() if v is not None}
    preset = preset or raw.get("preset")
    if preset is not None:
        spec = preset_spec(preset)
    elif "target" in raw:
        spec = raw["target"]
    else:
        raise ConfigurationError("a run needs either a preset or an inline target")
    target = MixtureTarget.from_dict(spec)
    seed = int(ov.get("seed", raw.get("seed", 0)))

    shared = {
        "seed": seed,
        "quadrature": ov.get("quadrature", raw.get("quadrature", "mc:4096")),
        "dictionary": raw.get("dictionary", DEFAULT_TANH_GRID),
        "floor": raw.get("floor", DEFAULT_FLOOR),
        "tau": raw.get("tau", DEFAULT_TAU),
    }
    mraw, rraw, lraw = dict(raw.get("mfvi", {})), dict(raw.get("rovi", {})), dict(raw.get("lmc", {}))
    if "iters" in ov:
        mraw["max_iter"] = rraw["max_iter"] = int(ov["iters"])
    if "eta_mf" in ov:
        mraw["eta"] = rraw["eta_mf"] = float(ov["eta_mf"])
    if "eta_o" in ov:
        rraw["eta_o"] = float(ov["eta_o"])
    if "restarts" in ov:
        rraw["restarts"] = int(ov["restarts"])
    # methods draw from independent streams: master seed XOR method index
    mcfg = _sub_config(MfviConfig, mraw, {**shared, "seed": seed ^ METHOD_INDEX["mfvi"]}, "mfvi")
    rcfg = _sub_config(RoviConfig, rraw, {**shared, "seed": seed ^ METHOD_INDEX["rovi"]}, "rovi")
    lcfg = _sub_config(LmcConfig, lraw, {"seed": seed ^ METHOD_INDEX["lmc"]}, "lmc")
    out = dict(_OUTPUT_DEFAULTS)
    extra = set(raw.get("output", {})) - set(out)
    if extra:
        raise ConfigurationError(f"unknown output settings: {', '.join(sorted(extra))}")
    out.update(raw.get("output", {}))
    return RunConfig(target, spec, preset, seed, mcfg, rcfg, lcfg, out)


def load_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None


# --------------------------------------------------------------------------
# Contours
# --------------------------------------------------------------------------


def auto_half_width(target: MixtureTarget) -> float:
    """Half-width of a square window: extreme mean coordinate plus four standard deviations."""
    sd = max(math.sqrt(float(np.linalg.eigvalsh(c.covariance)[-1])) for c in target.components)
    return float(np.max(np.abs(target.means))) + 4.0 * sd


def model_log_density(model, x: np.ndarray) -> np.ndarray:
    """``log`` density of a target or of a fitted ``(O o T_theta)_# rho`` at points ``x``."""
    if isinstance(model, MixtureTarget):
        return mixture_log_density(model, x)
    theta, O = model.theta, model.O if getattr(model, "O", None) is not None else np.eye(model.theta.dim)
    z = map_inverse(theta, np.asarray(x) @ O)
    dT = map_derivatives(theta, z)
    return -0.5 * np.sum(z * z, axis=1) - 0.5 * theta.dim * LOG_2PI - np.sum(np.log(dT), axis=1)


def contour_grid(model, half_width: float, n: int = 200):
    """Regular ``n x n`` grid on ``[-half_width, half_width]^2`` with log densities."""
    dim = model.dim if isinstance(model, MixtureTarget) else model.theta.dim
    if dim != 2:
        raise InputError("contour grids are only available in two dimensions")
    ax = np.linspace(-half_width, half_width, n)
    X, Y = np.meshgrid(ax, ax, indexing="xy")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    return X, Y, model_log_density(model, pts).reshape(X.shape)


def grid_local_maxima(X, Y, Z, min_height: float = -math.inf) -> list:
    """Interior grid points strictly above all eight neighbours, highest first."""
    core = Z[1:-1, 1:-1]
    mask = np.ones_like(core, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == dj == 0:
                continue
            mask &= core > Z[1 + di : Z.shape[0] - 1 + di, 1 + dj : Z.shape[1] - 1 + dj]
    mask &= core > min_height
    idx = np.argwhere(mask)
    peaks = [(float(X[i + 1, j + 1]), float(Y[i + 1, j + 1]), float(core[i, j])) for i, j in idx]
    return sorted(peaks, key=lambda p: -p[2])


def emit_contour(model, path, half_width: float, n: int = 200) -> dict:
    """Write ``x,y,log_density`` rows and return the grid's local maxima."""
    X, Y, Z = contour_grid(model, half_width, n)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "log_density"])
        for x, y, z in zip(X.ravel(), Y.ravel(), Z.ravel()):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(z))])
    # ignore numerically flat ripples far below the peak
    peaks = grid_local_maxima(X, Y, Z, min_height=float(Z.max()) - 12.0)
    return {"file": path.name, "local_maxima": [[x, y] for x, y, _ in peaks]}


def write_trace_csv(traces: list, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["restart", "step", "kl"])
        for r, tr in enumerate(traces):
            for k, v in enumerate(tr):
                w.writerow([r, k, repr(float(v))])
    return path


# --------------------------------------------------------------------------
# Runs
# --------------------------------------------------------------------------


def _method_summary(result, target, cfg: RunConfig, seed_offset: int) -> dict:
    summ = fit_summary(result, target, n_eval=cfg.output["n_eval"], seed=cfg.seed ^ seed_offset)
    summ["collapsed"] = summ.get("min_mode_mass", 1.0) < COLLAPSE_THRESHOLD
    summ["restart_kls"] = list(result.restart_kls)
    summ["rotation"] = np.asarray(result.O).tolist()
    summ["theta"] = result.theta.to_dict()
    return summ


def run_fit(cfg: RunConfig, method: str, out_dir: Optional[Path] = None) -> dict:
    t0 = time.perf_counter()
    if method == "mfvi":
        res = run_mfvi(cfg.target, cfg.mfvi)
        traces = [res.kl_trace]
    else:
        res = run_rovi(cfg.target, cfg.rovi)
        traces = res.traces
    summ = _method_summary(res, cfg.target, cfg, METHOD_INDEX[method])
    elapsed = time.perf_counter() - t0
    if out_dir is not None:
        write_trace_csv(traces, out_dir / f"{method}_trace.csv")
    return {"summary": summ, "result": res, "seconds": elapsed}


def run_lmc_method(cfg: RunConfig, out_dir: Optional[Path] = None) -> dict:
    t0 = time.perf_counter()
    res = lmc_run(cfg.target, cfg.lmc)
    check = lmc_moment_check(res.samples, cfg.target, res.chain_ids)
    masses = np.asarray(check["mode_masses"])
    summ = {
        "kl": None,
        "mode_masses": masses.tolist(),
        "min_mode_mass": float(masses.min()),
        "collapsed": bool(masses.min() < COLLAPSE_THRESHOLD),
        "mean": check["mean"],
        "covariance": check["covariance"],
        "mode_balance_ok": check["mode_balance_ok"],
        "n_samples": int(len(res.samples)),
        "diverged_chains": res.diverged,
    }
    try:
        cert = theory.gaussian_product_separation(cfg.target)
        summ["quadrant_masses"] = list(theory.quadrant_mass(res.samples, cert))
    except InputError:
        pass
    if out_dir is not None and cfg.output.get("write_samples", True):
        write_samples_csv(res, out_dir / "lmc_samples.csv")
    return {"summary": summ, "result": res, "seconds": time.perf_counter() - t0}


def emit_summary(payload: dict, path=None) -> str:
    """Serialize a summary with sorted keys; write it when ``path`` is given."""
    text = json.dumps(_jsonable(payload), indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text + "\n")
    return text


def summary_header(cfg: RunConfig, command: str) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "preset": cfg.preset,
        "notes": NOTES.get(cfg.preset, "") if cfg.preset else "",
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
    }


def run_experiment(cfg: RunConfig, out_dir=None, methods=("mfvi", "rovi", "lmc"), contours: bool = True) -> dict:
    """All methods, the bound report and (in 2-D) contour grids for one target.

    Returns the summary dictionary; wall-clock times live under ``timing``
    so that two runs with the same configuration agree everywhere else.
    """
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    payload = summary_header(cfg, "experiment")
    payload["bounds"] = theory.bound_report(cfg.target).to_dict()
    payload["methods"] = {}
    timing = {}
    fitted = {}
    for m in methods:
        run = run_lmc_method(cfg, out) if m == "lmc" else run_fit(cfg, m, out)
        payload["methods"][m] = run["summary"]
        timing[f"{m}_seconds"] = run["seconds"]
        fitted[m] = run["result"]
    if contours and cfg.target.dim == 2 and out is not None:
        hw = auto_half_width(cfg.target)
        n = int(cfg.output["grid"])
        t0 = time.perf_counter()
        payload["contours"] = {"half_width": hw, "grid": n, "target": emit_contour(cfg.target, out / "contour_target.csv", hw, n)}
        for m in ("mfvi", "rovi"):
            if m in fitted:
                payload["contours"][m] = emit_contour(fitted[m], out / f"contour_{m}.csv", hw, n)
        timing["contour_seconds"] = time.perf_counter() - t0
    payload["timing"] = timing
    if out is not None:
        emit_summary(payload, out / "summary.json")
    return payload
