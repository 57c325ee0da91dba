"""Registered experiments and report writing.

Every run writes four files to its output directory:

``summary.csv``
    one row per cell: experiment, cell_id, n_paths, dt, horizon, n_exits,
    p_hat, ci_low, ci_high, classifier_tag, seed
``results.json``
    the resolved config, per-cell details and the oracle comparisons
``digest.txt``
    a short human-readable summary
``metadata.json``
    timestamp, versions and wall time (the only file that changes between reruns)

For experiments without an exit event the ``n_exits``/``p_hat`` columns
count the experiment's own binary event, named in ``results.json`` under
``event``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from statistics import NormalDist
from typing import Callable

import numpy as np

from .barrier import ReciprocalSpec, make_controller
from .config import ExperimentConfig
from .feller import RatioSpec, classify_boundary
from .montecarlo import (
    EnsembleConfig,
    ExitEstimate,
    estimate_exit_probability,
    first_return_gaps,
    local_time_ensemble,
    validate_b_tilde_bound,
    wilson_interval,
)

log = logging.getLogger(__name__)

__all__ = ["EXPERIMENTS", "ExperimentResult", "run_experiment", "write_reports", "SUMMARY_COLUMNS"]

SUMMARY_COLUMNS = (
    "experiment", "cell_id", "n_paths", "dt", "horizon", "n_exits",
    "p_hat", "ci_low", "ci_high", "classifier_tag", "seed",
)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list = field(default_factory=list)
    cells: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)
    digest: list = field(default_factory=list)
    event: str = "exit from the safe set before the horizon"

    def add_row(self, cell_id: str, dt: float, n_paths: int, n_events: int, tag: str = ""):
        lo, hi = wilson_interval(n_events, n_paths)
        self.rows.append({
            "experiment": self.config.experiment,
            "cell_id": cell_id,
            "n_paths": n_paths,
            "dt": dt,
            "horizon": self.config.horizon,
            "n_exits": n_events,
            "p_hat": n_events / n_paths,
            "ci_low": lo,
            "ci_high": hi,
            "classifier_tag": tag,
            "seed": self.config.seed,
        })

    def add_estimate(self, cell_id: str, est: ExitEstimate, tag: str = ""):
        self.add_row(cell_id, est.dt, est.n_paths, est.n_exits, tag)


def _ensemble(cfg: ExperimentConfig, dt: float, **kw) -> EnsembleConfig:
    base = dict(n_paths=cfg.n_paths, dt=dt, horizon=cfg.horizon, seed=cfg.seed,
                bridge_correction=cfg.bridge_correction, workers=cfg.workers, chunk_size=cfg.chunk_size)
    base.update(kw)
    return EnsembleConfig(**base)


def _components(cfg: ExperimentConfig, **model_kw):
    model = cfg.build_model(**model_kw)
    barrier = cfg.build_barrier()
    ctrl = make_controller(cfg.controller_spec(), barrier, model)
    return model, barrier, ctrl


def _h0(barrier, x0) -> float:
    return float(np.asarray(barrier.h(np.asarray(x0, dtype=float)[None, :]))[0])


def _reflection_oracle(h0: float, sigma: float, horizon: float) -> float:
    """``Pr(min_{t<=T} (h0 + sigma W_t) <= 0) = 2 Phi(-h0 / (sigma sqrt T))``."""
    return 2.0 * NormalDist().cdf(-h0 / (sigma * math.sqrt(horizon)))


def _fmt_dt(dt: float) -> str:
    return f"dt={dt:g}"


def _exit_sweep(cfg: ExperimentConfig, res: ExperimentResult, oracle: bool):
    model, barrier, ctrl = _components(cfg)
    h0 = _h0(barrier, cfg.x0)
    ref = _reflection_oracle(h0, float(cfg.model.get("sigma", 1.0)), cfg.horizon) if oracle else None
    p_by_dt = []
    for dt in cfg.dt_list:
        est = estimate_exit_probability(model, ctrl, barrier, cfg.x0, _ensemble(cfg, dt))
        res.add_estimate(_fmt_dt(dt), est)
        cell = {"cell_id": _fmt_dt(dt), **est.to_dict()}
        if ref is not None:
            cell["oracle"] = ref
            cell["abs_error"] = abs(est.p_hat - ref)
            cell["oracle_in_ci"] = est.contains(ref)
        res.cells.append(cell)
        p_by_dt.append((dt, est.p_hat))
        line = f"{_fmt_dt(dt):>10}  exits {est.n_exits}/{est.n_paths}  p_hat={est.p_hat:.5f}  " \
               f"95% CI [{est.ci_low:.5f}, {est.ci_high:.5f}]"
        if ref is not None:
            line += f"  oracle {ref:.5f}"
        res.digest.append(line)
        if est.n_infeasible:
            res.digest.append(f"{'':>10}  {est.n_infeasible} paths dropped (controller infeasible)")
    ordered = [p for _, p in sorted(p_by_dt, key=lambda t: -t[0])]
    res.checks["non_increasing_in_dt"] = all(b <= a for a, b in zip(ordered, ordered[1:]))
    if ref is not None:
        res.checks["reflection_oracle"] = ref


def brownian_counterexample(cfg: ExperimentConfig) -> ExperimentResult:
    res = ExperimentResult(cfg)
    res.digest.append("Brownian motion from h(x0) with no controller; the ZCBF condition holds yet paths exit.")
    _exit_sweep(cfg, res, oracle=True)
    return res


def zcbf_fails(cfg: ExperimentConfig) -> ExperimentResult:
    res = ExperimentResult(cfg)
    res.digest.append("ZCBF min-norm controller on dx = u dt + dW, h(x) = x (control is zero inside C).")
    _exit_sweep(cfg, res, oracle=True)
    return res


def modified_zcbf_safe(cfg: ExperimentConfig) -> ExperimentResult:
    res = ExperimentResult(cfg)
    res.digest.append("Modified ZCBF controller; exits should vanish as dt decreases.")
    _exit_sweep(cfg, res, oracle=False)
    return res


def rcbf_safe(cfg: ExperimentConfig) -> ExperimentResult:
    res = ExperimentResult(cfg)
    res.digest.append("RCBF controller with B = 1/h; exits should vanish as dt decreases.")
    _exit_sweep(cfg, res, oracle=False)
    return res


def divergence_rate_sweep(cfg: ExperimentConfig) -> ExperimentResult:
    res = ExperimentResult(cfg)
    res.digest.append("Scalar h-SDE with drift gamma sigma^2 h^-p: simulated exits next to the Feller verdict.")
    consistent = True
    for gamma in cfg.gamma_grid:
        for p in cfg.p_grid:
            model, barrier, ctrl = _components(cfg, gamma=float(gamma), p=float(p))
            h0 = _h0(barrier, cfg.x0)
            cls = classify_boundary(RatioSpec(float(gamma), float(p), True, 1.0), x0=h0)
            for dt in cfg.dt_list:
                cell_id = f"gamma={gamma:g},p={p:g},{_fmt_dt(dt)}"
                est = estimate_exit_probability(model, ctrl, barrier, cfg.x0, _ensemble(cfg, dt))
                res.add_estimate(cell_id, est, cls.case_tag)
                if cls.case_tag == "hits_zero_with_positive_prob":
                    ok = est.p_hat > 0.05
                elif cls.case_tag in ("strictly_positive", "null_recurrent_boundary"):
                    ok = est.p_hat < 0.01
                else:
                    ok = None
                consistent = consistent and ok is not False
                res.cells.append({
                    "cell_id": cell_id, "gamma": gamma, "p": p, **est.to_dict(),
                    "classification": cls.to_dict(), "matches_dichotomy": ok,
                })
                res.digest.append(
                    f"gamma={gamma:<4g} p={p:<5g} {_fmt_dt(dt)}  p_hat={est.p_hat:.4f}  "
                    f"{cls.case_tag:<30} {'ok' if ok else ('n/a' if ok is None else 'MISMATCH')}"
                )
    res.checks["all_cells_match_dichotomy"] = consistent
    return res


def _quantile_inf(x, q: float) -> float:
    """Quantile where absent times are ``+inf`` (interpolating toward inf gives inf)."""
    with np.errstate(invalid="ignore"):
        v = float(np.quantile(x, q))
    return math.inf if math.isnan(v) else v


def stopping_times(cfg: ExperimentConfig) -> ExperimentResult:
    res = ExperimentResult(cfg, event="gap eta_1 - zeta_0 exceeds 10 dt (or is absent)")
    model, barrier, ctrl = _components(cfg)
    res.digest.append(f"Brownian path started at h(x0); theta = {cfg.theta:g}. Gap eta_1 - zeta_0 in units of dt.")
    for dt in cfg.dt_list:
        gaps = first_return_gaps(_ensemble(cfg, dt), cfg.theta, model, ctrl, barrier, cfg.x0)
        med = _quantile_inf(gaps, 0.5)
        n_long = int(np.sum(~(gaps <= 10 * dt * (1 + 1e-9))))
        res.add_row(_fmt_dt(dt), dt, gaps.size, n_long)
        finite = gaps[np.isfinite(gaps)]
        res.cells.append({
            "cell_id": _fmt_dt(dt), "dt": dt, "n_paths": int(gaps.size),
            "median_gap": med if math.isfinite(med) else "inf",
            "median_gap_over_dt": med / dt if math.isfinite(med) else "inf",
            "n_absent": int(gaps.size - finite.size),
            "quantiles_over_dt": {str(q): _quantile_inf(gaps, q) / dt for q in (0.25, 0.5, 0.75, 0.9)},
            "median_within_10dt": med <= 10 * dt * (1 + 1e-9),
        })
        res.digest.append(f"{_fmt_dt(dt):>10}  median gap = {med / dt:.3g} dt  "
                          f"({gaps.size - finite.size} paths without eta_1)")
    return res


def tanaka_check(cfg: ExperimentConfig) -> ExperimentResult:
    res = ExperimentResult(cfg)
    model, barrier, ctrl = _components(cfg)
    offset = float(cfg.barrier.get("offset", 0.0))
    level = float(cfg.level if cfg.level is not None else 0.0)
    x0 = float(cfg.x0[0])
    sigma = float(cfg.model.get("sigma", 1.0))
    # E L_t^a for sigma W from x0: E|X_t - a| - |x0 - a|
    s = sigma * math.sqrt(cfg.horizon)
    m = x0 - level
    oracle = s * math.sqrt(2 / math.pi) * math.exp(-m * m / (2 * s * s)) + m * (1 - 2 * NormalDist().cdf(-m / s)) \
        - abs(m)
    res.checks["local_time_oracle"] = oracle
    res.digest.append(f"Brownian local time at level {level:g}; oracle E L = {oracle:.5f}.")
    resid_by_dt = []
    for dt in cfg.dt_list:
        L, resid, outcome = local_time_ensemble(model, ctrl, barrier, cfg.x0, _ensemble(cfg, dt), level + offset,
                                                cfg.eps)
        n_exits = int(outcome.exited.sum())
        res.add_row(_fmt_dt(dt), dt, L.size, n_exits)
        mean_L = float(L.mean())
        mean_r = float(np.abs(resid).mean())
        resid_by_dt.append((dt, mean_r))
        res.cells.append({
            "cell_id": _fmt_dt(dt), "dt": dt, "n_paths": int(L.size), "mean_L": mean_L,
            "stderr_L": float(L.std(ddof=1) / math.sqrt(L.size)) if L.size > 1 else 0.0,
            "rel_error_L": abs(mean_L - oracle) / oracle if oracle else None,
            "mean_abs_tanaka_residual": mean_r, "n_exits": n_exits,
        })
        res.digest.append(f"{_fmt_dt(dt):>10}  mean L = {mean_L:.5f}  mean |residual| = {mean_r:.5f}")
    ordered = [r for _, r in sorted(resid_by_dt, key=lambda t: -t[0])]
    res.checks["residual_decreasing_in_dt"] = all(b < a for a, b in zip(ordered, ordered[1:]))
    return res


def b_tilde_bound(cfg: ExperimentConfig) -> ExperimentResult:
    res = ExperimentResult(cfg, event="B exceeds the B-tilde envelope at some grid time")
    model = cfg.build_model()
    barrier = cfg.build_barrier()
    cspec = cfg.controller_spec()
    ctrl = make_controller(cspec, barrier, model)
    rspec = ReciprocalSpec(barrier, alpha3=cspec.alpha3 or ReciprocalSpec(barrier).alpha3)
    for dt in cfg.dt_list:
        rep = validate_b_tilde_bound(model, ctrl, rspec, cfg.x0, cfg.horizon, cfg.delta, _ensemble(cfg, dt),
                                     pilot_paths=cfg.pilot_paths)
        res.add_row(_fmt_dt(dt), dt, rep.n_paths, rep.n_violations)
        se = math.sqrt((cfg.delta / 2) * (1 - cfg.delta / 2) / rep.n_paths)
        limit = cfg.delta / 2 + 3 * se
        res.cells.append({"cell_id": _fmt_dt(dt), "dt": dt, **rep.to_dict(), "limit": limit,
                          "within_limit": rep.violation_fraction <= limit})
        res.digest.append(
            f"{_fmt_dt(dt):>10}  M = {rep.M:.4f}  violations {rep.n_violations}/{rep.n_paths} "
            f"= {rep.violation_fraction:.4f} (limit {limit:.4f})  max drift excess {rep.max_drift_excess:.3g}"
        )
    return res


EXPERIMENTS: dict[str, Callable[[ExperimentConfig], ExperimentResult]] = {
    "brownian-counterexample": brownian_counterexample,
    "zcbf-fails": zcbf_fails,
    "modified-zcbf-safe": modified_zcbf_safe,
    "rcbf-safe": rcbf_safe,
    "divergence-rate-sweep": divergence_rate_sweep,
    "stopping-times": stopping_times,
    "tanaka-check": tanaka_check,
    "b-tilde-bound": b_tilde_bound,
}


# ----------------------------------------------------------------------------
# reports


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    return v


def summary_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def write_reports(res: ExperimentResult, out_dir, elapsed: float) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from . import __version__

    results = {
        "experiment": res.config.experiment,
        "seed": res.config.seed,
        "config": res.config.to_dict(),
        "event": res.event,
        "cells": res.cells,
        "checks": res.checks,
        "summary": res.rows,
    }
    files = {
        "summary": out / "summary.csv",
        "results": out / "results.json",
        "digest": out / "digest.txt",
        "metadata": out / "metadata.json",
    }
    files["summary"].write_text(summary_csv(res.rows))
    files["results"].write_text(json.dumps(_jsonable(results), indent=2, sort_keys=True) + "\n")
    head = [f"experiment: {res.config.experiment}  seed: {res.config.seed}  n_paths: {res.config.n_paths}  "
            f"horizon: {res.config.horizon:g}"]
    checks = [f"check {k}: {_jsonable(v)}" for k, v in sorted(res.checks.items())]
    files["digest"].write_text("\n".join(head + res.digest + checks) + "\n")
    meta = {
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "elapsed_seconds": round(elapsed, 3),
        "barrierlab_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
    }
    files["metadata"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return files


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """Run a registered experiment; write reports when ``out_dir`` (or ``cfg.out``) is set."""
    if cfg.experiment not in EXPERIMENTS:
        raise KeyError(f"unknown experiment {cfg.experiment!r}; registered: {sorted(EXPERIMENTS)}")
    t0 = time.perf_counter()
    log.info("running %s (seed %d)", cfg.experiment, cfg.seed)
    res = EXPERIMENTS[cfg.experiment](cfg)
    target = out_dir or cfg.out
    if target is not None:
        write_reports(res, target, time.perf_counter() - t0)
    return res
