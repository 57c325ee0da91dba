"""Experiment configuration files.

A config is a YAML mapping.  Only ``experiment`` is required; every other
key falls back to the experiment's defaults (see :data:`EXPERIMENT_DEFAULTS`).

.. code-block:: yaml

    experiment: rcbf-safe
    seed: 7
    n_paths: 10000
    dt: [1.0e-2, 1.0e-3, 1.0e-4]   # scalar or sweep list
    horizon: 1.0
    x0: [1.0]
    model: {name: single_integrator, sigma: 1.0}
    barrier: {name: halfline}
    controller: {kind: rcbf, alpha3: {family: linear, k: 1.0}}
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import yaml

from .barrier import ALPHA_FAMILIES, CONTROLLER_KINDS, AlphaFn, ControllerSpec
from .models import BARRIERS, MODELS

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "EXPERIMENT_DEFAULTS",
    "load_config",
    "validate_config",
    "resolve_config",
]


class ConfigError(ValueError):
    """Config could not be parsed or failed validation; ``errors`` lists every problem."""

    def __init__(self, errors):
        self.errors = list(errors) if not isinstance(errors, str) else [errors]
        super().__init__("; ".join(self.errors))


_PLANT = {"model": {"name": "single_integrator", "sigma": 1.0}, "barrier": {"name": "halfline"}}
_BROWNIAN = {"model": {"name": "brownian", "sigma": 1.0}, "barrier": {"name": "halfline"},
             "controller": {"kind": "none"}}

EXPERIMENT_DEFAULTS: dict[str, dict] = {
    "brownian-counterexample": {
        **_BROWNIAN, "n_paths": 100_000, "dt": 1e-4, "horizon": 1.0, "x0": [1.0],
    },
    "zcbf-fails": {
        **_PLANT, "controller": {"kind": "zcbf"}, "n_paths": 100_000, "dt": 1e-4, "horizon": 1.0, "x0": [1.0],
    },
    "modified-zcbf-safe": {
        **_PLANT, "controller": {"kind": "modified_zcbf", "alpha3": {"family": "linear", "k": 1.0}},
        "n_paths": 10_000, "dt": [1e-2, 1e-3, 1e-4], "horizon": 1.0, "x0": [1.0],
    },
    "rcbf-safe": {
        **_PLANT, "controller": {"kind": "rcbf", "alpha3": {"family": "linear", "k": 1.0}},
        "n_paths": 10_000, "dt": [1e-2, 1e-3, 1e-4], "horizon": 1.0, "x0": [1.0],
    },
    "divergence-rate-sweep": {
        "model": {"name": "h_process", "sigma": 1.0}, "barrier": {"name": "halfline"},
        "controller": {"kind": "none"}, "n_paths": 10_000, "dt": 1e-4, "horizon": 1.0, "x0": [1.0],
        "gamma_grid": [0.5, 1.0, 2.0], "p_grid": [0.25, 0.5, 0.75, 1.0, 1.5, 2.0],
    },
    "stopping-times": {
        **_BROWNIAN, "n_paths": 10_000, "dt": [1e-4, 1e-5], "horizon": 0.01, "x0": [1.0], "theta": 1.0,
        "bridge_correction": False,  # raw threshold crossings of the discrete path
    },
    "tanaka-check": {
        # h = x + offset keeps paths alive; local time is taken at state level ``level``
        **_BROWNIAN, "barrier": {"name": "halfline", "offset": 10.0},
        "n_paths": 50_000, "dt": [1e-2, 1e-3, 1e-4], "horizon": 1.0, "x0": [0.0], "level": 0.0,
    },
    "b-tilde-bound": {
        **_PLANT, "controller": {"kind": "rcbf", "alpha3": {"family": "linear", "k": 1.0}},
        "n_paths": 10_000, "pilot_paths": 10_000, "dt": 1e-4, "horizon": 1.0, "x0": [1.0], "delta": 0.1,
    },
}

_KNOWN_KEYS = {
    "experiment", "seed", "n_paths", "pilot_paths", "dt", "horizon", "x0", "bridge_correction", "model",
    "barrier", "controller", "theta", "delta", "level", "eps", "gamma_grid", "p_grid", "workers",
    "chunk_size", "out",
}


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int = 0
    n_paths: int = 10_000
    dt: Union[float, list] = 1e-3
    horizon: float = 1.0
    x0: list = field(default_factory=lambda: [1.0])
    bridge_correction: bool = True
    model: dict = field(default_factory=dict)
    barrier: dict = field(default_factory=dict)
    controller: dict = field(default_factory=lambda: {"kind": "none"})
    theta: Optional[float] = None
    delta: Optional[float] = None
    level: Optional[float] = None
    eps: Optional[float] = None
    gamma_grid: Optional[list] = None
    p_grid: Optional[list] = None
    pilot_paths: Optional[int] = None
    workers: int = 1
    chunk_size: int = 50_000
    out: Optional[str] = None

    @property
    def dt_list(self) -> list[float]:
        return [float(d) for d in self.dt] if isinstance(self.dt, (list, tuple)) else [float(self.dt)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("out")  # where results go does not affect them
        return d

    # -- component builders -------------------------------------------------

    def build_model(self, **overrides):
        params = {k: v for k, v in self.model.items() if k != "name"}
        params.update(overrides)
        return MODELS[self.model["name"]](**params)

    def build_barrier(self):
        params = {k: v for k, v in self.barrier.items() if k not in ("name", "offset")}
        bar = BARRIERS[self.barrier["name"]](**params)
        offset = float(self.barrier.get("offset", 0.0))
        if offset:
            from .barrier import linear_barrier

            if self.barrier["name"] != "halfline":
                raise ConfigError("barrier offset is only supported for the halfline barrier")
            bar = linear_barrier([1.0], offset, name=f"halfline+{offset:g}")
        return bar

    def controller_spec(self) -> ControllerSpec:
        c = self.controller
        a3 = c.get("alpha3")
        alpha3 = AlphaFn(**a3) if a3 else None
        return ControllerSpec(kind=c.get("kind", "none"), alpha3=alpha3, u_max=c.get("u_max"))


def _as_float(v):
    # YAML 1.1 reads "1e-4" as a string
    if isinstance(v, str):
        try:
            return float(v)
        except ValueError:
            return v
    return v


def _normalise(raw: dict) -> dict:
    out = {}
    for k, v in raw.items():
        if isinstance(v, list):
            out[k] = [_as_float(x) for x in v]
        elif isinstance(v, dict):
            out[k] = {kk: (_normalise(vv) if isinstance(vv, dict) else _as_float(vv)) for kk, vv in v.items()}
        else:
            out[k] = _as_float(v)
    return out


def load_config(path) -> dict:
    """Parse a YAML config file into a raw mapping (no defaults applied)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return _normalise(raw)


def _merge(defaults: dict, raw: dict) -> dict:
    merged = copy.deepcopy(defaults)
    for k, v in raw.items():
        if isinstance(v, dict) and isinstance(merged.get(k), dict) and v.get("name", v.get("kind")) in (
            None, merged[k].get("name", merged[k].get("kind"))
        ):
            merged[k] = {**merged[k], **v}
        else:
            merged[k] = copy.deepcopy(v)
    return merged


def _check_number(errors, name, v, lo=None, hi=None, lo_open=True, integer=False, allow_none=False):
    if v is None:
        if not allow_none:
            errors.append(f"{name}: required")
        return False
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        errors.append(f"{name}: expected a finite number, got {v!r}")
        return False
    if integer and int(v) != v:
        errors.append(f"{name}: expected an integer, got {v!r}")
        return False
    if lo is not None and (v <= lo if lo_open else v < lo):
        errors.append(f"{name}: must be {'>' if lo_open else '>='} {lo}, got {v!r}")
        return False
    if hi is not None and v > hi:
        errors.append(f"{name}: must be <= {hi}, got {v!r}")
        return False
    return True


def validate_config(source: Union[str, Path, dict], overrides: Optional[dict] = None) -> list[str]:
    """Validate a config file or mapping; returns every problem found (empty list if valid)."""
    try:
        raw = load_config(source) if not isinstance(source, dict) else _normalise(source)
    except ConfigError as exc:
        return exc.errors
    if overrides:
        raw = {**raw, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        _resolve(raw)
    except ConfigError as exc:
        return exc.errors
    return []


def resolve_config(source: Union[str, Path, dict], overrides: Optional[dict] = None) -> ExperimentConfig:
    """Load, apply defaults and overrides, validate; raises :class:`ConfigError`."""
    raw = load_config(source) if not isinstance(source, dict) else _normalise(source)
    if overrides:
        raw = {**raw, **{k: v for k, v in overrides.items() if v is not None}}
    return _resolve(raw)


def _resolve(raw: dict) -> ExperimentConfig:
    errors: list[str] = []
    name = raw.get("experiment")
    if name not in EXPERIMENT_DEFAULTS:
        known = ", ".join(sorted(EXPERIMENT_DEFAULTS))
        raise ConfigError(f"experiment: unknown name {name!r}; registered experiments: {known}")
    for k in raw:
        if k not in _KNOWN_KEYS:
            errors.append(f"{k}: unknown key")
    merged = _merge(EXPERIMENT_DEFAULTS[name], raw)
    merged = {k: v for k, v in merged.items() if k in _KNOWN_KEYS}

    _check_number(errors, "seed", merged.get("seed", 0), lo=-(2**63), hi=2**64 - 1, lo_open=False, integer=True)
    _check_number(errors, "n_paths", merged.get("n_paths"), lo=1, lo_open=False, integer=True)
    _check_number(errors, "pilot_paths", merged.get("pilot_paths"), lo=1, lo_open=False, integer=True,
                  allow_none=True)
    _check_number(errors, "workers", merged.get("workers", 1), lo=1, lo_open=False, integer=True)
    _check_number(errors, "chunk_size", merged.get("chunk_size", 50_000), lo=1, lo_open=False, integer=True)
    h_ok = _check_number(errors, "horizon", merged.get("horizon"), lo=0)
    dts = merged.get("dt")
    dts = dts if isinstance(dts, list) else [dts]
    if not dts:
        errors.append("dt: sweep list is empty")
    for i, d in enumerate(dts):
        label = "dt" if len(dts) == 1 else f"dt[{i}]"
        if _check_number(errors, label, d, lo=0) and h_ok and d > merged["horizon"]:
            errors.append(f"{label}: step {d} exceeds the horizon {merged['horizon']}")
    if not isinstance(merged.get("bridge_correction", True), bool):
        errors.append("bridge_correction: expected true or false")
    _check_number(errors, "delta", merged.get("delta"), lo=0, hi=1, allow_none=True)
    _check_number(errors, "eps", merged.get("eps"), lo=0, allow_none=True)
    _check_number(errors, "level", merged.get("level"), allow_none=True)
    for g in ("gamma_grid", "p_grid"):
        vals = merged.get(g)
        if vals is not None:
            if not isinstance(vals, list) or not vals:
                errors.append(f"{g}: expected a non-empty list")
            else:
                for i, v in enumerate(vals):
                    _check_number(errors, f"{g}[{i}]", v, lo=0, lo_open=False)

    model = merged.get("model") or {}
    barrier = merged.get("barrier") or {}
    ctrl = merged.get("controller") or {}
    if model.get("name") not in MODELS:
        errors.append(f"model.name: unknown model {model.get('name')!r}; choose from {sorted(MODELS)}")
    if barrier.get("name") not in BARRIERS:
        errors.append(f"barrier.name: unknown barrier {barrier.get('name')!r}; choose from {sorted(BARRIERS)}")
    if ctrl.get("kind", "none") not in CONTROLLER_KINDS:
        errors.append(f"controller.kind: unknown kind {ctrl.get('kind')!r}; choose from {list(CONTROLLER_KINDS)}")
    a3 = ctrl.get("alpha3")
    if a3 is not None:
        if not isinstance(a3, dict):
            errors.append("controller.alpha3: expected a mapping with family/k/r")
        elif a3.get("family", "linear") not in ALPHA_FAMILIES:
            errors.append(
                f"controller.alpha3.family: unknown alpha family {a3.get('family')!r}; "
                f"choose from {{{', '.join(ALPHA_FAMILIES)}}}"
            )
        else:
            try:
                AlphaFn(**a3)
            except (TypeError, ValueError) as exc:
                errors.append(f"controller.alpha3: {exc}")

    x0 = merged.get("x0")
    if not isinstance(x0, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in x0):
        errors.append(f"x0: expected a list of numbers, got {x0!r}")
        x0 = None

    # cross-field checks that need built components; run even after earlier errors
    h0 = None
    if model.get("name") in MODELS and barrier.get("name") in BARRIERS and x0 is not None:
        probe = ExperimentConfig(**{**merged, "controller": {"kind": "none"}})
        try:
            model_obj = probe.build_model(**({"gamma": 1.0, "p": 1.0} if model["name"] == "h_process" else {}))
            bar = probe.build_barrier()
        except (TypeError, ValueError) as exc:
            errors.append(f"model/barrier parameters: {exc}")
        else:
            if len(x0) != model_obj.dim_x or bar.dim_x != model_obj.dim_x:
                errors.append(f"x0: expected {model_obj.dim_x} entries for model {model['name']!r}, got {len(x0)}")
            else:
                h0 = float(np.asarray(bar.h(np.asarray(x0, dtype=float)[None, :]))[0])
                if not h0 > 0:
                    errors.append(f"x0: initial state must lie strictly inside the safe set, h(x0) = {h0}")
    theta = merged.get("theta")
    if theta is not None:
        if _check_number(errors, "theta", theta) and (theta <= 0 or (h0 is not None and theta > h0)):
            bound = f"{h0:g}" if h0 is not None else "h(x0)"
            errors.append(f"theta: stopping-time level must lie in (0, h(x0)] = (0, {bound}], got {theta!r}")
    elif name == "stopping-times":
        errors.append("theta: required for stopping-times")
    if name == "b-tilde-bound":
        if merged.get("delta") is None:
            errors.append("delta: required for b-tilde-bound")
        if ctrl.get("kind") != "rcbf":
            errors.append("controller.kind: b-tilde-bound needs the rcbf controller")
    if errors:
        raise ConfigError(errors)
    cfg = ExperimentConfig(**merged)
    cfg.n_paths = int(cfg.n_paths)
    cfg.seed = int(cfg.seed)
    if cfg.pilot_paths is not None:
        cfg.pilot_paths = int(cfg.pilot_paths)
    return cfg
