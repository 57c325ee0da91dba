"""Ensemble estimators: exit probabilities, stopping times, local time, and the B-tilde bound.

Ensemble statistics are accumulated by per-chunk observers that only keep
counts and sums, so results do not depend on chunking or thread count.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from statistics import NormalDist
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .barrier import ReciprocalSpec
from .sde import IntegratorConfig, PathSample, StepInfo, simulate_paths

log = logging.getLogger(__name__)

__all__ = [
    "EnsembleConfig",
    "ExitEstimate",
    "StoppingTimeRecord",
    "LocalTimeEstimate",
    "BTildeReport",
    "wilson_interval",
    "estimate_exit_probability",
    "stopping_time_sequence",
    "StoppingTimeObserver",
    "first_return_gaps",
    "estimate_local_time",
    "LocalTimeObserver",
    "local_time_ensemble",
    "BTildeObserver",
    "validate_b_tilde_bound",
]


@dataclass(frozen=True)
class EnsembleConfig:
    """Ensemble settings; paths ``first_index .. first_index + n_paths - 1`` are used."""

    n_paths: int
    dt: float
    horizon: float
    seed: int = 0
    bridge_correction: bool = True
    first_index: int = 0
    workers: int = 1
    chunk_size: int = 50_000

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError(f"n_paths must be at least 1, got {self.n_paths}")
        self.integrator()  # validates dt and horizon

    @classmethod
    def coerce(cls, cfg: Union["EnsembleConfig", Mapping]) -> "EnsembleConfig":
        return cfg if isinstance(cfg, cls) else cls(**dict(cfg))

    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(self.dt, self.horizon, self.seed, self.bridge_correction)

    def run(self, model, controller, barrier, x0, observer_factory=None, reduce=None, first_index=None):
        first = self.first_index if first_index is None else first_index
        return simulate_paths(
            model, controller, barrier, x0, self.integrator(), self.n_paths,
            first_index=first, chunk_size=self.chunk_size, workers=self.workers,
            observer_factory=observer_factory, reduce=reduce,
        )


# ----------------------------------------------------------------------------
# exit probability


def wilson_interval(n_exits: int, n_paths: int, confidence: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n_paths < 1 or not 0 <= n_exits <= n_paths:
        raise ValueError(f"need 0 <= n_exits <= n_paths and n_paths >= 1, got {n_exits}/{n_paths}")
    if not 0 < confidence < 1:
        raise ValueError(f"confidence must lie in (0, 1), got {confidence}")
    z = NormalDist().inv_cdf(0.5 + confidence / 2.0)
    n = float(n_paths)
    p = n_exits / n
    z2 = z * z
    centre = (p + z2 / (2 * n)) / (1 + z2 / n)
    half = z * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / (1 + z2 / n)
    low = 0.0 if n_exits == 0 else max(0.0, centre - half)
    high = 1.0 if n_exits == n_paths else min(1.0, centre + half)
    return low, high


@dataclass(frozen=True)
class ExitEstimate:
    n_paths: int
    n_exits: int
    p_hat: float
    ci_low: float
    ci_high: float
    dt: float
    horizon: float
    seed: int
    n_infeasible: int = 0
    bridge_correction: bool = True

    @classmethod
    def from_counts(cls, n_exits, n_paths, dt, horizon, seed, n_infeasible=0, bridge_correction=True):
        lo, hi = wilson_interval(n_exits, n_paths)
        return cls(n_paths, n_exits, n_exits / n_paths, lo, hi, dt, horizon, seed, n_infeasible, bridge_correction)

    def contains(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high

    def to_dict(self) -> dict:
        return asdict(self)


def estimate_exit_probability(model, controller, barrier, x0, config) -> ExitEstimate:
    """Fraction of paths leaving the safe set before the horizon.

    ``config`` is an :class:`EnsembleConfig` or a mapping with its fields.
    Paths on which the controller becomes infeasible are dropped from the
    estimate and reported in ``n_infeasible``.
    """
    cfg = EnsembleConfig.coerce(config)
    outcome, _ = cfg.run(model, controller, barrier, x0)
    infeasible = outcome.infeasible
    n_bad = int(infeasible.sum())
    n_ok = outcome.n_paths - n_bad
    if n_bad:
        msg = f"{n_bad} of {outcome.n_paths} paths hit an infeasible controller and were excluded"
        log.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    if n_ok == 0:
        raise RuntimeError("controller infeasible on every path; no estimate possible")
    n_exits = int((outcome.exited & ~infeasible).sum())
    return ExitEstimate.from_counts(n_exits, n_ok, cfg.dt, cfg.horizon, cfg.seed, n_bad, cfg.bridge_correction)


# ----------------------------------------------------------------------------
# stopping times


@dataclass(frozen=True)
class StoppingTimeRecord:
    """Alternating level-crossing times ``(eta_i, zeta_i)`` with ``eta_0 = 0``.

    A pair whose ``zeta`` never happened carries ``None`` and sets ``truncated``.
    """

    theta: float
    pairs: list
    truncated: bool

    def gaps(self) -> list[float]:
        """``eta_{i+1} - zeta_i`` for every completed gap."""
        out = []
        for (_, z), (e, _) in zip(self.pairs, self.pairs[1:]):
            if z is not None and e is not None:
                out.append(e - z)
        return out


def _crossings(times: np.ndarray, h: np.ndarray, theta: float, limit: int) -> list[float]:
    """Alternately the next index with ``h > theta``, then ``h < theta``, strictly after the previous."""
    above = h > theta
    below = h < theta
    out = []
    start = 0
    want_above = True
    while len(out) < limit:
        mask = above if want_above else below
        idx = np.flatnonzero(mask[start:])
        if idx.size == 0:
            break
        j = start + int(idx[0])
        out.append(float(times[j]))
        start = j + 1
        want_above = not want_above
    return out


def stopping_time_sequence(path: PathSample, barrier=None, theta: float = 1.0, max_pairs: int = 10) -> StoppingTimeRecord:
    """Stopping times on a recorded path.

    ``zeta_0 = inf{t : h > theta}``, ``eta_i = inf{t > zeta_(i-1) : h < theta}``,
    ``zeta_i = inf{t > eta_i : h > theta}``, evaluated on the grid with the
    strict inequalities as written.  A path sitting exactly on ``theta``
    never crosses.  If ``barrier`` is given, ``h`` is recomputed from the
    recorded states; otherwise ``path.h`` is used.
    """
    if not theta > 0:
        raise ValueError(f"theta must be positive, got {theta}")
    h = np.asarray(barrier.h(path.states) if barrier is not None else path.h, dtype=float)
    if theta > h[0]:
        raise ValueError(f"theta must lie in (0, h(x0)] = (0, {h[0]}], got {theta}")
    times = np.asarray(path.times, dtype=float)
    ok = np.isfinite(h)
    times, h = times[ok], h[ok]
    cross = _crossings(times, h, theta, 2 * max_pairs - 1)
    pairs = [(0.0, cross[0] if cross else None)]
    for i in range(1, max_pairs):
        e_idx, z_idx = 2 * i - 1, 2 * i
        if e_idx >= len(cross):
            break
        pairs.append((cross[e_idx], cross[z_idx] if z_idx < len(cross) else None))
    truncated = len(cross) < 2 * max_pairs - 1
    return StoppingTimeRecord(theta, pairs, truncated)


class StoppingTimeObserver:
    """Vectorised crossing times for an ensemble; retires a path once ``n_times`` are found.

    Column ``j`` of :attr:`times` holds ``zeta_0, eta_1, zeta_1, ...``; missing
    entries are ``inf``.
    """

    needs_drift = False

    def __init__(self, theta: float, n_times: int = 2):
        self.theta = float(theta)
        self.n_times = int(n_times)

    def start(self, n, x0, h0):
        self.times = np.full((n, self.n_times), np.inf)
        self.count = np.zeros(n, dtype=np.int64)
        if (h0 < self.theta).any():
            raise ValueError(f"theta must lie in (0, h(x0)], got {self.theta} > {h0.min()}")
        up = h0 > self.theta
        self.times[up, 0] = 0.0
        self.count[up] = 1

    def step(self, info: StepInfo):
        s = info.slots
        c = self.count[s]
        h = info.h_next
        hit = np.where(c % 2 == 0, h > self.theta, h < self.theta) & ~info.exited & (c < self.n_times)
        if hit.any():
            rows = s[hit]
            self.times[rows, c[hit]] = info.t_next
            self.count[rows] += 1
        return self.count[s] >= self.n_times


def _gap_reduce(out, obs):
    with np.errstate(invalid="ignore"):
        return obs[0].times[:, 1] - obs[0].times[:, 0]


def first_return_gaps(config, theta: float, model, controller, barrier, x0) -> np.ndarray:
    """``eta_1 - zeta_0`` for every path of an ensemble (``inf`` if absent)."""
    cfg = EnsembleConfig.coerce(config)
    _, parts = cfg.run(
        model, controller, barrier, x0,
        observer_factory=lambda: [StoppingTimeObserver(theta, 2)],
        reduce=_gap_reduce,
    )
    gaps = np.concatenate(parts)
    gaps[np.isnan(gaps)] = np.inf  # inf - inf when zeta_0 never happened
    return gaps


# ----------------------------------------------------------------------------
# local time


@dataclass(frozen=True)
class LocalTimeEstimate:
    level: float
    eps: float
    L_hat: float
    tanaka_residual: float


def _default_eps(sigma: float, dt: float) -> float:
    return 5.0 * abs(sigma) * math.sqrt(dt)


def estimate_local_time(path: PathSample, level: float, eps: Optional[float] = None,
                        horizon: Optional[float] = None) -> LocalTimeEstimate:
    """Occupation-time estimate of the local time of ``h(x_t)`` at ``level``.

    ``L = (1/eps) sum 1{|X_k - a| < eps/2} sigma_k^2 dt_k`` with ``X = h``
    and ``sigma`` its diffusion row.  The Tanaka residual is
    ``(X_t - a)^+ - (X_0 - a)^+ - sum 1{X_k > a} dX_k - L/2``.

    Args:
        path: a recorded path with ``sigma_h``.
        level: the level ``a``.
        eps: bandwidth; defaults to ``5 sigma sqrt(dt)`` using the median diffusion.
        horizon: truncate the path at this time (defaults to the whole path).
    """
    X = np.asarray(path.h, dtype=float)
    dt = np.diff(path.times)
    s2 = path.sigma_h_sq()
    m = len(dt)
    if horizon is not None:
        m = int(np.searchsorted(path.times, horizon * (1 + 1e-12), side="right")) - 1
    m = min(m, len(s2))
    X, dt, s2 = X[: m + 1], dt[:m], s2[:m]
    if eps is None:
        sig = float(np.sqrt(np.median(s2))) if m else 0.0
        eps = _default_eps(sig, float(np.median(dt)) if m else 0.0) or 1.0
    if not eps > 0:
        raise ValueError(f"bandwidth must be positive, got {eps}")
    dX = np.diff(X)
    if m and eps < np.median(np.abs(dX)):
        warnings.warn("local-time bandwidth is below the typical step size; estimate will be noisy",
                      RuntimeWarning, stacklevel=2)
    near = np.abs(X[:m] - level) < eps / 2.0
    L = float(np.sum(s2[near] * dt[near]) / eps)
    ito = float(np.sum(dX[X[:m] > level]))
    resid = max(X[m] - level, 0.0) - max(X[0] - level, 0.0) - ito - 0.5 * L
    return LocalTimeEstimate(float(level), float(eps), L, float(resid))


class LocalTimeObserver:
    """Ensemble version of :func:`estimate_local_time`.

    With ``reciprocal=True`` the process is ``B = 1/h`` with diffusion
    ``-sigma_h / h^2``; otherwise it is ``h`` itself.  ``eps`` defaults to
    ``5 |sigma| sqrt(dt)`` with ``sigma`` taken per path at time 0.
    """

    needs_drift = False

    def __init__(self, level: float, eps: Optional[float] = None, reciprocal: bool = False):
        self.level = float(level)
        self.eps_fixed = eps
        self.reciprocal = reciprocal

    def _value(self, h):
        return 1.0 / h if self.reciprocal else h

    def start(self, n, x0, h0):
        X0 = self._value(h0)
        self.L = np.zeros(n)
        self.ito = np.zeros(n)
        self.x0 = X0.copy()
        self.x_last = X0.copy()
        self.eps = np.full(n, np.nan if self.eps_fixed is None else float(self.eps_fixed))
        self.broken = np.zeros(n, dtype=bool)

    def step(self, info: StepInfo):
        s = info.slots
        h, hn = info.h_prev, info.h_next
        X = self._value(h)
        s2 = np.einsum("nj,nj->n", info.sigma_h, info.sigma_h)
        if self.reciprocal:
            s2 = s2 / h**4
        eps = self.eps[s]
        fresh = np.isnan(eps)
        if fresh.any():
            eps[fresh] = 5.0 * np.sqrt(s2[fresh] * info.dt)
            eps[fresh & (eps == 0)] = 1.0
            self.eps[s] = eps
        with np.errstate(divide="ignore", invalid="ignore"):
            Xn = self._value(hn)
        near = np.abs(X - self.level) < eps / 2.0
        self.L[s] += np.where(near, s2 * info.dt, 0.0) / eps
        self.ito[s] += np.where(X > self.level, Xn - X, 0.0)
        self.x_last[s] = Xn
        if info.exited.any():
            self.broken[s[info.exited]] = True
        return None

    def residual(self) -> np.ndarray:
        a = self.level
        return np.maximum(self.x_last - a, 0) - np.maximum(self.x0 - a, 0) - self.ito - 0.5 * self.L


def local_time_ensemble(model, controller, barrier, x0, config, level: float,
                        eps: Optional[float] = None):
    """Per-path local time of ``h`` at ``level`` and Tanaka residuals over an ensemble.

    Returns ``(L_hat, residual, outcome)``.
    """
    cfg = EnsembleConfig.coerce(config)
    outcome, parts = cfg.run(
        model, controller, barrier, x0,
        observer_factory=lambda: [LocalTimeObserver(level, eps)],
        reduce=lambda out, obs: (obs[0].L.copy(), obs[0].residual()),
    )
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), outcome


# ----------------------------------------------------------------------------
# B-tilde bound


class BTildeObserver:
    """Tracks ``B = 1/h`` against ``B~_t = B0 + M + b t + sum bbar 1{B >= B0} dW``.

    ``bbar = -sigma_h / h^2`` is the diffusion row of ``B``, driven by the
    same Wiener increments as the path.  Also accumulates the drift of ``B``
    over steps where ``B < B0`` to check it against ``b t``.
    """

    needs_drift = True

    def __init__(self, B0: float, M: float, b_tilde: float):
        self.B0, self.M, self.b = float(B0), float(M), float(b_tilde)

    def start(self, n, x0, h0):
        self.stoch = np.zeros(n)
        self.violated = np.zeros(n, dtype=bool)
        self.drift_below = np.zeros(n)
        self.time_below = np.zeros(n)
        self.max_excess = np.zeros(n)

    def step(self, info: StepInfo):
        s = info.slots
        h = info.h_prev
        B = 1.0 / h
        bbar = -info.sigma_h / h[:, None] ** 2
        active = B >= self.B0
        self.stoch[s] += np.where(active, np.einsum("nj,nj->n", bbar, info.dW), 0.0)
        s2 = np.einsum("nj,nj->n", info.sigma_h, info.sigma_h)
        driftB = -info.mu_h / h**2 + s2 / h**3
        below = ~active
        self.drift_below[s] += np.where(below, driftB * info.dt, 0.0)
        self.time_below[s] += np.where(below, info.dt, 0.0)
        self.max_excess[s] = np.maximum(
            self.max_excess[s], self.drift_below[s] - self.b * self.time_below[s]
        )
        with np.errstate(divide="ignore"):
            Bn = np.where(info.h_next > 0, 1.0 / info.h_next, np.inf)
        bt = self.B0 + self.M + self.b * info.t_next + self.stoch[s]
        bad = (Bn > bt) | info.exited | ~np.isfinite(Bn)
        self.violated[s] |= bad
        return None


@dataclass(frozen=True)
class BTildeReport:
    M: float
    violation_fraction: float
    n_violations: int
    n_paths: int
    B0: float
    b_tilde: float
    delta: float
    standard_error: float
    max_drift_excess: float
    pilot_local_time_mean: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def validate_b_tilde_bound(model, controller, spec: ReciprocalSpec, x0, horizon: float, delta: float,
                           config, pilot_paths: Optional[int] = None) -> BTildeReport:
    """Empirical check of ``Pr(B_s <= B~_s for all s <= t) >= 1 - delta/2``.

    The pilot ensemble (path indices ``first_index ..``) estimates ``M`` as the
    ``1 - delta/2`` quantile of half the local time of ``B`` at ``B0``.  The
    main ensemble uses the next block of path indices, so its noise is
    independent of the pilot's.  Paths that leave the safe set count as
    violations.
    """
    if not 0 < delta <= 1:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    cfg = EnsembleConfig.coerce(config)
    if abs(cfg.horizon - horizon) > 1e-12 * max(1.0, horizon):
        cfg = EnsembleConfig(**{**asdict(cfg), "horizon": horizon})
    barrier = spec.base
    x0 = np.asarray(x0, dtype=float).reshape(1, -1)
    B0 = float(spec.B(x0)[0])
    if not math.isfinite(B0) or B0 <= 0:
        raise ValueError(f"B(x0) must be finite and positive, got {B0}")
    b_tilde = float(spec.alpha3(spec.alpha2.inverse(1.0 / B0)))

    n_pilot = pilot_paths or cfg.n_paths
    pilot_cfg = EnsembleConfig(**{**asdict(cfg), "n_paths": n_pilot})
    _, parts = pilot_cfg.run(
        model, controller, barrier, x0[0],
        observer_factory=lambda: [LocalTimeObserver(B0, reciprocal=True)],
        reduce=lambda out, obs: obs[0].L.copy(),
    )
    half_L = 0.5 * np.concatenate(parts)
    M = float(np.quantile(half_L, 1.0 - delta / 2.0))

    _, parts = cfg.run(
        model, controller, barrier, x0[0],
        observer_factory=lambda: [BTildeObserver(B0, M, b_tilde)],
        reduce=lambda out, obs: (obs[0].violated.copy(), obs[0].max_excess.copy()),
        first_index=cfg.first_index + n_pilot,
    )
    violated = np.concatenate([p[0] for p in parts])
    excess = np.concatenate([p[1] for p in parts])
    n = violated.size
    k = int(violated.sum())
    frac = k / n
    return BTildeReport(
        M=M,
        violation_fraction=frac,
        n_violations=k,
        n_paths=n,
        B0=B0,
        b_tilde=b_tilde,
        delta=float(delta),
        standard_error=math.sqrt(max(frac * (1 - frac), 0.0) / n),
        max_drift_excess=float(excess.max()) if n else 0.0,
        pilot_local_time_mean=float(np.mean(2 * half_L)),
    )
