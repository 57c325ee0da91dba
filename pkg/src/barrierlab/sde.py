"""Euler-Maruyama simulation of control-affine SDEs with exit detection.

The state equation is ``dx = (f(x) + g(x) u) dt + sigma(x) dW``.  Model,
barrier and controller callables are *batched*: they receive an array of
shape ``(n, dim_x)`` and return arrays with a leading ``n`` axis.  All
operations applied per path are elementwise in that axis, and the noise of
each path comes from its own counter-based stream, so a path simulated alone
is bit-identical to the same path simulated inside any batch.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
from scipy.special import ndtri

from . import rng

__all__ = [
    "ModelEvaluationError",
    "SdeModel",
    "IntegratorConfig",
    "PathSample",
    "BatchOutcome",
    "StepInfo",
    "StepObserver",
    "PathRecorder",
    "em_step",
    "detect_exit",
    "bridge_crossing_probability",
    "simulate_batch",
    "simulate_paths",
    "simulate_path",
    "write_path_csv",
]


class ModelEvaluationError(ArithmeticError):
    """A drift, control matrix or diffusion evaluated to a non-finite value."""

    def __init__(self, what: str, state):
        self.what = what
        self.state = np.asarray(state, dtype=float)
        super().__init__(f"non-finite {what} at state {self.state.tolist()}")


def as_batch(x, dim: int) -> tuple[np.ndarray, bool]:
    """Promote a single state to a batch of one; report whether it was single."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
        single = True
    elif arr.ndim == 1:
        single = True
        arr = arr.reshape(1, -1)
    else:
        single = False
    if arr.shape[-1] != dim:
        raise ValueError(f"expected trailing dimension {dim}, got shape {arr.shape}")
    return arr, single


@dataclass(frozen=True)
class SdeModel:
    """Control-affine diffusion ``dx = (f + g u) dt + sigma dW``.

    ``drift``: (n, dim_x) -> (n, dim_x); ``control_matrix``: (n, dim_x) ->
    (n, dim_x, dim_u), may be None when ``dim_u == 0``; ``diffusion``:
    (n, dim_x) -> (n, dim_x, dim_w).
    """

    dim_x: int
    dim_u: int
    dim_w: int
    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    control_matrix: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "model"

    def __post_init__(self):
        if self.dim_x < 1 or self.dim_w < 1 or self.dim_u < 0:
            raise ValueError("dim_x and dim_w must be positive, dim_u non-negative")
        if self.dim_u > 0 and self.control_matrix is None:
            raise ValueError("control_matrix is required when dim_u > 0")

    def evaluate(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Evaluate ``(f, g, sigma)`` on a batch, checking shapes and finiteness."""
        n = X.shape[0]
        F = np.asarray(self.drift(X), dtype=float)
        S = np.asarray(self.diffusion(X), dtype=float)
        if self.dim_u:
            G = np.asarray(self.control_matrix(X), dtype=float)
        else:
            G = np.zeros((n, self.dim_x, 0))
        for what, arr, shape in (
            ("drift", F, (n, self.dim_x)),
            ("control matrix", G, (n, self.dim_x, self.dim_u)),
            ("diffusion", S, (n, self.dim_x, self.dim_w)),
        ):
            if arr.shape != shape:
                raise ValueError(f"{self.name}: {what} has shape {arr.shape}, expected {shape}")
            ok = np.isfinite(arr)
            if not ok.all():
                bad = ~ok.all(axis=tuple(range(1, arr.ndim)))
                raise ModelEvaluationError(f"{self.name} {what}", X[np.argmax(bad)])
        return F, G, S


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float
    horizon: float
    seed: int = 0
    bridge_correction: bool = True
    path_index: int = 0

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive and finite, got {self.dt}")
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ValueError(f"horizon must be positive and finite, got {self.horizon}")
        if self.dt > self.horizon:
            raise ValueError(f"dt={self.dt} exceeds horizon={self.horizon}")
        if self.path_index < 0:
            raise ValueError("path_index must be non-negative")

    @property
    def n_steps(self) -> int:
        # tolerate horizon/dt landing a few ulps above an integer
        return max(1, math.ceil(self.horizon / self.dt * (1.0 - 1e-12)))

    def step_size(self, k: int) -> float:
        """Length of step ``k``; the final step is shortened to land on the horizon."""
        n = self.n_steps
        if k < n - 1:
            return self.dt
        return self.horizon - (n - 1) * self.dt

    def time(self, k: int) -> float:
        return self.horizon if k >= self.n_steps else k * self.dt


@dataclass
class PathSample:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    h: np.ndarray
    exited: bool
    exit_time: Optional[float]
    noise_stream_id: tuple[int, int]
    infeasible: bool = False
    diagnostic: str = ""
    sigma_h: Optional[np.ndarray] = None
    noise: Optional[np.ndarray] = None
    mu_h: Optional[np.ndarray] = None

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    def sigma_h_sq(self) -> np.ndarray:
        """Squared diffusion of h at the left end of each step."""
        if self.sigma_h is None:
            raise ValueError("path was recorded without the diffusion of h")
        return np.sum(self.sigma_h**2, axis=1)


@dataclass
class StepInfo:
    """Everything an observer may want to know about one Euler-Maruyama step.

    Arrays are indexed by *active row*; ``slots`` maps rows back to positions
    in the original batch.  ``mu_h`` is only populated when some observer sets
    ``needs_drift``.
    """

    k: int
    t: float
    dt: float
    slots: np.ndarray
    x_prev: np.ndarray
    x_next: np.ndarray
    u: np.ndarray
    h_prev: np.ndarray
    h_next: np.ndarray
    sigma_h: np.ndarray
    dW: np.ndarray
    exited: np.ndarray
    t_next: float
    mu_h: Optional[np.ndarray] = None


class StepObserver(Protocol):
    needs_drift: bool

    def start(self, n: int, x0: np.ndarray, h0: np.ndarray) -> None: ...

    def step(self, info: StepInfo) -> Optional[np.ndarray]:
        """Consume one step; optionally return a mask of rows to retire."""
        ...


@dataclass
class BatchOutcome:
    path_indices: np.ndarray
    exited: np.ndarray
    exit_time: np.ndarray
    infeasible: np.ndarray
    stopped: np.ndarray
    final_state: np.ndarray
    final_time: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.path_indices.shape[0]

    @staticmethod
    def concat(parts: Sequence["BatchOutcome"]) -> "BatchOutcome":
        diags = {}
        for p in parts:
            diags.update(p.diagnostics)
        return BatchOutcome(
            path_indices=np.concatenate([p.path_indices for p in parts]),
            exited=np.concatenate([p.exited for p in parts]),
            exit_time=np.concatenate([p.exit_time for p in parts]),
            infeasible=np.concatenate([p.infeasible for p in parts]),
            stopped=np.concatenate([p.stopped for p in parts]),
            final_state=np.concatenate([p.final_state for p in parts]),
            final_time=np.concatenate([p.final_time for p in parts]),
            diagnostics=diags,
        )


def em_step(model: SdeModel, x, u, dt: float, dW) -> np.ndarray:
    """One Euler-Maruyama step ``x + (f + g u) dt + sigma dW``.

    Works for a single state (1-D ``x``) or a batch ``(n, dim_x)``.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    X, single = as_batch(x, model.dim_x)
    n = X.shape[0]
    U = np.asarray(u, dtype=float).reshape(n, model.dim_u)
    dW = np.asarray(dW, dtype=float).reshape(n, model.dim_w)
    F, G, S = model.evaluate(X)
    out = _em(X, F, G, S, U, dt, dW)
    return out[0] if single else out


def _em(X, F, G, S, U, dt, dW):
    drift = F + np.einsum("nij,nj->ni", G, U)
    return X + drift * dt + np.einsum("nij,nj->ni", S, dW)


def bridge_crossing_probability(h_prev, h_next, sigma_eff, dt):
    """Probability that a Brownian bridge between two positive levels touches zero.

    ``exp(-2 h_prev h_next / (sigma_eff^2 dt))``; zero where ``sigma_eff == 0``
    and one where either endpoint is already non-positive.
    """
    h_prev = np.asarray(h_prev, dtype=float)
    h_next = np.asarray(h_next, dtype=float)
    return _crossing(h_prev, h_next, np.asarray(sigma_eff, dtype=float) ** 2 * dt)


def _crossing(h_prev, h_next, var):
    # var == 0 gives exp(-inf) = 0; a non-positive endpoint is a sure crossing
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        p = np.exp(-2.0 * h_prev * h_next / var)
    return np.where((h_prev > 0) & (h_next > 0), np.nan_to_num(p, nan=0.0), 1.0)


def detect_exit(h_prev, h_next, dt, sigma_eff, bridge_correction: bool, u01) -> bool:
    """Decide whether the path left ``{h > 0}`` during one step.

    Args:
        h_prev: barrier value at the start of the step (must be positive).
        h_next: barrier value at the end of the step.
        dt: step length.
        sigma_eff: scalar diffusion of h over the step.
        bridge_correction: also test for an unobserved crossing between grid points.
        u01: uniform variate used for the bridge test.
    """
    if not h_prev > 0:
        raise ValueError(f"h_prev must be positive, got {h_prev}")
    if h_next <= 0:
        return True
    if not bridge_correction or sigma_eff == 0:
        return False
    return bool(u01 < bridge_crossing_probability(h_prev, h_next, sigma_eff, dt))


def _noise_and_uniform(seed, paths, k, dim_w, dt):
    u = rng.uniforms(seed, paths, k, dim_w + 1)
    z = ndtri(u[:, :dim_w])
    z *= math.sqrt(dt)
    return z, u[:, dim_w]


def simulate_batch(
    model: SdeModel,
    controller,
    barrier,
    x0,
    config: IntegratorConfig,
    path_indices,
    observers: Sequence[StepObserver] = (),
) -> BatchOutcome:
    """Simulate a batch of independent paths until exit, retirement or horizon.

    Args:
        model: the SDE.
        controller: batched callable ``X -> (U, feasible)``.
        barrier: object with batched ``h``, ``grad`` (and ``hess``) evaluators.
        x0: common initial state, shape ``(dim_x,)``.
        config: integrator settings; ``config.path_index`` is ignored here.
        path_indices: noise stream indices, one per path.
        observers: per-step hooks (see :class:`StepObserver`).
    """
    paths = np.asarray(path_indices, dtype=np.int64).reshape(-1)
    n = paths.shape[0]
    x0 = np.asarray(x0, dtype=float).reshape(model.dim_x)
    X = np.tile(x0, (n, 1))
    h = np.asarray(barrier.h(X), dtype=float)
    if n and not (h > 0).all():
        raise ValueError(f"initial state must satisfy h(x0) > 0, got h={h[0]}")
    for obs in observers:
        obs.start(n, X.copy(), h.copy())
    needs_drift = any(getattr(obs, "needs_drift", False) for obs in observers)

    exited = np.zeros(n, dtype=bool)
    infeasible = np.zeros(n, dtype=bool)
    stopped = np.zeros(n, dtype=bool)
    exit_time = np.full(n, np.nan)
    final_state = X.copy()
    final_time = np.zeros(n)
    diagnostics: dict = {}

    slots = np.arange(n)
    t = 0.0
    n_steps = config.n_steps
    for k in range(n_steps):
        if slots.size == 0:
            break
        dt = config.step_size(k)
        U, feasible = controller(X)
        U = np.asarray(U, dtype=float).reshape(slots.size, model.dim_u)
        feasible = np.asarray(feasible, dtype=bool)
        if not feasible.all():
            bad = ~feasible
            infeasible[slots[bad]] = True
            final_time[slots[bad]] = t
            final_state[slots[bad]] = X[bad]
            for r in np.flatnonzero(bad):
                diagnostics[int(paths[slots[r]])] = (
                    f"controller infeasible at t={t:.6g}, state={X[r].tolist()}"
                )
            keep = feasible
            slots, X, U, h = slots[keep], X[keep], U[keep], h[keep]
            if slots.size == 0:
                break
        F, G, S = model.evaluate(X)
        dW, u01 = _noise_and_uniform(config.seed, paths[slots], k, model.dim_w, dt)
        Xn = _em(X, F, G, S, U, dt, dW)
        hn = np.asarray(barrier.h(Xn), dtype=float)
        grad = np.asarray(barrier.grad(X), dtype=float)
        sig_h = np.einsum("ni,nij->nj", grad, S)
        out = ~(hn > 0)
        if config.bridge_correction:
            var = np.einsum("nj,nj->n", sig_h, sig_h)
            var *= -0.5 * dt
            # rows with h_next <= 0 are already out; nan (0/0) compares false
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                out |= u01 < np.exp(h * hn / var)
        mu_h = None
        if needs_drift:
            hess = np.asarray(barrier.hess(X), dtype=float)
            mu_h = np.einsum("ni,ni->n", grad, F + np.einsum("nij,nj->ni", G, U))
            mu_h = mu_h + 0.5 * np.einsum("nij,nik,nkj->n", S, hess, S)
        t_next = config.time(k + 1)
        info = StepInfo(k, t, dt, slots, X, Xn, U, h, hn, sig_h, dW, out, t_next, mu_h)
        retire = np.zeros(slots.size, dtype=bool)
        for obs in observers:
            r = obs.step(info)
            if r is not None:
                retire |= np.asarray(r, dtype=bool)
        if out.any():
            exited[slots[out]] = True
            exit_time[slots[out]] = t_next
        done = out | retire
        stopped[slots[retire & ~out]] = True
        if done.any():
            final_state[slots[done]] = Xn[done]
            final_time[slots[done]] = t_next
            keep = ~done
            slots, Xn, hn = slots[keep], Xn[keep], hn[keep]
        X, h, t = Xn, hn, t_next
    if slots.size:
        final_state[slots] = X
        final_time[slots] = t
    return BatchOutcome(paths, exited, exit_time, infeasible, stopped, final_state, final_time, diagnostics)


def simulate_paths(
    model: SdeModel,
    controller,
    barrier,
    x0,
    config: IntegratorConfig,
    n_paths: int,
    first_index: int = 0,
    chunk_size: int = 100_000,
    workers: int = 1,
    observer_factory: Optional[Callable[[], Sequence[StepObserver]]] = None,
    reduce: Optional[Callable[[BatchOutcome, Sequence[StepObserver]], object]] = None,
):
    """Simulate paths ``first_index .. first_index + n_paths - 1`` in chunks.

    Chunks may run on a thread pool; results are identical for any
    ``chunk_size``/``workers`` because each path owns its noise stream.
    Returns the concatenated :class:`BatchOutcome` and, when ``reduce`` is
    given, the list of per-chunk reductions in path order.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    bounds = [
        (s, min(s + chunk_size, first_index + n_paths))
        for s in range(first_index, first_index + n_paths, chunk_size)
    ]

    def run(bound):
        obs = list(observer_factory()) if observer_factory else []
        out = simulate_batch(model, controller, barrier, x0, config, np.arange(*bound), obs)
        return out, (reduce(out, obs) if reduce else None)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, bounds))
    else:
        results = [run(b) for b in bounds]
    outcome = BatchOutcome.concat([r[0] for r in results])
    return outcome, [r[1] for r in results]


class PathRecorder:
    """Observer that stores full trajectories for a (small) batch."""

    def __init__(self, model: SdeModel, n_steps: int, record_drift: bool = False):
        self.model = model
        self.n_steps = n_steps
        self.needs_drift = record_drift

    def start(self, n, x0, h0):
        m, dx, du, dw = self.n_steps, self.model.dim_x, self.model.dim_u, self.model.dim_w
        self.states = np.full((n, m + 1, dx), np.nan)
        self.controls = np.full((n, m, du), np.nan)
        self.h = np.full((n, m + 1), np.nan)
        self.sigma_h = np.full((n, m, dw), np.nan)
        self.noise = np.full((n, m, dw), np.nan)
        self.mu_h = np.full((n, m), np.nan) if self.needs_drift else None
        self.times = np.zeros(m + 1)
        self.length = np.zeros(n, dtype=np.int64)
        self.states[:, 0] = x0
        self.h[:, 0] = h0

    def step(self, info: StepInfo):
        k, s = info.k, info.slots
        self.times[k + 1] = info.t_next
        self.states[s, k + 1] = info.x_next
        self.h[s, k + 1] = info.h_next
        self.controls[s, k] = info.u
        self.sigma_h[s, k] = info.sigma_h
        self.noise[s, k] = info.dW
        if self.mu_h is not None:
            self.mu_h[s, k] = info.mu_h
        self.length[s] = k + 1
        return None

    def sample(self, slot: int, outcome: BatchOutcome, seed: int = 0) -> PathSample:
        m = int(self.length[slot])
        exited = bool(outcome.exited[slot])
        return PathSample(
            times=self.times[: m + 1].copy(),
            states=self.states[slot, : m + 1].copy(),
            controls=self.controls[slot, :m].copy(),
            h=self.h[slot, : m + 1].copy(),
            exited=exited,
            exit_time=float(outcome.exit_time[slot]) if exited else None,
            noise_stream_id=(int(seed), int(outcome.path_indices[slot])),
            infeasible=bool(outcome.infeasible[slot]),
            diagnostic=outcome.diagnostics.get(int(outcome.path_indices[slot]), ""),
            sigma_h=self.sigma_h[slot, :m].copy(),
            noise=self.noise[slot, :m].copy(),
            mu_h=None if self.mu_h is None else self.mu_h[slot, :m].copy(),
        )


def simulate_path(model: SdeModel, controller, barrier, x0, config: IntegratorConfig,
                  record_drift: bool = False) -> PathSample:
    """Simulate and record the single path ``config.path_index``."""
    rec = PathRecorder(model, config.n_steps, record_drift)
    out = simulate_batch(model, controller, barrier, x0, config, [config.path_index], [rec])
    return rec.sample(0, out, config.seed)


def write_path_csv(path: PathSample, target) -> Path:
    """Dump one path as CSV with columns ``t, x_1.., u_1.., h``.

    The control on row ``k`` is the one applied on ``[t_k, t_{k+1})``; the
    last row has empty control cells.
    """
    target = Path(target)
    dx = path.states.shape[1]
    du = path.controls.shape[1] if path.controls.ndim == 2 else 0
    header = ["t"] + [f"x_{i + 1}" for i in range(dx)] + [f"u_{j + 1}" for j in range(du)] + ["h"]
    with target.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k, t in enumerate(path.times):
            u = [repr(float(v)) for v in path.controls[k]] if k < len(path.controls) else [""] * du
            w.writerow([repr(float(t))] + [repr(float(v)) for v in path.states[k]] + u + [repr(float(path.h[k]))])
    return target
