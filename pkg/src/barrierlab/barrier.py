"""Barrier functions, the Ito push-forward of h, and min-norm safety controllers.

Three conditions are supported, each affine in the control ``u``:

* zero-CBF:       ``mu_h + h >= 0``
* modified ZCBF:  ``mu_h - |sigma_h|^2 / h + h^2 alpha3(h) >= 0``
* reciprocal CBF: ``alpha3(h) - drift(B) >= 0`` with ``B = 1/h``

where ``mu_h`` and ``sigma_h`` are the drift and diffusion of ``h(x_t)``.
Every margin function accepts a single state or a batch ``(n, dim_x)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .sde import SdeModel, as_batch

__all__ = [
    "BarrierDomainError",
    "BarrierSpec",
    "AlphaFn",
    "ReciprocalSpec",
    "ControllerSpec",
    "BarrierController",
    "CONTROLLER_KINDS",
    "ALPHA_FAMILIES",
    "linear_barrier",
    "ball_barrier",
    "ito_push",
    "zcbf_margin",
    "modified_zcbf_margin",
    "rcbf_margin",
    "reciprocal_drift",
    "min_norm_control",
    "make_controller",
]

# relative slack on the constraint bound; absorbs cancellation in the 1/h^3 terms near the boundary
BOUND_SLACK = 1e-12

CONTROLLER_KINDS = ("none", "zcbf", "modified_zcbf", "rcbf")
ALPHA_FAMILIES = ("linear", "power")


class BarrierDomainError(ValueError):
    """A barrier condition was evaluated outside the open safe set."""


@dataclass(frozen=True)
class BarrierSpec:
    """Scalar barrier ``h`` with batched gradient and Hessian evaluators.

    ``h``: (n, dim_x) -> (n,); ``grad``: -> (n, dim_x); ``hess``: -> (n, dim_x, dim_x).
    """

    dim_x: int
    h: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    name: str = "barrier"

    def value(self, x):
        X, single = as_batch(x, self.dim_x)
        v = np.asarray(self.h(X), dtype=float)
        return float(v[0]) if single else v


def linear_barrier(a, b: float = 0.0, name: str = "linear") -> BarrierSpec:
    """``h(x) = a . x + b``; ``linear_barrier([1.0])`` is the half-line ``h(x) = x``."""
    a = np.asarray(a, dtype=float).reshape(-1)
    d = a.shape[0]
    return BarrierSpec(
        dim_x=d,
        h=lambda X: np.einsum("ni,i->n", X, a) + b,
        grad=lambda X: np.broadcast_to(a, X.shape),
        hess=lambda X: np.broadcast_to(0.0, (X.shape[0], d, d)),
        name=name,
    )


def ball_barrier(center, radius: float, name: str = "ball") -> BarrierSpec:
    """``h(x) = radius^2 - |x - center|^2``."""
    c = np.asarray(center, dtype=float).reshape(-1)
    d = c.shape[0]
    eye = np.eye(d)
    return BarrierSpec(
        dim_x=d,
        h=lambda X: radius**2 - np.sum((X - c) ** 2, axis=1),
        grad=lambda X: -2.0 * (X - c),
        hess=lambda X: np.broadcast_to(-2.0 * eye, (X.shape[0], d, d)),
        name=name,
    )


@dataclass(frozen=True)
class AlphaFn:
    """Class-kappa function ``k s`` (linear) or ``k s^r`` (power).

    The power family is extended oddly to negative arguments so that it stays
    strictly increasing on the whole line.
    """

    family: str = "linear"
    k: float = 1.0
    r: float = 1.0

    def __post_init__(self):
        if self.family not in ALPHA_FAMILIES:
            raise ValueError(f"unknown alpha family {self.family!r}; expected one of {ALPHA_FAMILIES}")
        if not (self.k > 0 and self.r > 0):
            raise ValueError("alpha parameters must be positive")

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if self.family == "linear":
            return self.k * s
        return self.k * np.sign(s) * np.abs(s) ** self.r

    def inverse(self, v):
        v = np.asarray(v, dtype=float)
        if self.family == "linear":
            return v / self.k
        return np.sign(v) * (np.abs(v) / self.k) ** (1.0 / self.r)

    @classmethod
    def identity(cls) -> "AlphaFn":
        return cls("linear", 1.0)

    def to_dict(self) -> dict:
        if self.family == "linear":
            return {"family": "linear", "k": self.k}
        return {"family": "power", "k": self.k, "r": self.r}


@dataclass(frozen=True)
class ReciprocalSpec:
    """Reciprocal barrier ``B = 1/h`` built on a zeroing barrier ``h``."""

    base: BarrierSpec
    alpha1: AlphaFn = AlphaFn()
    alpha2: AlphaFn = AlphaFn()
    alpha3: AlphaFn = AlphaFn()

    def B(self, X):
        return 1.0 / np.asarray(self.base.h(X), dtype=float)

    def grad_B(self, X):
        h = np.asarray(self.base.h(X), dtype=float)
        return -np.asarray(self.base.grad(X), dtype=float) / h[:, None] ** 2

    def hess_B(self, X):
        h = np.asarray(self.base.h(X), dtype=float)
        g = np.asarray(self.base.grad(X), dtype=float)
        H = np.asarray(self.base.hess(X), dtype=float)
        outer = np.einsum("ni,nj->nij", g, g)
        return 2.0 * outer / h[:, None, None] ** 3 - H / h[:, None, None] ** 2

    def as_barrier(self) -> BarrierSpec:
        return BarrierSpec(self.base.dim_x, self.B, self.grad_B, self.hess_B, name=f"1/{self.base.name}")

    def bounds_hold(self, X) -> np.ndarray:
        """Check ``1/alpha1(h) <= B <= 1/alpha2(h)`` at interior states (with rounding slack)."""
        X, _ = as_batch(X, self.base.dim_x)
        h = np.asarray(self.base.h(X), dtype=float)
        B = self.B(X)
        lo = 1.0 / self.alpha1(h)
        hi = 1.0 / self.alpha2(h)
        tol = 1e-12 * np.abs(B)
        return (lo <= B + tol) & (B <= hi + tol)


def _prepare(barrier: BarrierSpec, model: SdeModel, x, u):
    X, single = as_batch(x, model.dim_x)
    n = X.shape[0]
    if u is None:
        U = np.zeros((n, model.dim_u))
    else:
        U = np.asarray(u, dtype=float)
        U = np.broadcast_to(U.reshape(-1, model.dim_u) if U.size else U.reshape(-1, 0), (n, model.dim_u))
    return X, U, single


def _push(barrier: BarrierSpec, model: SdeModel, X, U):
    F, G, S = model.evaluate(X)
    grad = np.asarray(barrier.grad(X), dtype=float)
    hess = np.asarray(barrier.hess(X), dtype=float)
    mu = np.einsum("ni,ni->n", grad, F + np.einsum("nij,nj->ni", G, U))
    mu = mu + 0.5 * np.einsum("nij,nik,nkj->n", S, hess, S)
    sig = np.einsum("ni,nij->nj", grad, S)
    return mu, sig, grad, G


def ito_push(barrier: BarrierSpec, model: SdeModel, x, u=None):
    """Drift and diffusion of ``h(x_t)`` under the SDE at state ``x`` and control ``u``.

    Returns ``(mu_tilde, sigma_tilde)`` with ``mu_tilde = grad_h (f + g u) +
    0.5 Tr(sigma^T hess_h sigma)`` and ``sigma_tilde = grad_h sigma`` (a row
    of length ``dim_w``).
    """
    X, U, single = _prepare(barrier, model, x, u)
    mu, sig, _, _ = _push(barrier, model, X, U)
    if single:
        return float(mu[0]), sig[0]
    return mu, sig


def _positive_h(barrier: BarrierSpec, X):
    h = np.asarray(barrier.h(X), dtype=float)
    if not (h > 0).all():
        bad = X[np.argmax(~(h > 0))]
        raise BarrierDomainError(f"barrier condition evaluated at h(x) <= 0 (x={bad.tolist()})")
    return h


def _out(v, single):
    return float(v[0]) if single else v


def zcbf_margin(barrier: BarrierSpec, model: SdeModel, x, u=None):
    """``mu_tilde + h(x)``; the zero-CBF condition holds iff this is >= 0."""
    X, U, single = _prepare(barrier, model, x, u)
    h = _positive_h(barrier, X)
    mu, _, _, _ = _push(barrier, model, X, U)
    return _out(mu + h, single)


def modified_zcbf_margin(barrier: BarrierSpec, model: SdeModel, x, u=None, alpha3: AlphaFn = AlphaFn()):
    """``mu_tilde - |sigma_tilde|^2 / h + h^2 alpha3(h)``; condition holds iff >= 0."""
    X, U, single = _prepare(barrier, model, x, u)
    h = _positive_h(barrier, X)
    mu, sig, _, _ = _push(barrier, model, X, U)
    s2 = np.einsum("nj,nj->n", sig, sig)
    return _out(mu - s2 / h + h**2 * alpha3(h), single)


def rcbf_margin(spec: ReciprocalSpec, model: SdeModel, x, u=None):
    """``alpha3(h) - drift of B`` with ``B = 1/h``; condition holds iff >= 0."""
    X, U, single = _prepare(spec.base, model, x, u)
    h = _positive_h(spec.base, X)
    mu_B, _, _, _ = _push(spec.as_barrier(), model, X, U)
    return _out(spec.alpha3(h) - mu_B, single)


def reciprocal_drift(h_val, mu_tilde, sigma_tilde_sq):
    """Drift of ``B = 1/h`` from the drift and squared diffusion of ``h``."""
    h_val = np.asarray(h_val, dtype=float)
    if not (h_val > 0).all():
        raise BarrierDomainError("reciprocal drift needs h > 0")
    out = -mu_tilde / h_val**2 + np.asarray(sigma_tilde_sq, dtype=float) / h_val**3
    return float(out) if np.ndim(out) == 0 else out


def _min_norm_batch(A: np.ndarray, b: np.ndarray, u_max: Optional[float]):
    n, m = A.shape
    norm2 = np.einsum("nj,nj->n", A, A)
    active = b > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(active & (norm2 > 0), b / norm2, 0.0)
    U = scale[:, None] * A
    feasible = ~(active & (norm2 == 0))
    if u_max is not None:
        over = (np.abs(U) > u_max).any(axis=1)
        feasible &= ~over
        U = np.clip(U, -u_max, u_max)
    return U, feasible


def min_norm_control(a, b, u_max: Optional[float] = None):
    """Smallest-norm ``u`` with ``a . u >= b``.

    Returns ``(u, feasible)``.  ``b <= 0`` gives ``u = 0``; ``a = 0`` with
    ``b > 0`` is infeasible; with a box bound, a projection outside the box
    is clipped and reported infeasible.
    """
    A = np.asarray(a, dtype=float)
    single = A.ndim == 1
    A = A.reshape(1, -1) if single else A
    B = np.asarray(b, dtype=float).reshape(-1)
    if not (np.isfinite(A).all() and np.isfinite(B).all()):
        raise ValueError("constraint coefficients must be finite")
    U, feasible = _min_norm_batch(A, B, u_max)
    if single:
        return U[0], bool(feasible[0])
    return U, feasible


@dataclass(frozen=True)
class ControllerSpec:
    kind: str = "none"
    alpha3: Optional[AlphaFn] = None
    u_max: Optional[float] = None

    def __post_init__(self):
        if self.kind not in CONTROLLER_KINDS:
            raise ValueError(f"unknown controller kind {self.kind!r}; expected one of {CONTROLLER_KINDS}")
        if self.kind in ("modified_zcbf", "rcbf") and self.alpha3 is None:
            raise ValueError(f"controller kind {self.kind!r} needs alpha3")
        if self.u_max is not None and not self.u_max > 0:
            raise ValueError("u_max must be positive")


class BarrierController:
    """Min-norm controller enforcing one barrier condition at the current state.

    Callable on a single state (returns ``(u, feasible)``) or a batch
    (returns arrays).  The margin is affine in ``u``; the constraint row is
    its ``u``-coefficient and the bound is minus its value at ``u = 0``.
    """

    def __init__(self, spec: ControllerSpec, barrier: BarrierSpec, model: SdeModel):
        self.spec = spec
        self.barrier = barrier
        self.model = model
        self.reciprocal = (
            ReciprocalSpec(barrier, AlphaFn.identity(), AlphaFn.identity(), spec.alpha3)
            if spec.kind == "rcbf"
            else None
        )

    def constraint(self, X):
        """Return ``(A, b)`` such that the condition reads ``A u >= b`` row-wise."""
        kind = self.spec.kind
        if kind == "zcbf":
            c0 = zcbf_margin(self.barrier, self.model, X)
        elif kind == "modified_zcbf":
            c0 = modified_zcbf_margin(self.barrier, self.model, X, None, self.spec.alpha3)
        else:
            c0 = rcbf_margin(self.reciprocal, self.model, X)
        _, G, _ = self.model.evaluate(X)
        grad = np.asarray(self.barrier.grad(X), dtype=float)
        A = np.einsum("ni,nij->nj", grad, G)
        if kind == "rcbf":
            h = np.asarray(self.barrier.h(X), dtype=float)
            A = A / h[:, None] ** 2
        return A, -c0

    def __call__(self, x):
        X, single = as_batch(x, self.model.dim_x)
        n = X.shape[0]
        if self.spec.kind == "none":
            U, feasible = np.zeros((n, self.model.dim_u)), np.ones(n, dtype=bool)
        else:
            A, b = self.constraint(X)
            b = b + BOUND_SLACK * np.abs(b)
            U, feasible = _min_norm_batch(A, b, self.spec.u_max)
        if single:
            return U[0], bool(feasible[0])
        return U, feasible

    def margin(self, x, u):
        kind = self.spec.kind
        if kind == "zcbf":
            return zcbf_margin(self.barrier, self.model, x, u)
        if kind == "modified_zcbf":
            return modified_zcbf_margin(self.barrier, self.model, x, u, self.spec.alpha3)
        if kind == "rcbf":
            return rcbf_margin(self.reciprocal, self.model, x, u)
        raise ValueError("the uncontrolled policy has no margin")


def make_controller(spec: ControllerSpec, barrier: BarrierSpec, model: SdeModel) -> BarrierController:
    """Build the min-norm controller for ``spec.kind`` on ``(barrier, model)``."""
    if barrier.dim_x != model.dim_x:
        raise ValueError("barrier and model state dimensions differ")
    if spec.kind != "none" and model.dim_u == 0:
        raise ValueError(f"controller {spec.kind!r} needs a model with controls")
    return BarrierController(spec, barrier, model)
