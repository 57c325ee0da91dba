"""Named plants used by the experiments.

All callables follow the batched convention of :class:`~barrierlab.sde.SdeModel`.
"""

from __future__ import annotations

import numpy as np

from .barrier import BarrierSpec, ball_barrier, linear_barrier
from .sde import SdeModel

__all__ = [
    "brownian",
    "frozen",
    "single_integrator",
    "h_process",
    "MODELS",
    "BARRIERS",
    "halfline",
]


def _const_diffusion(sigma: float, dim: int = 1):
    mat = sigma * np.eye(dim)
    return lambda X: np.broadcast_to(mat, (X.shape[0], dim, dim))


def _zeros(dim: int):
    return lambda X: np.broadcast_to(0.0, (X.shape[0], dim))


def brownian(sigma: float = 1.0) -> SdeModel:
    """``dx = sigma dW``, uncontrolled (``g = 0`` with one control channel)."""
    return SdeModel(
        dim_x=1,
        dim_u=1,
        dim_w=1,
        drift=_zeros(1),
        control_matrix=lambda X: np.broadcast_to(0.0, (X.shape[0], 1, 1)),
        diffusion=_const_diffusion(sigma),
        name="brownian",
    )


def frozen() -> SdeModel:
    """``dx = 0``: no drift, no control authority, no noise."""
    return SdeModel(
        dim_x=1,
        dim_u=1,
        dim_w=1,
        drift=_zeros(1),
        control_matrix=lambda X: np.broadcast_to(0.0, (X.shape[0], 1, 1)),
        diffusion=lambda X: np.broadcast_to(0.0, (X.shape[0], 1, 1)),
        name="frozen",
    )


def single_integrator(sigma: float = 1.0, dim: int = 1) -> SdeModel:
    """``dx = u dt + sigma dW`` in ``dim`` dimensions."""
    eye = np.eye(dim)
    return SdeModel(
        dim_x=dim,
        dim_u=dim,
        dim_w=dim,
        drift=_zeros(dim),
        control_matrix=lambda X: np.broadcast_to(eye, (X.shape[0], dim, dim)),
        diffusion=_const_diffusion(sigma, dim),
        name="single_integrator",
    )


def h_process(gamma: float, p: float, sigma: float = 1.0) -> SdeModel:
    """Scalar ``dh = gamma sigma^2 h^-p dt + sigma dW``, i.e. drift/diffusion^2 = gamma h^-p."""
    coef = gamma * sigma**2

    def drift(X):
        return coef * X ** (-p)

    return SdeModel(
        dim_x=1,
        dim_u=0,
        dim_w=1,
        drift=drift,
        diffusion=_const_diffusion(sigma),
        name=f"h_process(gamma={gamma}, p={p})",
    )


def halfline() -> BarrierSpec:
    """``h(x) = x`` on the real line."""
    return linear_barrier([1.0], 0.0, name="halfline")


MODELS = {
    "brownian": brownian,
    "frozen": frozen,
    "single_integrator": single_integrator,
    "h_process": h_process,
}

BARRIERS = {
    "halfline": halfline,
    "ball": ball_barrier,
}
