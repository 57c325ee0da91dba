import numpy as np
import pytest

from barrierlab.sde import SdeModel


def scalar_model(f=None, g=0.0, sigma=1.0, name="scalar"):
    """Scalar control-affine model; ``f`` is a function of x (or None), ``g``/``sigma`` constants or functions."""

    def drift(X):
        return np.zeros_like(X) if f is None else f(X)

    def ctrl(X):
        v = g(X) if callable(g) else np.full_like(X, float(g))
        return v.reshape(-1, 1, 1)

    def diff(X):
        v = sigma(X) if callable(sigma) else np.full_like(X, float(sigma))
        return v.reshape(-1, 1, 1)

    return SdeModel(dim_x=1, dim_u=1, dim_w=1, drift=drift, control_matrix=ctrl, diffusion=diff, name=name)


@pytest.fixture
def make_scalar():
    return scalar_model


# -- acceptance reporting -------------------------------------------------------------

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line; call as ``criterion(label, ok, detail)`` before asserting."""

    def record(label: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  criterion {label}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
