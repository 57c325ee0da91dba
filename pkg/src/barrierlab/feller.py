"""Feller boundary classification for power-law drift/diffusion ratios.

A scalar diffusion ``dh = mu dt + sigma dW`` on ``(0, inf)`` whose ratio
``mu / sigma^2 = gamma h^-p`` is classified from the limits of its scale
function

    s(x) = int_c^x exp(-2 int_c^y mu(z)/sigma(z)^2 dz) dy

at ``0`` and ``inf``:

=========================  ==================================  ==================
(s(0), s(inf))             tag                                 Pr(T < inf)
=========================  ==================================  ==================
(-inf, finite)             ``strictly_positive``               zero
(finite, finite)           ``hits_zero_with_positive_prob``    positive (sigma>=c)
(-inf, +inf)               ``null_recurrent_boundary``         zero
(finite, +inf)             ``unclassified``                    unknown
=========================  ==================================  ==================

Note the ratio uses ``sigma^2``; writing ``mu/sigma`` inside the scale
function is a common typo and gives the wrong test.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
from scipy import integrate

__all__ = [
    "QuadratureError",
    "FellerConsistencyError",
    "RatioSpec",
    "ScaleLimits",
    "Verdict",
    "FellerClassification",
    "upper_incomplete_gamma",
    "scale_function_numeric",
    "scale_function_closed_form",
    "scale_limits",
    "scale_limits_numeric",
    "speed_function_numeric",
    "classify_boundary",
    "CASE_TAGS",
]

CASE_TAGS = (
    "strictly_positive",
    "hits_zero_with_positive_prob",
    "null_recurrent_boundary",
    "unclassified",
)

_EPS = 1e-16
_TINY = 1e-300


class QuadratureError(ArithmeticError):
    """Adaptive quadrature did not reach the requested tolerance."""

    def __init__(self, what: str, value: float, abserr: float, detail: str = ""):
        self.value = value
        self.abserr = abserr
        msg = f"{what}: quadrature did not converge (value={value!r}, achieved abserr={abserr:.3g})"
        super().__init__(msg + (f"; {detail}" if detail else ""))


class FellerConsistencyError(ArithmeticError):
    """Numeric and analytic scale functions disagree."""


# ----------------------------------------------------------------------------
# incomplete gamma


def _gamma_series(a: float, x: float) -> float:
    """Regularised lower P(a, x) by its power series (good for x < a + 1)."""
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    else:
        raise ArithmeticError(f"incomplete gamma series did not converge for a={a}, x={x}")
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _log_gamma_cf(a: float, x: float) -> float:
    """log Gamma(a, x) by the modified Lentz continued fraction (x >= a + 1)."""
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    else:
        raise ArithmeticError(f"incomplete gamma continued fraction did not converge for a={a}, x={x}")
    return -x + a * math.log(x) + math.log(h)


def upper_incomplete_gamma(a: float, x: float) -> float:
    """``Gamma(a, x) = int_x^inf t^(a-1) e^-t dt`` for ``a > 0``, ``x >= 0``.

    Series for ``x < a + 1``, continued fraction otherwise.  Underflows to
    0.0 when the result is below the smallest double.
    """
    if not a > 0:
        raise ValueError(f"upper incomplete gamma needs a > 0, got {a}")
    if not x >= 0:
        raise ValueError(f"upper incomplete gamma needs x >= 0, got {x}")
    if math.isinf(x):
        return 0.0
    if x == 0.0:
        return math.gamma(a)
    if x < a + 1.0:
        return math.gamma(a) * (1.0 - _gamma_series(a, x))
    lg = _log_gamma_cf(a, x)
    return math.exp(lg) if lg > -745.0 else 0.0


# ----------------------------------------------------------------------------
# scale and speed functions


@dataclass(frozen=True)
class RatioSpec:
    """Power-law ratio ``mu / sigma^2 = gamma h^-p`` with reference point ``c``."""

    gamma: float
    p: float
    sigma_lower_bounded: bool = True
    c: float = 1.0

    def __post_init__(self):
        if not (self.gamma >= 0 and math.isfinite(self.gamma)):
            raise ValueError(f"gamma must be a non-negative real, got {self.gamma}")
        if not (self.p >= 0 and math.isfinite(self.p)):
            raise ValueError(f"p must be a non-negative real, got {self.p}")
        if not (self.c > 0 and math.isfinite(self.c)):
            raise ValueError(f"c must be positive, got {self.c}")

    def ratio(self, z: float) -> float:
        return self.gamma * z ** (-self.p)


def _quad(fn, lo, hi, what, epsrel=1e-12, epsabs=0.0, limit=400):
    if lo == hi:
        return 0.0
    val, err, info = integrate.quad(fn, lo, hi, epsabs=epsabs, epsrel=epsrel, limit=limit, full_output=1)[:3]
    if not math.isfinite(val):
        return val
    # roundoff warnings (ier=2) are acceptable if the error estimate is small
    if err > max(epsabs, 1e-8 * abs(val)) and err > 1e-12:
        raise QuadratureError(what, val, err)
    return val


def _eta(spec: RatioSpec, y: float) -> float:
    """``int_c^y ratio(z) dz`` by quadrature in ``log z``."""
    if spec.gamma == 0.0:
        return 0.0
    lc, ly = math.log(spec.c), math.log(y)
    q = 1.0 - spec.p
    return _quad(lambda t: spec.gamma * math.exp(q * t), lc, ly, "inner scale integral", epsrel=1e-13)


def _scale_density(spec: RatioSpec, y: float) -> float:
    """``s'(y) = exp(-2 eta(y))``; may overflow to inf."""
    e = -2.0 * _eta(spec, y)
    return math.exp(e) if e < 709.0 else math.inf


def scale_function_numeric(spec: RatioSpec, x: float) -> float:
    """Scale function ``s(x)`` by nested adaptive quadrature.

    Both integrals are taken in ``log`` coordinates, which removes the
    ``z^-p`` endpoint behaviour near 0.  Returns ``-inf``/``+inf`` if the
    integrand overflows.
    """
    if not x > 0:
        raise ValueError(f"scale function needs x > 0, got {x}")
    lc, lx = math.log(spec.c), math.log(x)

    def integrand(t):
        e = -2.0 * _eta(spec, math.exp(t)) + t
        return math.exp(e) if e < 709.0 else math.inf

    with np.errstate(over="ignore"):
        try:
            val = _quad(integrand, lc, lx, "scale function")
        except OverflowError:
            val = math.inf if x > spec.c else -math.inf
    if math.isnan(val):
        val = math.inf if x > spec.c else -math.inf
    return val


def _log_abs_power_diff(a: float, x: float, c: float) -> float:
    """``log |x^a - c^a|`` without overflow."""
    A, C = a * math.log(x), a * math.log(c)
    hi, lo = max(A, C), min(A, C)
    if hi == lo:
        return -math.inf
    return hi + math.log1p(-math.exp(lo - hi))


def _case3_closed_form(gamma: float, eps: float, c: float, x: float) -> float:
    """Scale function for ``p = 1 + eps > 1`` via the termwise-integrated exponential series."""
    r = 2.0 * gamma / eps
    sign = 1.0 if x > c else -1.0
    if x == c:
        return 0.0
    if x < c:
        # Laplace estimate e^E(x) / |E'(x)| of the integral near x; skip the
        # (very long) series when the answer overflows anyway
        e_x = r * (x ** (-eps) - c ** (-eps))
        if e_x - math.log(r * eps) + (1.0 + eps) * math.log(x) > 720.0:
            return -math.inf
    log_r = math.log(r)
    acc = -math.inf
    n = 0
    while True:
        a = 1.0 - n * eps
        if abs(a) < 1e-12:
            log_i = math.log(abs(math.log(x / c)))
        else:
            log_i = _log_abs_power_diff(a, x, c) - math.log(abs(a))
        log_t = n * log_r - math.lgamma(n + 1.0) + log_i
        acc = np.logaddexp(acc, log_t)
        # terms eventually decay factorially; stop once negligible
        if n > r * max(x, c) ** (-eps) + 10 and log_t < acc - 40.0:
            break
        n += 1
        if n > 100_000:
            raise ArithmeticError("case-3 series did not converge")
    log_s = acc - r * c ** (-eps)
    if log_s > 709.0:
        return sign * math.inf
    return sign * math.exp(log_s)


def scale_function_closed_form(spec: RatioSpec, x: float) -> float:
    """Scale function from the analytic expressions for each ``p`` regime.

    * ``gamma = 0``: ``x - c``
    * ``p = 1``: ``(c - c^(2 gamma) x^(1 - 2 gamma)) / (2 gamma - 1)`` (``c log(x/c)`` at gamma = 1/2)
    * ``p < 1``: incomplete-gamma form with ``q = 1 - p`` and ``t(y) = 2 gamma y^q / q``:
      ``e^t(c) q^-1 (q / 2 gamma)^(1/q) [Gamma(1/q, t(c)) - Gamma(1/q, t(x))]``
    * ``p > 1``: series in ``r = 2 gamma / eps`` with ``eps = p - 1``
    """
    if not x > 0:
        raise ValueError(f"scale function needs x > 0, got {x}")
    g, p, c = spec.gamma, spec.p, spec.c
    if g == 0.0:
        return x - c
    if p == 1.0:
        if g == 0.5:
            return c * math.log(x / c)
        k = 2.0 * g - 1.0
        return (c - c ** (2.0 * g) * x ** (-k)) / k
    if p < 1.0:
        q = 1.0 - p
        a = 1.0 / q
        tc, tx = 2.0 * g * c**q / q, 2.0 * g * x**q / q
        pref = math.exp(tc) * (q / (2.0 * g)) ** a / q
        return pref * (upper_incomplete_gamma(a, tc) - upper_incomplete_gamma(a, tx))
    return _case3_closed_form(g, p - 1.0, c, x)


@dataclass(frozen=True)
class ScaleLimits:
    s_at_zero: float
    s_at_inf: float

    def as_tuple(self) -> tuple[float, float]:
        return self.s_at_zero, self.s_at_inf


_PROBE_ZERO = 1e-6
_PROBE_INF = 1e6


def _analytic_limits(spec: RatioSpec) -> ScaleLimits:
    g, p, c = spec.gamma, spec.p, spec.c
    if g == 0.0:
        return ScaleLimits(-c, math.inf)
    if p == 1.0:
        if g > 0.5:
            return ScaleLimits(-math.inf, c / (2.0 * g - 1.0))
        if g == 0.5:
            return ScaleLimits(-math.inf, math.inf)
        return ScaleLimits(c / (2.0 * g - 1.0), math.inf)
    if p < 1.0:
        q = 1.0 - p
        a = 1.0 / q
        tc = 2.0 * g * c**q / q
        pref = math.exp(tc) * (q / (2.0 * g)) ** a / q
        upper = upper_incomplete_gamma(a, tc)
        return ScaleLimits(pref * (upper - math.gamma(a)), pref * upper)
    return ScaleLimits(-math.inf, math.inf)


def _consistent(numeric: float, analytic: float, limit: float, side: str) -> bool:
    if math.isinf(analytic) or math.isinf(numeric):
        # overflow is only acceptable on a divergent side, with matching sign
        return math.isinf(limit) and np.sign(numeric) == np.sign(analytic) and abs(numeric) > 1e300
    if abs(numeric - analytic) > 1e-6 * max(1.0, abs(analytic)):
        return False
    # s is increasing, so probes must not pass a finite limit
    if math.isfinite(limit):
        slack = 1e-9 * max(1.0, abs(limit))
        return numeric >= limit - slack if side == "zero" else numeric <= limit + slack
    return True


def scale_limits(spec: RatioSpec, cross_check: bool = True) -> ScaleLimits:
    """Analytic ``(s(0+), s(inf))``, optionally cross-checked by quadrature.

    The cross-check evaluates the numeric scale function at ``x = 1e-6`` and
    ``x = 1e6`` and compares it with the closed form at the same points and
    against monotonicity toward finite limits.
    """
    lim = _analytic_limits(spec)
    if cross_check:
        for side, x, limit in (("zero", _PROBE_ZERO, lim.s_at_zero), ("inf", _PROBE_INF, lim.s_at_inf)):
            num = scale_function_numeric(spec, x)
            ana = scale_function_closed_form(spec, x)
            if not _consistent(num, ana, limit, side):
                raise FellerConsistencyError(
                    f"scale function at x={x:g}: numeric {num!r} vs closed form {ana!r} (limit {limit!r})"
                )
    return lim


def scale_limits_numeric(spec: RatioSpec, max_segments: int = 1000, blowup: float = 1e12) -> ScaleLimits:
    """Scale-function limits from the integrals alone, by geometric refinement.

    Segments ``[c 2^k, c 2^(k+1)]`` (toward infinity) or ``[c 2^-(k+1), c 2^-k]``
    (toward zero) are integrated one at a time.  A side is declared infinite
    when the partial integral exceeds ``blowup``, the integrand overflows, or
    the increments stop decaying; it is finite once the increments decay
    geometrically below round-off, the tail being summed as a geometric series.
    """
    out = []
    for direction in (-1, 1):
        total = 0.0
        eta = 0.0
        x = spec.c
        prev_inc = None
        flat = 0
        result = None
        for _ in range(max_segments):
            x_next = x * 2.0**direction
            lo, hi = (x_next, x) if direction < 0 else (x, x_next)
            d_eta = _quad(lambda t: spec.gamma * math.exp((1.0 - spec.p) * t), math.log(x), math.log(x_next),
                          "inner scale integral", epsrel=1e-13) if spec.gamma else 0.0
            base = eta

            def integrand(t, base=base, x0=x):
                e_local = _quad(lambda z: spec.gamma * math.exp((1.0 - spec.p) * z), math.log(x0), t,
                                "inner scale integral", epsrel=1e-13) if spec.gamma else 0.0
                e = -2.0 * (base + e_local) + t
                return math.exp(e) if e < 709.0 else math.inf

            inc = _quad(integrand, math.log(lo), math.log(hi), "scale increment", epsrel=1e-10)
            eta += d_eta
            if not math.isfinite(inc):
                result = math.inf
                break
            total += inc
            if total > blowup:
                result = math.inf
                break
            if prev_inc is not None and prev_inc > 0:
                ratio = inc / prev_inc
                flat = flat + 1 if ratio >= 1.0 - 1e-6 else 0
                if flat >= 30:
                    result = math.inf
                    break
                if ratio < 1.0 - 1e-6 and inc <= 1e-16 * total:
                    result = total + inc * ratio / (1.0 - ratio)
                    break
            elif inc == 0.0 and prev_inc == 0.0:
                result = total
                break
            prev_inc = inc
            x = x_next
        if result is None:
            # ran out of segments with still-decaying increments: slowly convergent
            result = total + (prev_inc or 0.0) * ratio / (1.0 - ratio) if prev_inc and ratio < 1.0 else math.inf
        out.append(-result if direction < 0 else result)
    return ScaleLimits(out[0], out[1])


def speed_function_numeric(spec: RatioSpec, sigma_profile: Callable[[float], float], x: float) -> float:
    """Speed function ``v(x) = int_c^x s'(y) int_c^y 2 / (s'(z) sigma(z)^2) dz dy``.

    ``sigma_profile`` is the diffusion coefficient as a function of the level
    and must stay positive on the integration range.
    """
    if not x > 0:
        raise ValueError(f"speed function needs x > 0, got {x}")
    c = spec.c
    if x == c:
        return 0.0

    def inner(y):
        def f(z):
            sz = sigma_profile(z)
            if not sz > 0:
                raise ValueError(f"sigma_profile must be positive, got {sz} at z={z}")
            return 2.0 / (_scale_density(spec, z) * sz * sz)

        return _quad(f, c, y, "speed function (inner)", epsrel=1e-10)

    return _quad(lambda y: _scale_density(spec, y) * inner(y), c, x, "speed function", epsrel=1e-9)


# ----------------------------------------------------------------------------
# classification


@dataclass(frozen=True)
class Verdict:
    prob_inf_positive: str
    prob_T_finite: str


@dataclass(frozen=True)
class FellerClassification:
    s_at_zero: float
    s_at_inf: float
    case_tag: str
    verdict: Verdict
    prob_hit_zero: Optional[float] = None
    note: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("s_at_zero", "s_at_inf"):
            v = d[k]
            d[k] = v if math.isfinite(v) else ("inf" if v > 0 else "-inf")
        return d


_CASE3_NOTE = (
    "s(0)=-inf and s(inf)=+inf: T is infinite a.s. but the infimum of the process is 0 a.s.; "
    "statements claiming Pr(inf h > 0) = 1 for this regime conflict with the Feller case analysis"
)


def classify_boundary(spec: RatioSpec, x0: Optional[float] = None, cross_check: bool = True) -> FellerClassification:
    """Feller classification of the boundary at 0 for the ratio family.

    When ``x0`` is given and both limits are finite, ``prob_hit_zero`` is the
    exit probability ``(s(inf) - s(x0)) / (s(inf) - s(0))``.
    """
    lim = scale_limits(spec, cross_check=cross_check)
    s0, sinf = lim.as_tuple()
    if s0 == -math.inf and math.isfinite(sinf):
        return FellerClassification(s0, sinf, "strictly_positive", Verdict("one", "zero"))
    if math.isfinite(s0) and math.isfinite(sinf):
        prob = None
        if x0 is not None:
            sx = scale_function_closed_form(spec, x0)
            prob = (sinf - sx) / (sinf - s0)
        t_finite = "positive" if spec.sigma_lower_bounded else "unknown"
        return FellerClassification(
            s0, sinf, "hits_zero_with_positive_prob", Verdict("unknown", t_finite), prob,
            note="exit to 0 has probability strictly between 0 and 1",
        )
    if s0 == -math.inf and sinf == math.inf:
        return FellerClassification(s0, sinf, "null_recurrent_boundary", Verdict("zero", "zero"), note=_CASE3_NOTE)
    return FellerClassification(
        s0, sinf, "unclassified", Verdict("unknown", "unknown"),
        note="limits fall outside the three Feller cases",
    )
