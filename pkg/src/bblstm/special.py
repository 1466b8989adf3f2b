"""Special functions for Gamma sampling, pathwise gradients and Gamma KL.

Everything here runs in float64.  The numerical kernels are scalar functions
compiled with numba and exposed as ufuncs (``*_array``), so the samplers and
tape nodes get per-element early exit instead of masked whole-array
iteration.  The plain-named functions (``log_gamma``, ``digamma``, ...) are
the checked scalar entry points and raise :class:`DomainError` /
:class:`ConvergenceError`.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, vectorize

from .errors import ConvergenceError, DomainError

MAX_ITER = 500
TOL = 1e-14
_FPMIN = 1e-300
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_SHIFT = 10.0

# -- log-gamma / digamma / trigamma ----------------------------------------
#
# Shift the argument above _SHIFT with the recurrence, then use the
# Stirling / Bernoulli asymptotic expansion.  At x >= 10 the first omitted
# term is below 1e-16 relative.


@njit(cache=True)
def _lgamma(x):
    # x (x+1) ... stays far from overflow for at most 10 factors, so one log suffices
    prod = 1.0
    while x < _SHIFT:
        prod *= x
        x += 1.0
    shift = math.log(prod)
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv * (
        1.0 / 12.0
        - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 * (1.0 / 1680.0 - inv2 / 1188.0)))
    )
    return (x - 0.5) * math.log(x) - x + _HALF_LOG_2PI + series - shift


@njit(cache=True)
def _digamma(x):
    acc = 0.0
    while x < _SHIFT:
        acc -= 1.0 / x
        x += 1.0
    inv2 = 1.0 / (x * x)
    tail = inv2 * (
        1.0 / 12.0
        - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 / 132.0)))
    )
    return acc + math.log(x) - 0.5 / x - tail


@njit(cache=True)
def _lgamma_digamma(x):
    """(ln Gamma(x), psi(x)) sharing one shift loop."""
    prod = 1.0
    acc = 0.0
    while x < _SHIFT:
        prod *= x
        acc -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv * (
        1.0 / 12.0
        - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 * (1.0 / 1680.0 - inv2 / 1188.0)))
    )
    tail = inv2 * (
        1.0 / 12.0
        - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 / 132.0)))
    )
    logx = math.log(x)
    lg = (x - 0.5) * logx - x + _HALF_LOG_2PI + series - math.log(prod)
    return lg, acc + logx - 0.5 * inv - tail


@njit(cache=True)
def _trigamma(x):
    acc = 0.0
    while x < _SHIFT:
        acc += 1.0 / (x * x)
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    tail = inv * (
        1.0
        + inv * (0.5 + inv * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0)))))
    )
    return acc + tail


# -- regularized lower incomplete gamma and its shape derivative -----------


@njit(cache=True)
def _series_sums(a, x):
    """x < a + 1.

    P = pref * S, pref = x^a e^-x / Gamma(a+1), S = sum_n x^n / ((a+1)...(a+n)).
    Differentiating each term through the same recurrence gives
    dP/da = pref * ((ln x - psi(a+1)) S + S').  Returns (P, pref, bracket)
    with bracket = (ln x - psi(a+1)) S + S'; NaNs signal non-convergence.
    This kernel returns (S, S'); ``_series`` adds the prefactor.
    """
    term = 1.0
    dterm = 0.0
    total = 1.0
    dtotal = 0.0
    converged = False
    for n in range(1, MAX_ITER + 1):
        inv = 1.0 / (a + n)
        ratio = x * inv
        dterm = ratio * (dterm - term * inv)
        term *= ratio
        total += term
        dtotal += dterm
        if abs(term) <= TOL * abs(total) and abs(dterm) <= TOL * max(abs(dtotal), _FPMIN):
            converged = True
            break
    if not converged:
        return math.nan, math.nan
    return total, dtotal


@njit(cache=True)
def _series(a, x):
    total, dtotal = _series_sums(a, x)
    logx = math.log(x)
    pref = math.exp(a * logx - x - _lgamma(a + 1.0))
    bracket = (logx - _digamma(a + 1.0)) * total + dtotal
    return pref * total, pref, bracket


@njit(cache=True)
def _fraction_sums(a, x):
    """x >= a + 1, for Q = 1 - P.

    Modified Lentz with the shape derivative of each recurrence quantity
    carried alongside (d b_i/da = -1, d an_i/da = i).  Q = pref * h with
    pref = x^a e^-x / Gamma(a), so dQ/da = pref * ((ln x - psi(a)) h + h').
    Returns (P, pref, bracket) with bracket = (ln x - psi(a)) h + h'.
    This kernel returns (h, h'); ``_continued_fraction`` adds the prefactor.
    """
    b = x + 1.0 - a
    c = 1.0 / _FPMIN
    dc = 0.0
    d = 1.0 / b
    dd = 1.0 / (b * b)
    h = d
    dh = dd
    converged = False
    for i in range(1, MAX_ITER + 1):
        an = -i * (i - a)
        b += 2.0
        denom = an * d + b
        ddenom = i * d + an * dd - 1.0
        if abs(denom) < _FPMIN:
            denom = _FPMIN
        d = 1.0 / denom
        dd = -ddenom * d * d
        c_new = b + an / c
        dc = -1.0 + i / c - an * (dc / c) / c
        c = c_new if abs(c_new) >= _FPMIN else _FPMIN
        delta = d * c
        dh_new = dh * delta + h * (dd * c + d * dc)
        h *= delta
        step = abs(dh_new - dh)
        dh = dh_new
        if abs(delta - 1.0) <= TOL and step <= TOL * max(abs(dh), _FPMIN):
            converged = True
            break
    if not converged:
        return math.nan, math.nan
    return h, dh


@njit(cache=True)
def _continued_fraction(a, x):
    h, dh = _fraction_sums(a, x)
    logx = math.log(x)
    pref = math.exp(a * logx - x - _lgamma(a))
    bracket = (logx - _digamma(a)) * h + dh
    return 1.0 - pref * h, pref, bracket


@njit(cache=True)
def _lower_gamma(a, x):
    """(P, dP/da, -dP/da / pdf) at a single point."""
    if x == 0.0:
        return 0.0, 0.0, 0.0
    if x < a + 1.0:
        p, pref, bracket = _series(a, x)
        # pref / pdf = x / a
        return min(max(p, 0.0), 1.0), pref * bracket, -(x / a) * bracket
    p, pref, bracket = _continued_fraction(a, x)
    # pref / pdf = x
    return min(max(p, 0.0), 1.0), -pref * bracket, x * bracket


@njit(cache=True)
def _upper_tail(a, x):
    if x == 0.0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _series(a, x)[0]
    b = x + 1.0 - a
    c = 1.0 / _FPMIN
    d = 1.0 / b
    h = d
    for i in range(1, MAX_ITER + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = b + an / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) <= TOL:
            return math.exp(a * math.log(x) - x - _lgamma(a)) * h
    return math.nan


@njit(cache=True)
def _inverse_cdf(a, prob, upper):
    """x with P(a, x) = prob (or Q(a, x) = prob when ``upper``).

    Newton in y = ln x, safeguarded by a bracket that falls back to bisection.
    """
    if prob <= 0.0:
        return math.inf if upper else 0.0
    if prob >= 1.0:
        return 0.0 if upper else math.inf
    lo = -700.0
    hi = math.log(a + 50.0 + 50.0 * math.sqrt(a))
    # widen hi until it brackets the target
    for _ in range(100):
        xh = math.exp(hi)
        f_hi = (prob - _upper_tail(a, xh)) if upper else (_series(a, xh)[0] if xh < a + 1.0 else 1.0 - _upper_tail(a, xh)) - prob
        if f_hi >= 0.0:
            break
        hi += 1.0
    if upper:
        guess = math.log(a) if a > 1e-300 else lo
    else:
        small = (prob * math.exp(_lgamma(a + 1.0))) ** (1.0 / a)
        guess = math.log(small) if small < 0.5 * a else math.log(a)
    y = min(max(guess, lo), hi)
    for _ in range(200):
        x = math.exp(y)
        if upper:
            f = prob - _upper_tail(a, x)
        else:
            f = (_series(a, x)[0] if x < a + 1.0 else 1.0 - _upper_tail(a, x)) - prob
        if f > 0.0:
            hi = y
        else:
            lo = y
        slope = math.exp(a * y - x - _lgamma(a))  # pdf(x) * x = dP/dy
        step = f / slope if slope > 0.0 else math.inf
        y_new = y - step
        if not (lo < y_new < hi):
            y_new = 0.5 * (lo + hi)
        if abs(y_new - y) <= 1e-15 * max(1.0, abs(y)) or hi - lo <= 1e-15 * max(1.0, abs(y)):
            return math.exp(y_new)
        y = y_new
    return math.exp(y)


@vectorize(["float64(float64, float64, boolean)"], cache=True)
def gamma_inverse_cdf_array(a, prob, upper):
    return _inverse_cdf(a, prob, upper)


@vectorize(["float64(float64, float64)"], cache=True)
def reg_upper_gamma_array(a, x):
    return _upper_tail(a, x)


@vectorize(["float64(float64)"], cache=True)
def log_gamma_array(x):
    return _lgamma(x)


@vectorize(["float64(float64)"], cache=True)
def digamma_array(x):
    return _digamma(x)


@vectorize(["float64(float64)"], cache=True)
def trigamma_array(x):
    return _trigamma(x)


@vectorize(["float64(float64, float64)"], cache=True)
def _reg_lower_gamma_ufunc(a, x):
    return _lower_gamma(a, x)[0]


@vectorize(["float64(float64, float64)"], cache=True)
def _d_reg_lower_gamma_da_ufunc(a, x):
    return _lower_gamma(a, x)[1]


@vectorize(["float64(float64, float64)"], cache=True)
def _quantile_shape_derivative_ufunc(a, x):
    return _lower_gamma(a, x)[2]


@vectorize(["float64(float64, float64, float64)"], cache=True)
def _guarded_quantile_shape_derivative_ufunc(a, x, log_pdf_floor):
    # +inf flags a density below the floor; NaN flags non-convergence
    lg, dg = _lgamma_digamma(a)
    logx = math.log(x) if x > 0.0 else -math.inf
    if (a - 1.0) * logx - x - lg < log_pdf_floor:
        return math.inf
    if x == 0.0:
        return 0.0
    if x < a + 1.0:
        total, dtotal = _series_sums(a, x)
        # psi(a + 1) = psi(a) + 1/a
        return -(x / a) * ((logx - dg - 1.0 / a) * total + dtotal)
    h, dh = _fraction_sums(a, x)
    return x * ((logx - dg) * h + dh)


def _converged(out, a, x):
    if np.isnan(out).any():
        bad = np.isnan(np.asarray(out))
        a_b, x_b = np.broadcast_arrays(a, x)
        raise ConvergenceError(
            f"incomplete gamma did not converge in {MAX_ITER} iterations "
            f"(a={np.asarray(a_b)[bad][:3]}, x={np.asarray(x_b)[bad][:3]})"
        )
    return out


def reg_lower_gamma_array(a, x):
    return _converged(_reg_lower_gamma_ufunc(a, x), a, x)


def d_reg_lower_gamma_da_array(a, x):
    return _converged(_d_reg_lower_gamma_da_ufunc(a, x), a, x)


def gamma_quantile_shape_derivative_array(a, x):
    """-(dP/da) / pdf(a, x), with the density cancelled analytically.

    In the series branch pref/pdf = x/a and in the continued-fraction branch
    pref/pdf = x, so nothing underflows even far in the tails.
    """
    return _converged(_quantile_shape_derivative_ufunc(a, x), a, x)


def guarded_quantile_shape_derivative_array(a, x, log_pdf_floor: float):
    """As above, but returns +inf wherever log pdf(a, x) < ``log_pdf_floor``."""
    return _converged(_guarded_quantile_shape_derivative_ufunc(a, x, log_pdf_floor), a, x)


def log_gamma_pdf_array(a, x):
    a = np.asarray(a, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    return (a - 1.0) * np.log(x) - x - log_gamma_array(a)


# -- checked scalar entry points ---------------------------------------------


def _positive(name: str, v: float) -> float:
    v = float(v)
    if not (v > 0 and math.isfinite(v)):
        raise DomainError(f"{name} must be finite and > 0, got {v!r}")
    return v


def _nonnegative(name: str, v: float) -> float:
    v = float(v)
    if not (v >= 0 and math.isfinite(v)):
        raise DomainError(f"{name} must be finite and >= 0, got {v!r}")
    return v


def log_gamma(x: float) -> float:
    """Natural log of the Gamma function for ``x > 0``."""
    return float(_lgamma(_positive("x", x)))


def digamma(x: float) -> float:
    """psi(x) = d/dx ln Gamma(x) for ``x > 0``."""
    return float(_digamma(_positive("x", x)))


def trigamma(x: float) -> float:
    return float(_trigamma(_positive("x", x)))


def reg_lower_gamma(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x), i.e. the Gamma(a, 1) CDF.

    Series for ``x < a + 1``, continued fraction otherwise.
    """
    a = _positive("a", a)
    x = _nonnegative("x", x)
    return float(reg_lower_gamma_array(a, x))


def d_reg_lower_gamma_da(a: float, x: float) -> float:
    """Partial derivative of P(a, x) with respect to the shape ``a``."""
    a = _positive("a", a)
    x = _nonnegative("x", x)
    return float(d_reg_lower_gamma_da_array(a, x))


def gamma_pdf(a: float, x: float) -> float:
    """Density of Gamma(shape=a, rate=1) at x, evaluated in log space."""
    a = _positive("a", a)
    x = _positive("x", x)
    return math.exp((a - 1.0) * math.log(x) - x - _lgamma(a))
