"""Two-parameter Mittag-Leffler function on the real line.

``E_{a,b}(z) = sum_n z**n / Gamma(a*n + b)`` is evaluated by whichever of the
following routes can certify a relative error of ``RTOL``:

* power series in double precision, accepted when the rounding bound of the
  (possibly cancelling) partial sums is small enough;
* the algebraic asymptotic expansion for large negative arguments, plus the
  exponentially small saddle contributions when ``a >= 1``;
* for ``0 < a < 1`` and negative arguments, the real-line integral
  representation of Gorenflo, Loutchko and Luchko, integrated adaptively;
* otherwise, or when the quadrature error estimate is too large, the power
  series in extended precision (mpmath).
"""

import math
import warnings

import mpmath
import numpy as np
from scipy import integrate, special

from .exceptions import AccuracyLossError, DomainError

RTOL = 1e-10

_EPS = np.finfo(float).eps
_SERIES_CHUNK = 64
_SERIES_MAX_TERMS = 20000


def _check_params(alpha, beta):
    if not (np.isfinite(alpha) and 0 < alpha <= 2):
        raise DomainError(f"alpha must lie in (0, 2], got {alpha!r}")
    if not (np.isfinite(beta) and beta > 0):
        raise DomainError(f"beta must be positive, got {beta!r}")


def _series(alpha, beta, z):
    """Power series with a running rounding-error bound.

    Returns ``(value, abs_error_bound)``; the bound is ``inf`` if the series
    did not converge within the term budget or overflowed.
    """
    logx = math.log(abs(z))
    negative = z < 0
    terms = []
    errs = []
    n0 = 0
    best = -np.inf
    while n0 < _SERIES_MAX_TERMS:
        n = np.arange(n0, n0 + _SERIES_CHUNK, dtype=float)
        lg = special.gammaln(alpha * n + beta)
        logt = n * logx - lg
        if logt.max() > 700.0:
            return math.inf, math.inf
        mag = np.exp(logt)
        sign = np.where((n % 2 == 1) & negative, -1.0, 1.0)
        terms.extend((sign * mag).tolist())
        # rounding of exp(logt) is governed by the size of the exponent
        errs.extend((mag * _EPS * (4.0 + np.abs(n * logx) + np.abs(lg))).tolist())
        best = max(best, logt.max())
        n0 += _SERIES_CHUNK
        # past the peak and negligible
        if logt[-1] < logt[-2] and logt[-1] < best - 45.0 and logt[-1] < -45.0:
            break
    else:
        return math.inf, math.inf
    value = math.fsum(terms)
    bound = math.fsum(errs) + _EPS * abs(value)
    return value, bound


def _asymptotic(alpha, beta, z):
    """Large-|z| expansion for negative z; returns ``(value, abs_error_bound)``.

    Coefficients ``1/Gamma(beta - alpha*k)`` oscillate through zeros, so the
    truncation test uses the envelope ``Gamma(alpha*k - beta + 1)/pi`` rather
    than the size of individual terms.
    """
    x = -z
    logx = math.log(x)
    total = 0.0
    bound = math.inf
    prev_env = math.inf
    for k in range(1, 400):
        c = float(special.rgamma(beta - alpha * k))
        y = alpha * k - beta
        env = abs(c)
        if y > -1.0:
            # |1/Gamma(-y)| <= Gamma(y + 1)/pi by reflection
            env = max(env, math.exp(special.gammaln(y + 1.0)) / math.pi)
        env *= math.exp(-k * logx)
        if total != 0.0 and env < 1e-3 * RTOL * abs(total):
            bound = env
            break
        if env > prev_env and k > 2:
            bound = prev_env
            break
        total += -((-1.0) ** k) * c * x ** (-k)
        prev_env = env
    value = total
    if alpha >= 1.0:
        value += _saddle_terms(alpha, beta, x)
    return value, bound


def _saddle_terms(alpha, beta, x):
    r = x ** (1.0 / alpha)
    out = 0.0
    for j in range(-2, 2):
        theta = math.pi + 2.0 * math.pi * j
        if abs(theta) > alpha * math.pi * (1 + 1e-15):
            continue
        weight = 0.5 if math.isclose(abs(theta), alpha * math.pi, rel_tol=1e-15) else 1.0
        phase = theta / alpha
        s = complex(r * math.cos(phase), r * math.sin(phase))
        term = s ** (1.0 - beta) * np.exp(s) / alpha
        out += weight * term.real
    return out


def _integrand(chi, alpha, beta, z):
    num = chi * math.sin(math.pi * (1 - beta)) - z * math.sin(math.pi * (1 - beta + alpha))
    den = chi * chi - 2.0 * chi * z * math.cos(alpha * math.pi) + z * z
    return chi ** ((1 - beta) / alpha) * math.exp(-chi ** (1.0 / alpha)) * num / den / (alpha * math.pi)


def _integral(alpha, beta, z):
    """Integral representation, valid for 0 < alpha < 1, z < 0."""
    if beta >= 1 + alpha:
        # E_{a,b}(z) = (E_{a,b-a}(z) - 1/Gamma(b-a)) / z
        inner, err = _integral(alpha, beta - alpha, z)
        return (inner - special.rgamma(beta - alpha)) / z, err / abs(z)
    x = -z
    kw = dict(args=(alpha, beta, z), epsabs=0.0, epsrel=1e-13, limit=400)
    with warnings.catch_warnings():
        # the returned error estimate is checked by the caller
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        v1, e1 = integrate.quad(_integrand, 0.0, x, **kw)
        v2, e2 = integrate.quad(_integrand, x, np.inf, **kw)
    return v1 + v2, e1 + e2


def _mp_series(alpha, beta, z):
    """Extended-precision power series; precision sized from the peak term."""
    x = abs(z)
    n = np.arange(0, _SERIES_MAX_TERMS, dtype=float)
    logt = n * math.log(x) - special.gammaln(alpha * n + beta)
    peak = logt.max()
    dps = int(peak / math.log(10)) + 30
    with mpmath.workdps(dps):
        zz = mpmath.mpf(z)
        a = mpmath.mpf(alpha)
        b = mpmath.mpf(beta)
        total = mpmath.mpf(0)
        k = 0
        while True:
            term = zz**k / mpmath.gamma(a * k + b)
            total += term
            if k > 5 and abs(term) < mpmath.mpf(10) ** (-25) * (abs(total) + mpmath.mpf(10) ** (-300)):
                if logt[min(k, len(logt) - 1)] < peak:
                    break
            k += 1
            if k >= _SERIES_MAX_TERMS:
                raise AccuracyLossError("extended-precision series did not converge", math.inf)
        return float(total)


def _ml_scalar(alpha, beta, z):
    if not math.isfinite(z):
        raise DomainError(f"argument must be finite, got {z!r}")
    if z == 0.0:
        return float(special.rgamma(beta))
    if alpha == 1.0 and beta == 1.0:
        return math.exp(z)
    if alpha == 2.0 and beta == 1.0 and z < 0:
        return math.cos(math.sqrt(-z))
    value, err = _series(alpha, beta, z)
    if z > 0:
        return value
    if math.isfinite(err) and err <= 0.1 * RTOL * abs(value):
        return value
    value, err = _asymptotic(alpha, beta, z)
    if math.isfinite(err) and err <= 0.1 * RTOL * abs(value):
        return value
    if alpha < 1.0:
        value, err = _integral(alpha, beta, z)
        if err <= RTOL * abs(value):
            return value
    # the integrand is nearly singular as alpha -> 1; fall back to extended precision
    return _mp_series(alpha, beta, z)


def mittag_leffler(alpha, beta, z):
    """Evaluate the Mittag-Leffler function ``E_{alpha,beta}(z)`` for real ``z``.

    Parameters
    ----------
    alpha : float
        Order, in ``(0, 2]``.
    beta : float
        Second parameter, positive.
    z : float or array_like
        Real argument(s). Large negative arguments are the main use case.

    Returns
    -------
    float or ndarray
        Values with relative accuracy ``RTOL`` for ``|z| <= 50``. Positive
        arguments whose value overflows return ``inf``.

    Raises
    ------
    DomainError
        If ``alpha``, ``beta`` or ``z`` are out of range.
    AccuracyLossError
        If no evaluation route reaches ``RTOL``.
    """
    _check_params(alpha, beta)
    alpha = float(alpha)
    beta = float(beta)
    if np.ndim(z) == 0:
        return _ml_scalar(alpha, beta, float(z))
    zz = np.asarray(z, dtype=float)
    out = np.empty(zz.shape)
    flat = out.reshape(-1)
    for i, zi in enumerate(zz.reshape(-1)):
        flat[i] = _ml_scalar(alpha, beta, float(zi))
    return out
