"""Quadratic Hawkes price process.

The counting process N has intensity

    lambda_t = mu + sum_{t_i < t} phi(t - t_i) + Z_t^2,
    Z_t = sum_{t_i < t} sign_i k(t - t_i),

and the price is P_t = sum_{t_i <= t} sign_i with fair, independent signs.
Simulation is exact thinning. When both kernels are exponential (or zero) the
intensity itself is non-increasing between events and serves as the
envelope, and the loop runs in numba on O(1) recursive state.
"""

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numba import njit
from scipy import integrate
from sklearn.base import BaseEstimator

from ._random import as_generator
from .exceptions import (
    ExplosionError,
    StabilityError,
    UnsupportedKernelError,
    ValidationError,
)
from .kernels import Kernel, Zero, kernel_from_dict

DEFAULT_MAX_EVENTS = 10_000_000
TRUNCATION_LEVEL = 1e-12
_BLOCK = 8192


@dataclass(frozen=True)
class QHawkesParams:
    mu: float
    phi: Kernel = field(default_factory=Zero)
    k: Kernel = field(default_factory=Zero)
    horizon: float = 1.0
    max_events: int = DEFAULT_MAX_EVENTS

    def __post_init__(self):
        if not (self.mu > 0 and math.isfinite(self.mu)):
            raise ValidationError(f"mu must be positive, got {self.mu!r}")
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ValidationError(f"horizon must be positive and finite, got {self.horizon!r}")
        s = self.stability_sum()
        if not s < 1.0:
            raise StabilityError(f"stability condition violated: ||phi||_1 + ||k||_2^2 = {s:.6g} >= 1")

    def stability_sum(self):
        return self.phi.l1() + self.k.l2_sq()

    def to_dict(self):
        return {
            "mu": self.mu,
            "phi": self.phi.to_dict(),
            "k": self.k.to_dict(),
            "horizon": self.horizon,
            "max_events": self.max_events,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        extra = set(d) - {"mu", "phi", "k", "horizon", "max_events"}
        if extra:
            raise ValidationError(f"unknown field(s) in hawkes parameters: {sorted(extra)}")
        if "mu" not in d:
            raise ValidationError("hawkes parameters need 'mu'")
        return cls(
            mu=float(d["mu"]),
            phi=kernel_from_dict(d.get("phi", {"variant": "zero"})),
            k=kernel_from_dict(d.get("k", {"variant": "zero"})),
            horizon=float(d.get("horizon", 1.0)),
            max_events=int(d.get("max_events", DEFAULT_MAX_EVENTS)),
        )

    def mean_intensity_bound(self):
        """``mu / (1 - ||phi||_1 - ||k||_2^2)``, an upper bound on E[lambda_t]."""
        return self.mu / (1.0 - self.stability_sum())


@dataclass(frozen=True, eq=False)
class EventStream:
    """Signed event times on ``(0, horizon]``."""

    times: np.ndarray
    signs: np.ndarray
    horizon: float = math.inf

    def __post_init__(self):
        times = np.ascontiguousarray(self.times, dtype=float)
        signs = np.ascontiguousarray(self.signs, dtype=np.int8)
        if times.ndim != 1 or signs.shape != times.shape:
            raise ValidationError("times and signs must be 1-d arrays of equal length")
        if times.size and not np.all(np.isfinite(times)):
            raise ValidationError("event times must be finite")
        if np.any(np.diff(times) < 0):
            raise ValidationError("event times must be non-decreasing")
        if not np.all(np.abs(signs) == 1):
            raise ValidationError("signs must be +1 or -1")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "signs", signs)

    @classmethod
    def from_unsorted(cls, times, signs, horizon=math.inf):
        """Sort by time; ties are ordered +1 before -1."""
        times = np.asarray(times, dtype=float)
        signs = np.asarray(signs, dtype=np.int8)
        order = np.lexsort((-signs, times))
        return cls(times[order], signs[order], horizon)

    def __len__(self):
        return self.times.size

    @property
    def is_strict(self):
        return bool(np.all(np.diff(self.times) > 0))

    def counts(self, t):
        """``N_t``: number of events with ``t_i <= t``."""
        return np.searchsorted(self.times, t, side="right")

    def price(self, t):
        """``P_t``: signed sum of jumps with ``t_i <= t``."""
        cum = np.concatenate(([0], np.cumsum(self.signs, dtype=np.int64)))
        return cum[self.counts(t)]

    def bracket(self, t):
        """Quadratic variation of the price; equals ``N_t`` for unit jumps."""
        cum = np.concatenate(([0], np.cumsum(self.signs.astype(np.int64) ** 2)))
        return cum[self.counts(t)]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "sign"])
            for t, s in zip(self.times, self.signs):
                w.writerow([repr(float(t)), int(s)])

    @classmethod
    def from_csv(cls, path, horizon=math.inf):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if data.size == 0:
            return cls(np.empty(0), np.empty(0, dtype=np.int8), horizon)
        return cls(data[:, 0], data[:, 1].astype(np.int8), horizon)


def _as_stream(events):
    if isinstance(events, EventStream):
        return events
    times, signs = events
    return EventStream(times, signs)


@lru_cache(maxsize=128)
def _truncation_lag(params):
    """Lag beyond which phi and k^2 both fall below ``TRUNCATION_LEVEL * mu``."""
    return max(
        params.phi.lag_below(TRUNCATION_LEVEL * params.mu, params.horizon),
        params.k.lag_below(math.sqrt(TRUNCATION_LEVEL * params.mu), params.horizon),
    )


def _sums(params, times, signs, t, strict=True, truncate=True):
    """Return ``(sum phi, signed sum k, unsigned sum k)`` over past events."""
    lo = int(np.searchsorted(times, t - _truncation_lag(params), side="left")) if truncate else 0
    hi = np.searchsorted(times, t, side="left" if strict else "right")
    lags = t - times[lo:hi]
    if lags.size == 0:
        return 0.0, 0.0, 0.0
    kv = params.k(lags)
    return float(np.sum(params.phi(lags))), float(np.dot(signs[lo:hi], kv)), float(np.sum(kv))


def intensity_at(params, events, t, truncate=True):
    """``lambda_t``, using strictly prior events only."""
    events = _as_stream(events)
    if not t >= 0:
        raise ValidationError(f"t must be non-negative, got {t!r}")
    a, z, _ = _sums(params, events.times, events.signs, t, strict=True, truncate=truncate)
    return params.mu + a + z * z


def majorant_at(params, events, t, truncate=True):
    """Sign-free envelope ``mu + sum phi + (sum k)^2 >= lambda_t``."""
    events = _as_stream(events)
    for ker in (params.phi, params.k):
        if not ker.nonincreasing:
            raise UnsupportedKernelError(f"{type(ker).__name__} is not non-increasing; no thinning envelope")
    a, _, u = _sums(params, events.times, events.signs, t, strict=True, truncate=truncate)
    return params.mu + a + u * u


def intensity_path(params, events, grid):
    """Vector of ``lambda_t`` (predictable version) on ``grid``."""
    events = _as_stream(events)
    return np.array([intensity_at(params, events, float(t)) for t in np.asarray(grid, dtype=float)])


def feedback_at(params, events, t, strict=False):
    """``Z_t``; ``strict=False`` gives the cadlag value including jumps at ``t``."""
    events = _as_stream(events)
    _, z, _ = _sums(params, events.times, events.signs, t, strict=strict)
    return z


def _exp_or_zero(ker):
    if ker.is_zero():
        return 1.0, 0.0
    return ker.as_exponential()


@njit(cache=True)
def _thin_exponential(mu, nu_phi, c_phi, nu_k, c_k, horizon, state, E, U, C, times, signs, max_events):
    """Thinning loop; ``state = [t, A, S, n, used]`` is updated in place.

    Returns 0 when the horizon is reached, 1 when the random block is used up,
    2 when the output buffer is full and 3 when ``max_events`` is hit.
    ``used`` is the number of random triples consumed by this call.
    """
    t = state[0]
    A = state[1]
    S = state[2]
    n = int(state[3])
    cap = times.shape[0]
    status = 1
    i = 0
    while i < E.shape[0]:
        if n >= cap:
            status = 2
            break
        lam_bar = mu + A + S * S
        t_new = t + E[i] / lam_bar
        if t_new > horizon:
            dt = horizon - t
            A *= math.exp(-nu_phi * dt)
            S *= math.exp(-nu_k * dt)
            t = horizon
            status = 0
            i += 1
            break
        dt = t_new - t
        A *= math.exp(-nu_phi * dt)
        S *= math.exp(-nu_k * dt)
        t = t_new
        lam = mu + A + S * S
        accept = U[i] * lam_bar <= lam
        sgn = 1 if C[i] < 0.5 else -1
        i += 1
        if accept:
            times[n] = t
            signs[n] = sgn
            n += 1
            A += c_phi
            S += sgn * c_k
            if n >= max_events:
                status = 3
                break
    state[0] = t
    state[1] = A
    state[2] = S
    state[3] = n
    state[4] = i
    return status


def _simulate_exponential(params, rng):
    nu_phi, c_phi = _exp_or_zero(params.phi)
    nu_k, c_k = _exp_or_zero(params.k)
    guess = int(2 * params.mean_intensity_bound() * params.horizon) + 64
    cap = min(max(guess, 64), params.max_events)
    times = np.empty(cap)
    signs = np.empty(cap, dtype=np.int8)
    state = np.zeros(5)
    while True:
        E = rng.standard_exponential(_BLOCK)
        U = rng.random(_BLOCK)
        C = rng.random(_BLOCK)
        offset = 0
        while True:
            status = _thin_exponential(
                params.mu, nu_phi, c_phi, nu_k, c_k, params.horizon, state,
                E[offset:], U[offset:], C[offset:], times, signs, params.max_events,
            )
            offset += int(state[4])
            if status != 2:
                break
            # output buffer full: grow and resume with the unused randoms
            times = np.concatenate((times, np.empty(times.size)))
            signs = np.concatenate((signs, np.empty(signs.size, dtype=np.int8)))
        if status == 0:
            break
        if status == 3:
            raise ExplosionError(f"more than {params.max_events} events before the horizon")
    n = int(state[3])
    return times[:n].copy(), signs[:n].copy()


def _simulate_general(params, rng):
    for ker in (params.phi, params.k):
        if not math.isfinite(ker.value_at_zero):
            raise UnsupportedKernelError(
                f"{type(ker).__name__} is unbounded at 0; thinning needs bounded kernels"
            )
    mu, T = params.mu, params.horizon
    refresh = 0.1 / mu
    cap = int(2 * params.mean_intensity_bound() * T) + 64
    times = np.empty(cap)
    signs = np.empty(cap)
    n = 0
    t = 0.0
    env_time = -math.inf
    dirty = True
    while True:
        if dirty or t - env_time > refresh:
            a, _, u = _sums(params, times[:n], signs[:n], t, strict=False)
            lam_bar = mu + a + u * u
            env_time = t
            dirty = False
        t += rng.standard_exponential() / lam_bar
        if t > T:
            break
        a, z, _ = _sums(params, times[:n], signs[:n], t)
        if rng.random() * lam_bar <= mu + a + z * z:
            if n == times.size:
                times = np.concatenate((times, np.empty(n)))
                signs = np.concatenate((signs, np.empty(n)))
            times[n] = t
            signs[n] = 1.0 if rng.random() < 0.5 else -1.0
            n += 1
            if n >= params.max_events:
                raise ExplosionError(f"more than {params.max_events} events before the horizon")
            dirty = True
    return times[:n].copy(), signs[:n].astype(np.int8)


def uses_recursive_path(params):
    return _exp_or_zero(params.phi) is not None and _exp_or_zero(params.k) is not None


def simulate(params, random_state=None):
    """Exact sample of the quadratic Hawkes process on ``[0, params.horizon]``."""
    rng = as_generator(random_state)
    if uses_recursive_path(params):
        times, signs = _simulate_exponential(params, rng)
    else:
        times, signs = _simulate_general(params, rng)
    return EventStream(times, signs, params.horizon)


# --- compensator ------------------------------------------------------------


@njit(cache=True)
def _z_sq_integral_exp(times, signs, nu, c, grid):
    """``int_0^g Z_u^2 du`` at each grid point for ``k = c exp(-nu t)``."""
    out = np.empty(grid.shape[0])
    n = times.shape[0]
    j = 0
    acc = 0.0  # integral up to the last event processed
    S = 0.0  # Z just after the last event processed
    last = 0.0
    for g in range(grid.shape[0]):
        tg = grid[g]
        while j < n and times[j] <= tg:
            dt = times[j] - last
            acc += S * S * (-math.expm1(-2.0 * nu * dt)) / (2.0 * nu)
            S = S * math.exp(-nu * dt) + signs[j] * c
            last = times[j]
            j += 1
        dt = tg - last
        out[g] = acc + S * S * (-math.expm1(-2.0 * nu * dt)) / (2.0 * nu)
    return out


def _z_sq_integral_general(params, events, grid):
    """Piecewise adaptive quadrature of Z^2 between breakpoints."""
    breaks = np.union1d(events.times, grid)
    breaks = breaks[breaks > 0]
    cum = {0.0: 0.0}
    acc = 0.0
    prev = 0.0

    def z_sq(u):
        _, z, _ = _sums(params, events.times, events.signs, u, strict=True)
        return z * z

    for b in breaks:
        if b > prev:
            v, _ = integrate.quad(z_sq, prev, b, epsabs=1e-13, epsrel=1e-10, limit=200)
            acc += v
        cum[float(b)] = acc
        prev = b
    return np.array([cum[float(g)] for g in grid])


@njit(cache=True)
def _linear_integral_exp(times, nu, c, grid):
    """``sum_i int_0^g phi(u - t_i) du`` at each grid point for ``phi = c exp(-nu t)``."""
    out = np.empty(grid.shape[0])
    n = times.shape[0]
    j = 0
    acc = 0.0
    A = 0.0
    last = 0.0
    for g in range(grid.shape[0]):
        tg = grid[g]
        while j < n and times[j] <= tg:
            dt = times[j] - last
            acc += A * (-math.expm1(-nu * dt)) / nu
            A = A * math.exp(-nu * dt) + c
            last = times[j]
            j += 1
        out[g] = acc + A * (-math.expm1(-nu * (tg - last))) / nu
    return out


def compensator(params, events, grid):
    """``Lambda(t) = int_0^t lambda_s ds`` on an increasing ``grid``."""
    events = _as_stream(events)
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or np.any(np.diff(grid) < 0) or (grid.size and grid[0] < 0):
        raise ValidationError("grid must be a non-decreasing sequence of non-negative times")
    out = params.mu * grid
    if len(events) == 0:
        return out
    # linear part: sum_i Phi(t - t_i), exact via the kernel antiderivative
    e = _exp_or_zero(params.phi)
    if e is not None and not params.phi.is_zero():
        out = out + _linear_integral_exp(events.times, e[0], e[1], grid)
    elif not params.phi.is_zero():
        csum = np.zeros(grid.size)
        for i, t in enumerate(grid):
            hi = np.searchsorted(events.times, t, side="left")
            if hi:
                csum[i] = np.sum(params.phi.integral(t - events.times[:hi]))
        out = out + csum
    if not params.k.is_zero():
        e = _exp_or_zero(params.k)
        if e is not None:
            out = out + _z_sq_integral_exp(events.times, events.signs.astype(np.float64), e[0], e[1], grid)
        else:
            out = out + _z_sq_integral_general(params, events, grid)
    return out


def time_change_residuals(params, events):
    """``Lambda(t_{i+1}) - Lambda(t_i)``: i.i.d. Exp(1) for a correct simulation."""
    events = _as_stream(events)
    if len(events) < 2:
        return np.empty(0)
    return np.diff(compensator(params, events, events.times))


class QuadraticHawkes(BaseEstimator):
    """Estimator-style wrapper around :func:`simulate` and the diagnostics.

    Parameters mirror :class:`QHawkesParams`; ``get_params``/``set_params``
    make it usable with scikit-learn tooling such as ``clone``.
    """

    def __init__(self, mu=1.0, phi=None, k=None, horizon=1.0, max_events=DEFAULT_MAX_EVENTS):
        self.mu = mu
        self.phi = phi
        self.k = k
        self.horizon = horizon
        self.max_events = max_events

    def to_params(self):
        return QHawkesParams(
            self.mu,
            Zero() if self.phi is None else self.phi,
            Zero() if self.k is None else self.k,
            self.horizon,
            self.max_events,
        )

    def sample(self, random_state=None):
        return simulate(self.to_params(), random_state)

    def intensity(self, events, t):
        return intensity_at(self.to_params(), events, t)

    def compensator(self, events, grid):
        return compensator(self.to_params(), events, grid)

    def residuals(self, events):
        return time_change_residuals(self.to_params(), events)
