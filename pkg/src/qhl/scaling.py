"""Macroscopic rescaling of microscopic event streams.

Stable and purely quadratic regimes use ``X = N_{tT}/T`` and ``P* = P_{tT}/sqrt(T)``;
the nearly unstable regime rescales by ``(1 - a_T)/(T mu_T)`` and follows the
parameter schedule built by :func:`make_schedule`.
"""

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ConfigurationError, DomainError, ValidationError
from .kernels import NearlyUnstable, ScaledKernelPair, Zero, tail_constant
from .qhawkes import QHawkesParams, _as_stream, _sums, compensator, intensity_at

DEFAULT_N_GRID = 512
SCHEDULE_RTOL = 1e-9
TAIL_TOL = 0.05
A_T_FLOOR = 1e-12  # a_T below this is a rounding artifact of a_T = 0

_COLUMNS = ("X", "Pstar", "Mstar", "Zstar")


@dataclass
class RescaledPath:
    """Grid samples of the rescaled observables on ``[0, 1]``."""

    grid: np.ndarray
    X: np.ndarray
    Pstar: np.ndarray
    Mstar: np.ndarray
    Zstar: np.ndarray
    regime: str
    T: float
    lambda_star: np.ndarray = None
    Lambda_star: np.ndarray = None
    counts: np.ndarray = None
    jump_size: float = 1.0
    oversampled: bool = False

    def bracket_P(self):
        """Quadratic variation of ``Pstar`` on the grid (sum of squared jumps)."""
        return self.counts * self.jump_size**2

    bracket_M = bracket_P  # M* and P* share their jumps

    def to_csv(self, path, metadata=None):
        """Write ``t,X,Pstar,Mstar,Zstar[,lambda_star]`` plus a JSON sidecar."""
        path = Path(path)
        cols = [self.grid, self.X, self.Pstar, self.Mstar, self.Zstar]
        header = ["t", *_COLUMNS]
        if self.lambda_star is not None:
            cols.append(self.lambda_star)
            header.append("lambda_star")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in zip(*cols):
                w.writerow([repr(float(v)) for v in row])
        side = {"regime": self.regime, "T": self.T, "n_grid": int(self.grid.size)}
        side.update(metadata or {})
        path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def from_csv(cls, path):
        path = Path(path)
        side = json.loads(path.with_suffix(".json").read_text())
        with open(path, newline="") as fh:
            header = next(csv.reader(fh))
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        col = {name: data[:, i] for i, name in enumerate(header)}
        return cls(
            grid=col["t"],
            X=col["X"],
            Pstar=col["Pstar"],
            Mstar=col["Mstar"],
            Zstar=col["Zstar"],
            regime=side["regime"],
            T=side["T"],
            lambda_star=col.get("lambda_star"),
        )


@dataclass(frozen=True)
class UnstableSchedule:
    """Nearly unstable parameters ``a_T``, ``mu_T`` for a ladder of horizons."""

    alpha: float
    lambda_macro: float
    mu_star: float
    K: float
    T_ladder: tuple = field(default=())

    @property
    def delta(self):
        return self.K * math.gamma(1.0 - self.alpha) / self.alpha

    @property
    def min_horizon(self):
        """Horizons must exceed this value for ``a_T > 0``."""
        return (self.lambda_macro * self.delta) ** (1.0 / self.alpha)

    def a_T(self, T):
        return 1.0 - self.lambda_macro * self.delta * T ** (-self.alpha)

    def mu_T(self, T):
        return self.mu_star / self.delta * T ** (self.alpha - 1.0)

    def kernel_pair(self, mother_k, mother_phi, T):
        return ScaledKernelPair(mother_k, mother_phi, NearlyUnstable(self.a_T(T)), T)

    def hawkes_params(self, mother_k, mother_phi, T, **kw):
        """Microscopic parameters at horizon ``T``."""
        k_T, phi_T = self.kernel_pair(mother_k, mother_phi, T).kernels()
        return QHawkesParams(self.mu_T(T), phi_T, k_T, horizon=float(T), **kw)

    def check_tail(self, mother_phi, x=1e8):
        """Warn when the kernel's tail constant is more than 5% away from ``K``."""
        emp = tail_constant(mother_phi, x)
        if abs(emp / self.K - 1.0) > TAIL_TOL:
            warnings.warn(
                f"phi has tail constant {emp:.6g} but the schedule assumes K = {self.K:.6g}",
                stacklevel=2,
            )
        return emp

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "lambda_macro": self.lambda_macro,
            "mu_star": self.mu_star,
            "K": self.K,
            "T_ladder": list(self.T_ladder),
        }


def make_schedule(alpha, lambda_macro, mu_star, K, T_ladder=()):
    """Build an :class:`UnstableSchedule`, rejecting horizons with ``a_T <= 0``."""
    if not 0.5 < alpha < 1:
        raise DomainError(f"alpha must lie in (1/2, 1), got {alpha!r}")
    for name, v in (("lambda_macro", lambda_macro), ("mu_star", mu_star), ("K", K)):
        if not (v > 0 and math.isfinite(v)):
            raise DomainError(f"{name} must be positive, got {v!r}")
    sched = UnstableSchedule(float(alpha), float(lambda_macro), float(mu_star), float(K), tuple(float(T) for T in T_ladder))
    bad = [T for T in sched.T_ladder if not A_T_FLOOR < sched.a_T(T) < 1.0]
    if bad:
        t_min = sched.min_horizon
        n_min = math.floor(t_min) + 1
        while sched.a_T(n_min) <= A_T_FLOOR:
            n_min += 1
        raise DomainError(
            f"horizons {bad} give a_T <= 0; every T must exceed {t_min:.6g} "
            f"(smallest admissible integer T is {n_min})"
        )
    return sched


# --- rescaling ---------------------------------------------------------------


def _grid(n_grid):
    if int(n_grid) < 2:
        raise ValidationError(f"n_grid must be at least 2, got {n_grid!r}")
    return np.linspace(0.0, 1.0, int(n_grid))


def _raw_paths(params, events, n_grid):
    events = _as_stream(events)
    T = params.horizon
    if len(events) and events.times[-1] > T:
        raise ValidationError(f"events extend past the horizon {T}")
    grid = _grid(n_grid)
    times = grid * T
    N = events.counts(times)
    P = events.price(times).astype(float)
    Lam = compensator(params, events, times)
    Z = np.array([_sums(params, events.times, events.signs, u, strict=False)[1] for u in times])
    # grid steps below half the mean inter-event spacing carry no extra information
    oversampled = len(events) > 0 and (grid[1] - grid[0]) < 0.5 / len(events)
    return events, grid, times, N, P, Lam, Z, oversampled


def rescale_stable(events, params, n_grid=DEFAULT_N_GRID, regime="stable"):
    """Rescaled observables for the stable and purely quadratic regimes.

    ``X = N_{tT}/T``, ``P* = P_{tT}/sqrt(T)``, ``M* = (N - Lambda)_{tT}/sqrt(T)``
    and ``Z* = Z_{tT}``, all cadlag on a uniform grid of ``[0, 1]``.
    """
    events, grid, _, N, P, Lam, Z, over = _raw_paths(params, events, n_grid)
    T = params.horizon
    s = 1.0 / math.sqrt(T)
    return RescaledPath(
        grid=grid,
        X=N / T,
        Pstar=P * s,
        Mstar=(N - Lam) * s,
        Zstar=Z,
        regime=regime,
        T=T,
        Lambda_star=Lam / T,
        counts=N,
        jump_size=s,
        oversampled=over,
    )


def _check_schedule(params, schedule):
    T = params.horizon
    a = schedule.a_T(T)
    if not 0 < a < 1:
        raise ConfigurationError(f"schedule gives a_T = {a:.6g} outside (0, 1) at T = {T}")
    if abs(params.mu / schedule.mu_T(T) - 1.0) > SCHEDULE_RTOL:
        raise ConfigurationError(f"mu = {params.mu:.10g} but the schedule gives mu_T = {schedule.mu_T(T):.10g}")
    if abs(params.stability_sum() - a) > 1e-6:
        raise ConfigurationError(
            f"kernel norms sum to {params.stability_sum():.10g} but the schedule gives a_T = {a:.10g}"
        )


def rescale_unstable(events, params, schedule, n_grid=DEFAULT_N_GRID):
    """Rescaled observables for the nearly unstable regime.

    ``X = (1-a_T) N_{tT}/(T mu_T)``; ``M*`` and ``P*`` are scaled by
    ``sqrt((1-a_T)/(T mu_T))``; ``Z* = Z_{tT}/sqrt(mu_T)`` and
    ``lambda* = (1-a_T) lambda_{tT}/mu_T``.
    """
    _check_schedule(params, schedule)
    events, grid, times, N, P, Lam, Z, over = _raw_paths(params, events, n_grid)
    T = params.horizon
    a, mu_T = schedule.a_T(T), schedule.mu_T(T)
    c = (1.0 - a) / (T * mu_T)
    s = math.sqrt(c)
    lam = np.array([intensity_at(params, events, u) for u in times])
    return RescaledPath(
        grid=grid,
        X=N * c,
        Pstar=P * s,
        Mstar=(N - Lam) * s,
        Zstar=Z / math.sqrt(mu_T),
        regime="nearly_unstable",
        T=T,
        lambda_star=(1.0 - a) * lam / mu_T,
        Lambda_star=Lam * c,
        counts=N,
        jump_size=s,
        oversampled=over,
    )


def feedback_from_grid(path, k_T):
    """``Z*`` rebuilt by discrete convolution of the ``P*`` grid increments.

    Agrees with the event-level ``Zstar`` up to the grid step.
    """
    T = path.T
    dP = np.diff(path.Pstar)
    lag = path.grid[:, None] - path.grid[None, 1:]
    W = np.where(lag >= 0, k_T(np.maximum(lag, 0.0) * T), 0.0)
    scale = math.sqrt(T) if path.regime != "nearly_unstable" else 1.0
    out = scale * (W @ dP)
    return np.concatenate(([0.0], out[1:]))


class Rescaler(BaseEstimator, TransformerMixin):
    """Map event streams to one rescaled observable sampled on the grid.

    ``transform`` takes an iterable of event streams simulated under ``params``
    and returns an array of shape ``(n_streams, n_grid)``.
    """

    def __init__(self, params=None, schedule=None, n_grid=DEFAULT_N_GRID, output="X"):
        self.params = params
        self.schedule = schedule
        self.n_grid = n_grid
        self.output = output

    def fit(self, X=None, y=None):
        if not isinstance(self.params, QHawkesParams):
            raise ConfigurationError("Rescaler needs QHawkesParams")
        if self.output not in (*_COLUMNS, "lambda_star", "Lambda_star"):
            raise ConfigurationError(f"unknown output {self.output!r}")
        if self.schedule is not None:
            _check_schedule(self.params, self.schedule)
        elif self.output == "lambda_star":
            raise ConfigurationError("lambda_star is only defined for the nearly unstable regime")
        self.grid_ = _grid(self.n_grid)
        return self

    def rescale(self, events):
        if self.schedule is None:
            regime = "purely_quadratic" if self.params.phi.is_zero() and not self.params.k.is_zero() else "stable"
            return rescale_stable(events, self.params, self.n_grid, regime=regime)
        return rescale_unstable(events, self.params, self.schedule, self.n_grid)

    def transform(self, X):
        if not hasattr(self, "grid_"):
            self.fit()
        return np.vstack([getattr(self.rescale(ev), self.output) for ev in X])


def poisson_params(mu, T):
    """Parameters of a plain Poisson stream, handy as a null model."""
    return QHawkesParams(mu, Zero(), Zero(), horizon=T)


__all__ = [
    "DEFAULT_N_GRID",
    "RescaledPath",
    "Rescaler",
    "UnstableSchedule",
    "feedback_from_grid",
    "make_schedule",
    "poisson_params",
    "rescale_stable",
    "rescale_unstable",
]
