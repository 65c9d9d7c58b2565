"""Euler schemes for the macroscopic stochastic Volterra models.

Four models are available:

* ``PQModel``: ``V = mu + Z^2`` with ``Z = sqrt(gamma) int k(t-s) sqrt(V_s) dB_s``;
* ``SQModel``: adds ``H = int beta phi(t-s) V_s ds`` to the variance;
* ``NUModel``: the nearly unstable limit with a Mittag-Leffler density kernel
  and two independent Brownian motions;
* ``RoughHestonRef``: rough Heston variance, used as a baseline without
  price feedback.

Every convolution uses step-averaged kernel weights
``(I((l+1)h) - I(lh))/h`` built from the kernel antiderivative ``I``. The
weights stay finite for singular kernels and are exactly geometric for
exponential ones. Paths are simulated in batches, each path with its own
seeded stream, so a batch gives the same values as its paths run one by one.
"""

import csv
import math
import warnings
from dataclasses import dataclass, field, fields
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import special

from ._random import stream
from .exceptions import ConfigurationError, StabilityError, UnsupportedKernelError, ValidationError
from .kernels import Kernel, MittagLeffler, Zero, kernel_from_dict

DEFAULT_N_STEPS = 512
CLIP_WARN_FRACTION = 0.05
_NORM_RTOL = 1e-6


def _check_norm(value, what):
    if abs(value - 1.0) > _NORM_RTOL:
        raise ConfigurationError(f"{what} must equal 1, got {value:.10g}")


def _check_steps(n_steps, horizon):
    if int(n_steps) != n_steps or n_steps < 1:
        raise ConfigurationError(f"n_steps must be a positive integer, got {n_steps!r}")
    if not (horizon > 0 and math.isfinite(horizon)):
        raise ConfigurationError(f"horizon must be positive, got {horizon!r}")


# --- model specifications ----------------------------------------------------


@dataclass(frozen=True)
class PQModel:
    mu: float
    gamma: float
    k: Kernel
    n_steps: int = DEFAULT_N_STEPS
    horizon: float = 1.0

    variant = "pq"

    def __post_init__(self):
        _check_steps(self.n_steps, self.horizon)
        if not self.mu > 0:
            raise ConfigurationError(f"mu must be positive, got {self.mu!r}")
        if not 0 < self.gamma < 1:
            raise StabilityError(f"stability requires gamma in (0, 1), got {self.gamma!r}")
        if not self.k.is_zero():
            _check_norm(math.sqrt(self.k.l2_sq()), "||k||_2")


@dataclass(frozen=True)
class SQModel:
    mu: float
    gamma: float
    beta: float
    k: Kernel
    phi: Kernel
    n_steps: int = DEFAULT_N_STEPS
    horizon: float = 1.0

    variant = "sq"

    def __post_init__(self):
        _check_steps(self.n_steps, self.horizon)
        if not self.mu > 0:
            raise ConfigurationError(f"mu must be positive, got {self.mu!r}")
        if self.gamma < 0 or self.beta < 0 or not 0 < self.gamma + self.beta < 1:
            raise StabilityError(
                f"stability requires 0 < gamma + beta < 1, got gamma + beta = {self.gamma + self.beta:.6g}"
            )
        if not self.k.is_zero():
            _check_norm(math.sqrt(self.k.l2_sq()), "||k||_2")
        if not self.phi.is_zero():
            _check_norm(self.phi.l1(), "||phi||_1")


@dataclass(frozen=True)
class NUModel:
    alpha: float
    lam: float
    mu_star: float
    k: Kernel
    n_steps: int = DEFAULT_N_STEPS
    horizon: float = 1.0

    variant = "nu"

    def __post_init__(self):
        _check_steps(self.n_steps, self.horizon)
        if not 0.5 < self.alpha < 1:
            raise ConfigurationError(f"alpha must lie in (1/2, 1), got {self.alpha!r}")
        if not (self.lam > 0 and self.mu_star > 0):
            raise ConfigurationError("lam and mu_star must be positive")
        if not self.k.is_zero():
            if not math.isfinite(self.k.value_at_zero):
                raise ConfigurationError("k must be finite at 0 in the nearly unstable model")
            _check_norm(math.sqrt(self.k.l2_sq()), "||k||_2")


@dataclass(frozen=True)
class RoughHestonRef:
    """Rough Heston variance with fractional kernel ``t^(alpha-1)/Gamma(alpha)``.

    ``theta0`` is a constant or a table of length ``n_steps + 1`` holding the
    (piecewise constant) mean-reversion level on the grid.
    """

    V0: float
    lam: float
    alpha: float
    theta0: object
    nu: float
    rho: float
    n_steps: int = DEFAULT_N_STEPS
    horizon: float = 1.0

    variant = "rough_heston"

    def __post_init__(self):
        _check_steps(self.n_steps, self.horizon)
        if not 0.5 < self.alpha < 1:
            raise ConfigurationError(f"alpha must lie in (1/2, 1), got {self.alpha!r}")
        if self.V0 < 0 or self.lam < 0 or self.nu < 0:
            raise ConfigurationError("V0, lam and nu must be non-negative")
        if not -1 <= self.rho <= 1:
            raise ConfigurationError(f"rho must lie in [-1, 1], got {self.rho!r}")
        theta = np.asarray(self.theta0, dtype=float)
        if theta.ndim == 1:
            if theta.size != self.n_steps + 1:
                raise ConfigurationError(f"theta0 table needs {self.n_steps + 1} values, got {theta.size}")
            object.__setattr__(self, "theta0", tuple(theta.tolist()))
        elif theta.ndim != 0:
            raise ConfigurationError("theta0 must be a scalar or a 1-d table")
        else:
            object.__setattr__(self, "theta0", float(theta))

    def theta_grid(self):
        return np.broadcast_to(np.asarray(self.theta0, dtype=float), (self.n_steps + 1,))


MODELS = {m.variant: m for m in (PQModel, SQModel, NUModel, RoughHestonRef)}
_KERNEL_FIELDS = ("k", "phi")


def model_to_dict(spec):
    d = {"variant": spec.variant}
    for f in fields(spec):
        v = getattr(spec, f.name)
        d[f.name] = v.to_dict() if isinstance(v, Kernel) else (list(v) if isinstance(v, tuple) else v)
    return d


def model_from_dict(d):
    """Inverse of :func:`model_to_dict`; unknown fields are rejected."""
    if not isinstance(d, dict) or d.get("variant") not in MODELS:
        raise ValidationError(f"model spec needs a 'variant' in {sorted(MODELS)}")
    cls = MODELS[d["variant"]]
    names = {f.name for f in fields(cls)}
    extra = set(d) - names - {"variant"}
    if extra:
        raise ValidationError(f"unknown fields for {d['variant']} model: {sorted(extra)}")
    kw = {}
    for name, v in d.items():
        if name == "variant":
            continue
        kw[name] = kernel_from_dict(v) if name in _KERNEL_FIELDS else v
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ValidationError(str(exc)) from None


# --- paths ------------------------------------------------------------------


@dataclass
class MacroPath:
    """Batch of simulated macroscopic paths, arrays of shape ``(n_paths, n_steps + 1)``.

    ``V_raw`` holds the unclipped variance proposals (equal to ``V`` for the
    PQ and SQ models); ``clip_fraction`` is the share of clipped proposals.
    """

    grid: np.ndarray
    V: np.ndarray
    Z: np.ndarray
    P: np.ndarray
    M: np.ndarray = None
    H: np.ndarray = None
    V_raw: np.ndarray = None
    dB: np.ndarray = None
    clip_fraction: float = 0.0
    spec: object = None
    seeds: tuple = field(default=())

    @property
    def n_paths(self):
        return self.V.shape[0]

    def __getitem__(self, i):
        pick = lambda a: None if a is None else a[i : i + 1]  # noqa: E731
        return MacroPath(
            self.grid,
            pick(self.V),
            pick(self.Z),
            pick(self.P),
            pick(self.M),
            pick(self.H),
            pick(self.V_raw),
            None if self.dB is None else (self.dB[:, i : i + 1] if self.dB.ndim == 3 else self.dB[i : i + 1]),
            self.clip_fraction,
            self.spec,
            self.seeds[i : i + 1] if self.seeds else (),
        )

    def integrated_variance(self):
        """Trapezoid ``int_0^t V`` on the grid."""
        h = self.grid[1] - self.grid[0]
        inc = 0.5 * h * (self.V[:, 1:] + self.V[:, :-1])
        return np.concatenate((np.zeros((self.n_paths, 1)), np.cumsum(inc, axis=1)), axis=1)

    def to_csv(self, path, index=0):
        """Write path ``index`` as ``t,V,Z,P[,M][,H]``."""
        cols = {"t": self.grid, "V": self.V[index], "Z": self.Z[index], "P": self.P[index]}
        if self.M is not None:
            cols["M"] = self.M[index]
        if self.H is not None:
            cols["H"] = self.H[index]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(cols))
            for row in zip(*cols.values()):
                w.writerow([repr(float(v)) for v in row])
        return Path(path)


# --- weights ----------------------------------------------------------------


@lru_cache(maxsize=64)
def _avg_weights(kernel, h, n):
    """``(I((l+1)h) - I(lh))/h`` for ``l = 0..n-1``."""
    if kernel.is_zero():
        return np.zeros(n)
    I = np.asarray(kernel.integral(h * np.arange(n + 1)), dtype=float)
    w = np.diff(I) / h
    w.flags.writeable = False
    return w


@lru_cache(maxsize=64)
def _fractional_weights(alpha, h, n):
    """Step integrals of ``t^(alpha-1)/Gamma(alpha)``."""
    l = np.arange(n + 1, dtype=float)
    w = np.diff(l**alpha) * h**alpha / special.gamma(alpha + 1.0)
    w.flags.writeable = False
    return w


def _conv(A, w, j):
    """``sum_{m<j} A[:, m] w[j-1-m]``."""
    return A[:, :j] @ w[j - 1 :: -1]


def _normals(seed, n_paths, n_steps, h, first_index=0, sub=None):
    out = np.empty((n_paths, n_steps))
    for i in range(n_paths):
        rng = stream(seed, first_index + i) if sub is None else stream(seed, first_index + i, sub)
        out[i] = rng.standard_normal(n_steps)
    return out * math.sqrt(h)


def _seed_list(seed, n_paths, first_index):
    return tuple((int(seed), first_index + i) for i in range(n_paths))


# --- simulators --------------------------------------------------------------


def _simulate_quadratic(mu, gamma, beta, k, phi, n, T, dB):
    h = T / n
    p = dB.shape[0]
    wk = math.sqrt(gamma) * _avg_weights(k, h, n)
    wphi = beta * _avg_weights(phi, h, n)
    G = np.zeros((p, n))
    Vh = np.zeros((p, n))
    Z = np.zeros((p, n + 1))
    H = np.zeros((p, n + 1))
    V = np.empty((p, n + 1))
    V[:, 0] = mu
    with_h = beta != 0.0 or not phi.is_zero()
    for j in range(1, n + 1):
        m = j - 1
        G[:, m] = np.sqrt(V[:, m]) * dB[:, m]
        Z[:, j] = _conv(G, wk, j)
        if with_h:
            Vh[:, m] = V[:, m] * h
            H[:, j] = _conv(Vh, wphi, j)
            V[:, j] = mu + H[:, j] + Z[:, j] ** 2
        else:
            V[:, j] = mu + Z[:, j] ** 2
    P = np.concatenate((np.zeros((p, 1)), np.cumsum(G, axis=1)), axis=1)
    return V, Z, P, (H if with_h else None)


def simulate_pq(spec, seed, n_paths=1, first_index=0):
    """Simulate the purely quadratic limit model (single Brownian driver)."""
    if not isinstance(spec, PQModel):
        raise ConfigurationError("simulate_pq needs a PQModel")
    n, T = spec.n_steps, spec.horizon
    dB = _normals(seed, n_paths, n, T / n, first_index)
    V, Z, P, _ = _simulate_quadratic(spec.mu, spec.gamma, 0.0, spec.k, Zero(), n, T, dB)
    return MacroPath(np.linspace(0, T, n + 1), V, Z, P, V_raw=V, dB=dB, spec=spec, seeds=_seed_list(seed, n_paths, first_index))


def simulate_sq(spec, seed, n_paths=1, first_index=0):
    """Simulate the stable quadratic limit model ``V = mu + H + Z^2``."""
    if not isinstance(spec, SQModel):
        raise ConfigurationError("simulate_sq needs an SQModel")
    n, T = spec.n_steps, spec.horizon
    dB = _normals(seed, n_paths, n, T / n, first_index)
    V, Z, P, H = _simulate_quadratic(spec.mu, spec.gamma, spec.beta, spec.k, spec.phi, n, T, dB)
    if H is None:
        H = np.zeros_like(V)
    return MacroPath(
        np.linspace(0, T, n + 1), V, Z, P, H=H, V_raw=V, dB=dB, spec=spec, seeds=_seed_list(seed, n_paths, first_index)
    )


def _warn_clip(frac, what):
    if frac > CLIP_WARN_FRACTION:
        warnings.warn(f"{what}: {100 * frac:.1f}% of variance proposals were negative and clipped", stacklevel=3)


def simulate_nu(spec, seed, n_paths=1, first_index=0):
    """Simulate the nearly unstable limit model.

    ``V`` is driven by ``B1`` through the Mittag-Leffler density and ``Z`` by
    the independent ``B2``. Negative proposals are clipped before the square
    root; the drift keeps the raw values.
    """
    if not isinstance(spec, NUModel):
        raise ConfigurationError("simulate_nu needs an NUModel")
    n, T = spec.n_steps, spec.horizon
    h = T / n
    dB1 = _normals(seed, n_paths, n, h, first_index, sub=1)
    dB2 = _normals(seed, n_paths, n, h, first_index, sub=2)
    p = n_paths
    drift_w = 0.5 * h * _avg_weights(MittagLeffler(spec.alpha, spec.lam), h, n)
    wk = _avg_weights(spec.k, h, n)
    c = 1.0 / math.sqrt(spec.lam * spec.mu_star)
    U = np.zeros((p, n))
    G1 = np.zeros((p, n))
    G2 = np.zeros((p, n))
    V_raw = np.zeros((p, n + 1))
    Z = np.zeros((p, n + 1))
    clipped = 0
    for j in range(1, n + 1):
        m = j - 1
        s = np.sqrt(np.maximum(V_raw[:, m], 0.0))
        clipped += int(np.count_nonzero(V_raw[:, m] < 0))
        G1[:, m] = s * dB1[:, m]
        G2[:, m] = s * dB2[:, m]
        U[:, m] = 1.0 + Z[:, m] ** 2 + c * G1[:, m] / h
        V_raw[:, j] = _conv(U, drift_w, j)
        Z[:, j] = _conv(G2, wk, j)
    clipped += int(np.count_nonzero(V_raw[:, n] < 0))
    frac = clipped / V_raw.size
    _warn_clip(frac, "nearly unstable model")
    zero = np.zeros((p, 1))
    return MacroPath(
        np.linspace(0, T, n + 1),
        np.maximum(V_raw, 0.0),
        Z,
        np.concatenate((zero, np.cumsum(G2, axis=1)), axis=1),
        M=np.concatenate((zero, np.cumsum(G1, axis=1)), axis=1),
        V_raw=V_raw,
        dB=np.stack((dB1, dB2)),
        clip_fraction=frac,
        spec=spec,
        seeds=_seed_list(seed, n_paths, first_index),
    )


def simulate_rough_heston(spec, seed, n_paths=1, first_index=0):
    """Euler scheme for rough Heston with price/variance correlation ``rho``.

    ``Z`` is returned as zeros: the model has no price feedback.
    """
    if not isinstance(spec, RoughHestonRef):
        raise ConfigurationError("simulate_rough_heston needs a RoughHestonRef")
    n, T = spec.n_steps, spec.horizon
    h = T / n
    dW = _normals(seed, n_paths, n, h, first_index, sub=1)
    dW_perp = _normals(seed, n_paths, n, h, first_index, sub=2)
    dB = spec.rho * dW + math.sqrt(max(1.0 - spec.rho**2, 0.0)) * dW_perp
    w = _fractional_weights(spec.alpha, h, n)
    theta = spec.theta_grid()
    p = n_paths
    U = np.zeros((p, n))
    G = np.zeros((p, n))
    V_raw = np.empty((p, n + 1))
    V_raw[:, 0] = spec.V0
    clipped = 0
    for j in range(1, n + 1):
        m = j - 1
        s = np.sqrt(np.maximum(V_raw[:, m], 0.0))
        clipped += int(np.count_nonzero(V_raw[:, m] < 0))
        G[:, m] = s * dB[:, m]
        U[:, m] = spec.lam * ((theta[m] - V_raw[:, m]) + spec.nu * s * dW[:, m] / h)
        V_raw[:, j] = spec.V0 + _conv(U, w, j)
    clipped += int(np.count_nonzero(V_raw[:, n] < 0))
    frac = clipped / V_raw.size
    _warn_clip(frac, "rough Heston model")
    return MacroPath(
        np.linspace(0, T, n + 1),
        np.maximum(V_raw, 0.0),
        np.zeros((p, n + 1)),
        np.concatenate((np.zeros((p, 1)), np.cumsum(G, axis=1)), axis=1),
        V_raw=V_raw,
        dB=np.stack((dW, dW_perp)),
        clip_fraction=frac,
        spec=spec,
        seeds=_seed_list(seed, n_paths, first_index),
    )


_SIMULATORS = {
    PQModel: simulate_pq,
    SQModel: simulate_sq,
    NUModel: simulate_nu,
    RoughHestonRef: simulate_rough_heston,
}


def simulate_limit(spec, seed, n_paths=1, first_index=0):
    """Dispatch on the model type."""
    try:
        fn = _SIMULATORS[type(spec)]
    except KeyError:
        raise ConfigurationError(f"unknown limit model {spec!r}") from None
    return fn(spec, seed, n_paths, first_index)


# --- forward variance ---------------------------------------------------------


@dataclass
class ForwardDecomposition:
    """Split of ``V_{t0+h}`` into a part known at ``t0`` and fresh noise.

    ``V_{t0+h} = mu + (exp(-nu h) Z_{t0} + Zt_h)^2 + Ht_h + exp(-kappa h) H_{t0}``,
    where ``Zt`` and ``Ht`` only use noise after ``t0``. ``predictable`` is
    ``mu + exp(-2 nu h) Z_{t0}^2 + exp(-kappa h) H_{t0}``.
    """

    lags: np.ndarray
    Z0: np.ndarray
    H0: np.ndarray
    predictable: np.ndarray
    Zt: np.ndarray
    Ht: np.ndarray
    reconstructed: np.ndarray
    direct: np.ndarray
    decay_z: np.ndarray
    decay_h: np.ndarray

    @property
    def cross_term(self):
        """``2 exp(-nu h) Z_{t0} Zt_h``, the part correlating past returns with the future."""
        return 2.0 * self.decay_z[None, :] * self.Z0[:, None] * self.Zt

    @property
    def max_abs_error(self):
        return float(np.max(np.abs(self.reconstructed - self.direct)))


def forward_decomposition_exp(path, t0, max_lag=None):
    """Forward-variance split for an SQ path with exponential kernels.

    ``t0`` is snapped to the grid; lags run over the grid from 0 to
    ``max_lag`` (default: up to the horizon).
    """
    spec = path.spec
    if not isinstance(spec, SQModel):
        raise ConfigurationError("forward decomposition needs an SQ path")
    ek = (1.0, 0.0) if spec.k.is_zero() else spec.k.as_exponential()
    ephi = (1.0, 0.0) if spec.phi.is_zero() else spec.phi.as_exponential()
    if ek is None or ephi is None:
        raise UnsupportedKernelError("forward decomposition is implemented for exponential kernels only")
    n, T = spec.n_steps, spec.horizon
    h = T / n
    if not 0 < t0 < T:
        raise ValidationError(f"t0 must lie in (0, {T}), got {t0!r}")
    i0 = int(round(t0 / h))
    d_max = n - i0 if max_lag is None else int(math.floor(max_lag / h + 1e-9))
    if i0 + d_max > n:
        raise ValidationError("t0 + max_lag exceeds the horizon")
    nu, kappa = ek[0], ephi[0]
    wk = math.sqrt(spec.gamma) * _avg_weights(spec.k, h, n)
    wphi = spec.beta * _avg_weights(spec.phi, h, n)
    V = path.V
    p = V.shape[0]
    G = np.sqrt(V[:, :-1]) * path.dB
    Vh = V[:, :-1] * h
    d = np.arange(d_max + 1)
    Zt = np.zeros((p, d_max + 1))
    Ht = np.zeros((p, d_max + 1))
    for r in range(1, d_max + 1):
        j = i0 + r
        # contributions of steps m in [i0, j)
        Zt[:, r] = G[:, i0:j] @ wk[r - 1 :: -1]
        Ht[:, r] = Vh[:, i0:j] @ wphi[r - 1 :: -1]
    lags = d * h
    Z0 = path.Z[:, i0]
    H0 = path.H[:, i0] if path.H is not None else np.zeros(p)
    ez = np.exp(-nu * lags)
    eh = np.exp(-kappa * lags)
    predictable = spec.mu + (ez**2)[None, :] * Z0[:, None] ** 2 + eh[None, :] * H0[:, None]
    recon = spec.mu + (ez[None, :] * Z0[:, None] + Zt) ** 2 + Ht + eh[None, :] * H0[:, None]
    return ForwardDecomposition(lags, Z0, H0, predictable, Zt, Ht, recon, V[:, i0 : i0 + d_max + 1], ez, eh)


__all__ = [
    "DEFAULT_N_STEPS",
    "ForwardDecomposition",
    "MacroPath",
    "NUModel",
    "PQModel",
    "RoughHestonRef",
    "SQModel",
    "forward_decomposition_exp",
    "model_from_dict",
    "model_to_dict",
    "simulate_limit",
    "simulate_nu",
    "simulate_pq",
    "simulate_rough_heston",
    "simulate_sq",
]
