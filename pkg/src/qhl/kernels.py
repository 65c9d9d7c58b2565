"""Kernel functions for the self-excitation (phi) and feedback (k) terms.

Every kernel is a frozen dataclass, callable on scalars or arrays, zero on the
negative half-line and non-increasing on ``[0, inf)``. The ``Scaled`` wrapper
implements the horizon-indexed families ``A * base(t / s)`` used by the
rescaling regimes.
"""

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate

from .exceptions import ConfigurationError, DivergenceError, DomainError, ValidationError
from .mittag_leffler import mittag_leffler

NORM_RTOL = 1e-8


class Kernel:
    """Common interface. Subclasses implement ``_value`` on ``t >= 0``."""

    nonincreasing = True
    variant = None

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape)
        pos = t >= 0
        if np.any(pos):
            out[pos] = self._value(t[pos])
        return out if out.ndim else float(out)

    def _value(self, t):
        raise NotImplementedError

    def integral(self, t):
        """``int_0^t kernel(s) ds`` (0 for ``t <= 0``)."""
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape)
        pos = t > 0
        if np.any(pos):
            out[pos] = self._integral(t[pos])
        return out if out.ndim else float(out)

    def tail_integral(self, x):
        """``int_x^inf kernel(s) ds``."""
        return self.l1() - self.integral(x)

    def l1(self):
        raise NotImplementedError

    def l2_sq(self):
        raise NotImplementedError

    @property
    def value_at_zero(self):
        return float(self._value(np.zeros(1))[0])

    def as_exponential(self):
        """``(rate, scale)`` if the kernel is ``scale * exp(-rate t)``, else None."""
        return None

    def is_zero(self):
        return False

    def lag_below(self, threshold, horizon):
        """Smallest lag L <= horizon with kernel(L) < threshold (horizon if none)."""
        if self(horizon) >= threshold:
            return float(horizon)
        lo, hi = 0.0, float(horizon)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if self(mid) >= threshold:
                lo = mid
            else:
                hi = mid
        return hi

    def to_dict(self):
        raise NotImplementedError


@dataclass(frozen=True)
class Zero(Kernel):
    variant = "zero"

    def _value(self, t):
        return np.zeros_like(t)

    def _integral(self, t):
        return np.zeros_like(t)

    def l1(self):
        return 0.0

    def l2_sq(self):
        return 0.0

    def is_zero(self):
        return True

    def lag_below(self, threshold, horizon):
        return 0.0

    def to_dict(self):
        return {"variant": "zero"}


@dataclass(frozen=True)
class Exponential(Kernel):
    """``scale * exp(-rate * t)``."""

    rate: float
    scale: float
    variant = "exponential"

    def __post_init__(self):
        if not (self.rate > 0 and math.isfinite(self.rate)):
            raise DomainError(f"exponential rate must be positive, got {self.rate!r}")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise DomainError(f"exponential scale must be positive, got {self.scale!r}")

    def _value(self, t):
        return self.scale * np.exp(-self.rate * t)

    def _integral(self, t):
        return -(self.scale / self.rate) * np.expm1(-self.rate * t)

    def tail_integral(self, x):
        return self.scale / self.rate * np.exp(-self.rate * np.asarray(x, dtype=float))

    def l1(self):
        return self.scale / self.rate

    def l2_sq(self):
        return self.scale**2 / (2.0 * self.rate)

    def as_exponential(self):
        return self.rate, self.scale

    def lag_below(self, threshold, horizon):
        if threshold >= self.scale:
            return 0.0
        return min(float(horizon), math.log(self.scale / threshold) / self.rate)

    def to_dict(self):
        return {"variant": "exponential", "rate": self.rate, "scale": self.scale}


@lru_cache(maxsize=64)
def _ml_unit_l2_sq(alpha):
    """``int_0^inf f^{alpha,1}(t)^2 dt`` by adaptive quadrature."""
    f = MittagLeffler(alpha, 1.0)

    def sq(t):
        return f(t) ** 2

    total = 0.0
    err = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        # split at the singularity and where the tail becomes algebraic
        for a, b in ((0.0, 1e-6), (1e-6, 1.0), (1.0, 50.0), (50.0, np.inf)):
            v, e = integrate.quad(sq, a, b, epsabs=0.0, epsrel=1e-11, limit=500)
            total += v
            err += e
    if err > NORM_RTOL * total:
        warnings.warn(f"L2 norm of Mittag-Leffler kernel only accurate to {err / total:.1e}")
    return total


@dataclass(frozen=True)
class MittagLeffler(Kernel):
    """Mittag-Leffler density ``lam t^(alpha-1) E_{alpha,alpha}(-lam t^alpha)``."""

    alpha: float
    lam: float
    variant = "mittag_leffler"

    def __post_init__(self):
        if not (0 < self.alpha <= 1):
            raise DomainError(f"Mittag-Leffler alpha must lie in (0, 1], got {self.alpha!r}")
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise DomainError(f"Mittag-Leffler lambda must be positive, got {self.lam!r}")

    def _value(self, t):
        a, lam = self.alpha, self.lam
        if a == 1.0:
            return lam * np.exp(-lam * t)
        out = np.full(t.shape, np.inf)
        pos = t > 0
        tp = t[pos]
        out[pos] = lam * tp ** (a - 1.0) * mittag_leffler(a, a, -lam * tp**a)
        return out

    def _integral(self, t):
        a, lam = self.alpha, self.lam
        if a == 1.0:
            return -np.expm1(-lam * t)
        # 1 - E_{a,1}(-x) = x E_{a,a+1}(-x), free of cancellation for small x
        x = lam * t**a
        return x * mittag_leffler(a, a + 1.0, -x)

    def tail_integral(self, x):
        x = np.asarray(x, dtype=float)
        return mittag_leffler(self.alpha, 1.0, -self.lam * x**self.alpha)

    def l1(self):
        return 1.0

    def l2_sq(self):
        if self.alpha <= 0.5:
            raise DivergenceError(
                f"||f^{{alpha,lambda}}||_2 is infinite for alpha={self.alpha} <= 1/2", norm="l2"
            )
        if self.alpha == 1.0:
            return self.lam / 2.0
        # f^{a,lam}(t) = lam^(1/a) f^{a,1}(lam^(1/a) t)
        return self.lam ** (1.0 / self.alpha) * _ml_unit_l2_sq(self.alpha)

    def as_exponential(self):
        if self.alpha == 1.0:
            return self.lam, self.lam
        return None

    def to_dict(self):
        return {"variant": "mittag_leffler", "alpha": self.alpha, "lambda": self.lam}


@dataclass(frozen=True)
class PowerLawTail(Kernel):
    """``K * (x0 + t)^-(1 + alpha)``.

    The tail constant ``lim alpha x^alpha int_x^inf phi`` equals ``K`` and the
    L1 norm is ``K / (alpha x0^alpha)``; use :meth:`normalized` for unit mass.
    """

    alpha: float
    K: float
    x0: float
    variant = "power_law_tail"

    def __post_init__(self):
        if not (0 < self.alpha < 1):
            raise DomainError(f"power-law alpha must lie in (0, 1), got {self.alpha!r}")
        if not (self.K > 0 and math.isfinite(self.K)):
            raise DomainError(f"power-law K must be positive, got {self.K!r}")
        if not (self.x0 > 0 and math.isfinite(self.x0)):
            raise DomainError(f"power-law cutoff x0 must be positive, got {self.x0!r}")

    @classmethod
    def normalized(cls, alpha, x0):
        return cls(alpha, alpha * x0**alpha, x0)

    def _value(self, t):
        return self.K * (self.x0 + t) ** (-1.0 - self.alpha)

    def _integral(self, t):
        a = self.alpha
        return self.K / a * (self.x0 ** (-a) - (self.x0 + t) ** (-a))

    def tail_integral(self, x):
        return self.K / self.alpha * (self.x0 + np.asarray(x, dtype=float)) ** (-self.alpha)

    def l1(self):
        return self.K / (self.alpha * self.x0**self.alpha)

    def l2_sq(self):
        a = self.alpha
        return self.K**2 / ((1.0 + 2.0 * a) * self.x0 ** (1.0 + 2.0 * a))

    def lag_below(self, threshold, horizon):
        lag = (self.K / threshold) ** (1.0 / (1.0 + self.alpha)) - self.x0
        return float(min(max(lag, 0.0), horizon))

    def to_dict(self):
        return {"variant": "power_law_tail", "alpha": self.alpha, "K": self.K, "x0": self.x0}


@dataclass(frozen=True)
class Scaled(Kernel):
    """``amplitude * base(t / time_scale)``."""

    base: Kernel
    amplitude: float
    time_scale: float = 1.0
    variant = "scaled"

    def __post_init__(self):
        if not (self.amplitude >= 0 and math.isfinite(self.amplitude)):
            raise DomainError(f"amplitude must be non-negative, got {self.amplitude!r}")
        if not (self.time_scale > 0 and math.isfinite(self.time_scale)):
            raise DomainError(f"time_scale must be positive, got {self.time_scale!r}")

    def _value(self, t):
        return self.amplitude * self.base._value(t / self.time_scale)

    def _integral(self, t):
        return self.amplitude * self.time_scale * self.base._integral(t / self.time_scale)

    def tail_integral(self, x):
        return self.amplitude * self.time_scale * self.base.tail_integral(np.asarray(x) / self.time_scale)

    def l1(self):
        return self.amplitude * self.time_scale * self.base.l1()

    def l2_sq(self):
        return self.amplitude**2 * self.time_scale * self.base.l2_sq()

    def as_exponential(self):
        e = self.base.as_exponential()
        if e is None:
            return None
        return e[0] / self.time_scale, e[1] * self.amplitude

    def is_zero(self):
        return self.amplitude == 0.0 or self.base.is_zero()

    def lag_below(self, threshold, horizon):
        if self.amplitude == 0.0:
            return 0.0
        inner = self.base.lag_below(threshold / self.amplitude, horizon / self.time_scale)
        return min(float(horizon), inner * self.time_scale)

    def simplify(self):
        """Collapse to a plain variant where one exists."""
        if self.is_zero():
            return Zero()
        e = self.as_exponential()
        if e is not None:
            return Exponential(*e)
        if isinstance(self.base, Scaled):
            inner = self.base
            return Scaled(inner.base, self.amplitude * inner.amplitude, self.time_scale * inner.time_scale)
        return self

    def to_dict(self):
        return {
            "variant": "scaled",
            "base": self.base.to_dict(),
            "amplitude": self.amplitude,
            "time_scale": self.time_scale,
        }


_FIELDS = {
    "zero": (),
    "exponential": ("rate", "scale"),
    "mittag_leffler": ("alpha", "lambda"),
    "power_law_tail": ("alpha", "K", "x0"),
    "scaled": ("base", "amplitude", "time_scale"),
}


def kernel_from_dict(d):
    """Build a kernel from its JSON object form (inverse of ``to_dict``)."""
    if not isinstance(d, dict) or "variant" not in d:
        raise ValidationError(f"kernel spec must be an object with a 'variant' field, got {d!r}")
    variant = d["variant"]
    if variant not in _FIELDS:
        raise ValidationError(f"unknown kernel variant {variant!r}")
    fields = _FIELDS[variant]
    extra = set(d) - set(fields) - {"variant"}
    if extra:
        raise ValidationError(f"unknown fields for {variant} kernel: {sorted(extra)}")
    missing = [f for f in fields if f not in d and not (variant == "scaled" and f == "time_scale")]
    if missing:
        raise ValidationError(f"missing fields for {variant} kernel: {missing}")
    if variant == "zero":
        return Zero()
    if variant == "exponential":
        return Exponential(float(d["rate"]), float(d["scale"]))
    if variant == "mittag_leffler":
        return MittagLeffler(float(d["alpha"]), float(d["lambda"]))
    if variant == "power_law_tail":
        return PowerLawTail(float(d["alpha"]), float(d["K"]), float(d["x0"]))
    return Scaled(kernel_from_dict(d["base"]), float(d["amplitude"]), float(d.get("time_scale", 1.0)))


def eval_kernel(spec, t):
    """Evaluate ``spec`` at ``t >= 0``; ``+inf`` at a singular origin."""
    t_arr = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t_arr)):
        raise DomainError("kernel argument must be finite")
    if np.any(t_arr < 0):
        raise DomainError("kernel argument must be non-negative")
    return spec(t)


def kernel_norms(spec):
    """Return ``(int spec, int spec^2)`` over ``[0, inf)``."""
    return spec.l1(), spec.l2_sq()


def normalize_l2(spec):
    """Rescale ``spec`` to unit L2 norm."""
    return Scaled(spec, 1.0 / math.sqrt(spec.l2_sq()), 1.0)


def ml_density(alpha, lam, t):
    """``f^{alpha,lam}(t)``, with ``+inf`` at ``t = 0`` for ``alpha < 1``."""
    return MittagLeffler(alpha, lam)(t)


def integrated_ml(alpha, lam, t):
    """``F^{alpha,lam}(t) = 1 - E_{alpha,1}(-lam t^alpha)``."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or not np.all(np.isfinite(t_arr)):
        raise DomainError("integrated_ml needs finite t >= 0")
    return MittagLeffler(alpha, lam).integral(t)


def tail_constant(phi, x):
    """``alpha x^alpha int_x^inf phi`` for a power-law-tailed ``phi``."""
    base = phi.base if isinstance(phi, Scaled) else phi
    if not isinstance(base, PowerLawTail):
        raise ConfigurationError("tail constant is defined for power-law-tailed kernels only")
    return base.alpha * x**base.alpha * float(phi.tail_integral(x))


# --- horizon-indexed kernel families -------------------------------------


@dataclass(frozen=True)
class PurelyQuadratic:
    gamma: float


@dataclass(frozen=True)
class Stable:
    gamma: float
    beta: float


@dataclass(frozen=True)
class NearlyUnstable:
    a_T: float


_UNIT_RTOL = 1e-6


def _check_unit(value, what):
    if abs(value - 1.0) > _UNIT_RTOL:
        raise ConfigurationError(f"{what} must equal 1, got {value:.10g}")


@dataclass(frozen=True)
class ScaledKernelPair:
    """Mother kernels plus the regime that turns them into ``(k_T, phi_T)``."""

    mother_k: Kernel
    mother_phi: Kernel
    regime: object
    horizon: float

    def __post_init__(self):
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ConfigurationError(f"horizon must be positive, got {self.horizon!r}")
        k, phi, r = self.mother_k, self.mother_phi, self.regime
        if not k.is_zero():
            _check_unit(math.sqrt(k.l2_sq()), "||mother_k||_2")
        if isinstance(r, PurelyQuadratic):
            if not 0 < r.gamma < 1:
                raise ConfigurationError(f"gamma must lie in (0, 1), got {r.gamma}")
            if not phi.is_zero():
                raise ConfigurationError("purely quadratic regime requires a zero phi kernel")
        elif isinstance(r, Stable):
            if r.gamma < 0 or r.beta < 0 or not 0 < r.gamma + r.beta < 1:
                raise ConfigurationError(
                    f"stable regime needs 0 < gamma + beta < 1, got gamma + beta = {r.gamma + r.beta}"
                )
            if not phi.is_zero():
                _check_unit(phi.l1(), "||mother_phi||_1")
        elif isinstance(r, NearlyUnstable):
            if not 0.5 < r.a_T < 1:
                raise ConfigurationError(f"a_T must lie in (1/2, 1) so that 2 a_T - 1 > 0, got {r.a_T}")
            if not phi.is_zero():
                _check_unit(phi.l1(), "||mother_phi||_1")
            if not k.is_zero() and not math.isfinite(k.value_at_zero):
                raise ConfigurationError("nearly unstable regime needs k(0) < inf")
        else:
            raise ConfigurationError(f"unknown regime {r!r}")

    def kernels(self):
        """Return ``(k_T, phi_T)`` as kernel objects."""
        k, phi, r, T = self.mother_k, self.mother_phi, self.regime, self.horizon
        if isinstance(r, PurelyQuadratic):
            return Scaled(k, math.sqrt(r.gamma / T), T).simplify(), Zero()
        if isinstance(r, Stable):
            return (
                Scaled(k, math.sqrt(r.gamma / T), T).simplify(),
                Scaled(phi, r.beta / T, T).simplify(),
            )
        return (
            Scaled(k, math.sqrt((1.0 - r.a_T) / T), T).simplify(),
            Scaled(phi, 2.0 * r.a_T - 1.0, 1.0).simplify(),
        )

    def stability_sum(self):
        k_T, phi_T = self.kernels()
        return k_T.l2_sq() + phi_T.l1()


def scaled_eval(pair, which, t):
    """Evaluate ``k_T`` (``which='k'``) or ``phi_T`` (``which='phi'``) at ``t``."""
    k_T, phi_T = pair.kernels()
    if which == "k":
        return eval_kernel(k_T, t)
    if which == "phi":
        return eval_kernel(phi_T, t)
    raise ConfigurationError(f"which must be 'k' or 'phi', got {which!r}")
