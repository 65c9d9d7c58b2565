"""Estimators linking simulated paths to the model's qualitative claims.

* :func:`holder_estimate`: structure-function regression for path regularity.
* :func:`weak_zumbach`: past-returns/future-volatility covariance asymmetry.
* :func:`ks_distance` and :func:`convergence_ladder`: distance between the
  law of a rescaled microscopic functional and its macroscopic counterpart
  across a ladder of horizons.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy import stats
from sklearn.base import BaseEstimator

from ._random import as_generator, stream
from .exceptions import ConfigurationError, InsufficientDataError, UndefinedExponentError, ValidationError
from .kernels import PurelyQuadratic, ScaledKernelPair, Stable, Zero
from .qhawkes import QHawkesParams, intensity_at, simulate
from .volterra import NUModel, PQModel, SQModel, simulate_limit

HOLDER_QS = (0.5, 1.0, 2.0)
MIN_HOLDER_POINTS = 256
SMOOTH_SLOPE = 0.99
ZUMBACH_BLOCK = 16
MIN_ANCHORS = 30
N_BOOT = 1000
# standard deviation of the Kolmogorov distribution
_KOLMOGOROV_SD = 0.2603


# --- Hölder regularity ------------------------------------------------------


@dataclass
class HolderResult:
    H: float
    r2: float
    slopes: dict
    lags: list
    smooth: bool

    @property
    def label(self):
        return ">= 1 (smooth)" if self.smooth else f"{self.H:.4f}"


def _dyadic_lags(n, lag_range=None):
    hi = n // 8
    lo = 1
    if lag_range is not None:
        lo, hi = int(lag_range[0]), int(lag_range[1])
        if lo < 1 or hi > n // 8 or lo > hi:
            raise ValidationError(f"lags must lie in [1, {n // 8}], got {lag_range}")
    lags = [1 << i for i in range(int(math.log2(hi)) + 1) if lo <= (1 << i) <= hi]
    if len(lags) < 2:
        raise ValidationError("need at least two dyadic lags")
    return lags


def holder_estimate(path, q_list=HOLDER_QS, lag_range=None):
    """Hölder exponent of a path sampled on a uniform grid.

    Regresses ``log E|x(t+l) - x(t)|^q`` on ``log l`` over dyadic lags up to
    ``n/8`` and averages ``slope/q`` over ``q``. A 2-d input holds several
    paths whose increments are pooled.
    """
    x = np.atleast_2d(np.asarray(path, dtype=float))
    n = x.shape[1]
    if n < MIN_HOLDER_POINTS:
        raise ValidationError(f"need at least {MIN_HOLDER_POINTS} grid points, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("path contains non-finite values")
    bad_q = [q for q in q_list if q not in HOLDER_QS]
    if bad_q or not q_list:
        raise ValidationError(f"q values must be drawn from {HOLDER_QS}, got {list(q_list)}")
    lags = _dyadic_lags(n, lag_range)
    logl = np.log(lags)
    slopes = {}
    r2s = []
    for q in q_list:
        moments = np.array([np.mean(np.abs(x[:, l:] - x[:, :-l]) ** q) for l in lags])
        if np.any(moments <= 0):
            raise UndefinedExponentError("path has zero increments at some lag; exponent undefined")
        fit = stats.linregress(logl, np.log(moments))
        slopes[q] = float(fit.slope)
        r2s.append(fit.rvalue**2)
    H = float(np.mean([slopes[q] / q for q in q_list]))
    return HolderResult(H, float(min(r2s)), slopes, lags, H >= SMOOTH_SLOPE)


class HolderEstimator(BaseEstimator):
    """Estimator wrapper: ``fit(path)`` sets ``H_``, ``r2_`` and ``slopes_``."""

    def __init__(self, q_list=HOLDER_QS, lag_range=None):
        self.q_list = q_list
        self.lag_range = lag_range

    def fit(self, X, y=None):
        res = holder_estimate(X, self.q_list, self.lag_range)
        self.H_ = res.H
        self.r2_ = res.r2
        self.slopes_ = res.slopes
        self.smooth_ = res.smooth
        return self


# --- weak Zumbach -----------------------------------------------------------


@dataclass
class ZumbachResult:
    statistic: float
    ci_low: float
    ci_high: float
    window: float
    n_anchors: int
    n_paths: int
    level: float
    proxy: str

    @property
    def excludes_zero(self):
        return self.ci_low > 0 or self.ci_high < 0


def _block_features(price, vol, block, dt):
    """Block returns and block variances, shape ``(n_paths, n_blocks)``."""
    n_inc = price.shape[1] - 1
    K = n_inc // block
    r = np.diff(price[:, : K * block + 1], axis=1)
    b = r.reshape(price.shape[0], K, block).sum(axis=2)
    if vol is None:
        v = b**2
    else:
        seg = vol[:, : K * block + 1]
        trap = 0.5 * dt * (seg[:, 1:] + seg[:, :-1])
        v = trap.reshape(vol.shape[0], K, block).sum(axis=2)
    return b, v


def _window_sums(a, w):
    c = np.concatenate((np.zeros((a.shape[0], 1)), np.cumsum(a, axis=1)), axis=1)
    return c[:, w:] - c[:, :-w]


def _zumbach_pairs(b, v, w):
    """Per-anchor past/future features; anchors run over ``w..K-w``."""
    S = _window_sums(b, w)  # S[:, i] = sum of blocks i..i+w-1
    R = _window_sums(v, w)
    K = b.shape[1]
    past = slice(0, K - 2 * w + 1)
    fut = slice(w, K - w + 1)
    return S[:, past] ** 2, R[:, past], S[:, fut] ** 2, R[:, fut]


def _cov(x, y, axis):
    xm = x - x.mean(axis=axis, keepdims=True)
    ym = y - y.mean(axis=axis, keepdims=True)
    return (xm * ym).sum(axis=axis) / (x.shape[axis] - 1)


def _asym_1d(r2p, rvp, r2f, rvf):
    return _cov(r2p, rvf, 0) - _cov(rvp, r2f, 0)


def _asym_2d(r2p, rvp, r2f, rvf):
    return float(np.mean(_cov(r2p, rvf, 0) - _cov(rvp, r2f, 0)))


def weak_zumbach(
    price,
    vol=None,
    window=4,
    block=ZUMBACH_BLOCK,
    dt=1.0,
    burn_in=0.0,
    n_boot=N_BOOT,
    level=0.99,
    random_state=None,
):
    """Covariance asymmetry between past returns and future volatility.

    ``C = Cov(r^2_past, RV_future) - Cov(RV_past, r^2_future)`` where each
    window spans ``window`` blocks of ``block`` grid steps, ``r^2`` is the
    squared window return and ``RV`` the window's realized variance (sum of
    squared block returns, or the integral of ``vol`` when a variance path is
    given). A 1-d ``price`` is a single long path: covariances are taken over
    anchor times and the CI comes from a moving-block bootstrap over anchors.
    A 2-d ``price`` holds independent paths: covariances are taken across
    paths at each anchor, averaged over anchors, and paths are resampled.
    """
    price = np.asarray(price, dtype=float)
    single = price.ndim == 1
    P = np.atleast_2d(price)
    V = None if vol is None else np.atleast_2d(np.asarray(vol, dtype=float))
    if V is not None and V.shape != P.shape:
        raise ValidationError("vol must have the same shape as price")
    skip = int(round(burn_in * (P.shape[1] - 1)))
    P = P[:, skip:]
    if V is not None:
        V = V[:, skip:]
    n_inc = P.shape[1] - 1
    if window * block * 4 >= n_inc:
        raise ValidationError("window must be shorter than a quarter of the sample")
    b, v = _block_features(P, V, block, dt)
    feats = _zumbach_pairs(b, v, window)
    n_anchors = feats[0].shape[1]
    if n_anchors < MIN_ANCHORS:
        raise InsufficientDataError(f"only {n_anchors} windows available, need {MIN_ANCHORS}")
    rng = as_generator(random_state)
    alpha = 1.0 - level
    if single:
        f = [a[0] for a in feats]
        stat = float(_asym_1d(*f))
        L = window
        n_blk = math.ceil(n_anchors / L)
        starts = rng.integers(0, n_anchors - L + 1, size=(n_boot, n_blk))
        idx = (starts[:, :, None] + np.arange(L)).reshape(n_boot, -1)[:, :n_anchors]
        boot = _cov(f[0][idx], f[3][idx], 1) - _cov(f[1][idx], f[2][idx], 1)
    else:
        if P.shape[0] < 2:
            raise InsufficientDataError("need at least two paths for cross-path covariances")
        stat = _asym_2d(*feats)
        npth = P.shape[0]
        boot = np.empty(n_boot)
        for i in range(n_boot):
            pick = rng.integers(0, npth, size=npth)
            boot[i] = _asym_2d(*(a[pick] for a in feats))
    lo, hi = np.quantile(boot, [alpha / 2, 1 - alpha / 2])
    return ZumbachResult(
        stat,
        float(lo),
        float(hi),
        window * block * dt,
        n_anchors,
        P.shape[0],
        level,
        "realized" if vol is None else "true_variance",
    )


class WeakZumbach(BaseEstimator):
    """Estimator wrapper around :func:`weak_zumbach`; ``fit(price, vol)``."""

    def __init__(self, window=4, block=ZUMBACH_BLOCK, dt=1.0, burn_in=0.0, n_boot=N_BOOT, level=0.99, random_state=None):
        self.window = window
        self.block = block
        self.dt = dt
        self.burn_in = burn_in
        self.n_boot = n_boot
        self.level = level
        self.random_state = random_state

    def fit(self, X, y=None):
        res = weak_zumbach(
            X, y, self.window, self.block, self.dt, self.burn_in, self.n_boot, self.level, self.random_state
        )
        self.statistic_ = res.statistic
        self.ci_ = (res.ci_low, res.ci_high)
        self.result_ = res
        return self


# --- distances ----------------------------------------------------------------


def ks_distance(a, b):
    """Two-sample Kolmogorov-Smirnov statistic ``sup |F_a - F_b|``."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValidationError("both samples must be non-empty")
    pts = np.concatenate((a, b))
    fa = np.searchsorted(a, pts, side="right") / a.size
    fb = np.searchsorted(b, pts, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def ks_mc_error(n, m):
    """Null standard deviation of the two-sample KS statistic (asymptotic)."""
    return _KOLMOGOROV_SD * math.sqrt((n + m) / (n * m))


def ks_null_quantile(n, m, q):
    """Asymptotic ``q``-quantile of the two-sample KS statistic under the null."""
    return float(stats.kstwobign.ppf(q)) * math.sqrt((n + m) / (n * m))


# --- convergence ladder -------------------------------------------------------


FUNCTIONALS = ("X1", "V", "P1")


@dataclass
class LadderCell:
    T: float
    functional: str
    ks: float
    n_micro: int
    n_macro: int
    mc_error: float


@dataclass
class DiagnosticsReport:
    holder: dict = None
    zumbach: dict = None
    convergence: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def ks_sequence(self):
        return [c.ks for c in self.convergence]

    def monotone_within_noise(self, factor=2.0, max_inversions=None):
        """True when every increase in KS is within ``factor`` MC errors."""
        inv = 0
        for a, b in zip(self.convergence, self.convergence[1:]):
            if b.ks > a.ks:
                if b.ks - a.ks > factor * math.hypot(a.mc_error, b.mc_error):
                    return False
                inv += 1
        return max_inversions is None or inv <= max_inversions

    def to_dict(self):
        return {
            "holder": self.holder,
            "zumbach": self.zumbach,
            "convergence": [asdict(c) for c in self.convergence],
            "metadata": self.metadata,
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def ladder_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["T", "functional", "ks", "n_reps"])
            for c in self.convergence:
                w.writerow([repr(float(c.T)), c.functional, repr(c.ks), c.n_micro])


def _micro_params(macro, mother_k, mother_phi, T, schedule=None):
    if isinstance(macro, PQModel):
        pair = ScaledKernelPair(mother_k, Zero(), PurelyQuadratic(macro.gamma), T)
        k_T, phi_T = pair.kernels()
        return QHawkesParams(macro.mu, phi_T, k_T, horizon=float(T))
    if isinstance(macro, SQModel):
        pair = ScaledKernelPair(mother_k, mother_phi, Stable(macro.gamma, macro.beta), T)
        k_T, phi_T = pair.kernels()
        return QHawkesParams(macro.mu, phi_T, k_T, horizon=float(T))
    if isinstance(macro, NUModel):
        if schedule is None:
            raise ConfigurationError("nearly unstable ladder needs a schedule")
        return schedule.hawkes_params(mother_k, mother_phi, T)
    raise ConfigurationError(f"no microscopic counterpart for {type(macro).__name__}")


def _micro_functional(params, ev, functional, t_fixed, schedule):
    T = params.horizon
    if schedule is None:
        x_scale = 1.0 / T
        p_scale = 1.0 / math.sqrt(T)
        v_scale = 1.0
    else:
        a, mu_T = schedule.a_T(T), schedule.mu_T(T)
        x_scale = (1.0 - a) / (T * mu_T)
        p_scale = math.sqrt(x_scale)
        v_scale = (1.0 - a) / mu_T
    if functional == "X1":
        return len(ev) * x_scale
    if functional == "P1":
        return float(ev.signs.sum()) * p_scale
    return intensity_at(params, ev, t_fixed * T) * v_scale


def _micro_batch(params, seed, ti, reps, functional, t_fixed, schedule):
    out = []
    for r in reps:
        ev = simulate(params, stream(seed, r, ti))
        out.append(_micro_functional(params, ev, functional, t_fixed, schedule))
    return out


def _macro_functional(path, functional, t_fixed):
    if functional == "X1":
        return path.integrated_variance()[:, -1]
    if functional == "P1":
        return path.P[:, -1]
    j = int(round(t_fixed / (path.grid[1] - path.grid[0])))
    return path.V[:, j]


def _derived_seed(seed, tag):
    ss = np.random.SeedSequence(int(seed), spawn_key=(tag,))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def convergence_ladder(
    macro,
    mother_k,
    T_ladder,
    n_reps,
    seed,
    mother_phi=Zero(),
    functional="X1",
    t_fixed=0.5,
    n_macro=None,
    schedule=None,
    n_jobs=1,
    chunk=50,
):
    """KS distance between micro and macro laws of a functional, per horizon.

    ``macro`` is the limit model; the microscopic parameters are derived from
    it and the mother kernels for each ``T``. ``n_macro`` (default
    ``n_reps``) macroscopic samples form the reference law. Results do not
    depend on ``n_jobs``.
    """
    T_ladder = [float(T) for T in T_ladder]
    if len(T_ladder) < 3:
        raise ConfigurationError("a convergence ladder needs at least three horizons")
    if functional not in FUNCTIONALS:
        raise ConfigurationError(f"functional must be one of {FUNCTIONALS}, got {functional!r}")
    n_macro = n_reps if n_macro is None else int(n_macro)
    params = [_micro_params(macro, mother_k, mother_phi, T, schedule) for T in T_ladder]
    path = simulate_limit(macro, _derived_seed(seed, 1), n_macro)
    ref = _macro_functional(path, functional, t_fixed)
    jobs = [
        (ti, list(range(s, min(s + chunk, n_reps))))
        for ti in range(len(T_ladder))
        for s in range(0, n_reps, chunk)
    ]
    results = Parallel(n_jobs=n_jobs)(
        delayed(_micro_batch)(params[ti], seed, ti, reps, functional, t_fixed, schedule) for ti, reps in jobs
    )
    samples = [[] for _ in T_ladder]
    for (ti, _), vals in zip(jobs, results):
        samples[ti].extend(vals)
    cells = [
        LadderCell(T, functional, ks_distance(np.array(s), ref), n_reps, n_macro, ks_mc_error(n_reps, n_macro))
        for T, s in zip(T_ladder, samples)
    ]
    assumptions = []
    if not isinstance(macro, PQModel):
        assumptions.append("the simulated limit is taken to represent the relevant limit point")
    meta = {
        "seed": int(seed),
        "n_reps": int(n_reps),
        "n_macro": n_macro,
        "macro_clip_fraction": path.clip_fraction,
        "assumptions": assumptions,
    }
    report = DiagnosticsReport(convergence=cells, metadata=meta)
    report.micro_samples = [np.array(s) for s in samples]
    report.macro_samples = ref
    return report


__all__ = [
    "DiagnosticsReport",
    "HolderEstimator",
    "HolderResult",
    "LadderCell",
    "WeakZumbach",
    "ZumbachResult",
    "convergence_ladder",
    "holder_estimate",
    "ks_distance",
    "ks_mc_error",
    "ks_null_quantile",
    "weak_zumbach",
]
