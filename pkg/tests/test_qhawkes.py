import math
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from sklearn.base import clone

from oracles import picard_linear_volterra
from qhl import (
    EventStream,
    ExplosionError,
    Exponential,
    MittagLeffler,
    PowerLawTail,
    QHawkesParams,
    QuadraticHawkes,
    Scaled,
    StabilityError,
    UnsupportedKernelError,
    ValidationError,
    Zero,
    compensator,
    intensity_at,
    simulate,
    time_change_residuals,
)
from qhl import qhawkes as qh
from qhl.kernels import Kernel
from qhl.qhawkes import feedback_at, majorant_at

PHI = Exponential(1.0, 1.0)
K = Exponential(1.0, math.sqrt(2.0))


def _params(mu=1.3, phi=Exponential(1.0, 0.3), k=Exponential(1.0, 0.6), T=50.0):
    return QHawkesParams(mu, phi, k, horizon=T)


# --- intensity and envelope ----------------------------------------------------


def test_intensity_examples():
    p = QHawkesParams(1.3, Exponential(1.0, 0.2), Exponential(1.0, 0.5))
    assert intensity_at(p, EventStream([], []), 0.7) == 1.3
    p = QHawkesParams(1.3, Exponential(1.0, 0.2), Exponential(1.0, 0.5))
    one = EventStream([0.0], [1])
    assert intensity_at(p, one, 1.0) == pytest.approx(1.3 + 0.2 * math.exp(-1) + 0.25 * math.exp(-2), rel=1e-15)


def test_intensity_unit_kernels_formula():
    # the literal unit kernels violate stability, so evaluate the formula piecewise
    ev = EventStream([0.0], [1])
    a = PHI(1.0)
    z = K(1.0)
    assert 1.3 + a + z * z == pytest.approx(1.938550, abs=1e-6)
    p = QHawkesParams(1.3, Exponential(1.0, 0.5), Exponential(2.0, 0.5))
    assert intensity_at(p, ev, 1.0) == pytest.approx(1.3 + 0.5 * math.exp(-1) + 0.25 * math.exp(-4), rel=1e-15)


def test_opposite_signs_cancel_in_feedback():
    p = QHawkesParams(1.3, Exponential(1.0, 0.3), Exponential(1.0, 0.6))
    pair = EventStream([0.0, 0.0], [1, -1])
    assert intensity_at(p, pair, 1.0) == pytest.approx(1.3 + 2 * 0.3 * math.exp(-1), rel=1e-15)
    gap = majorant_at(p, pair, 1.0) - intensity_at(p, pair, 1.0)
    assert gap == pytest.approx((2 * 0.6 * math.exp(-1)) ** 2, rel=1e-14)
    # with k = sqrt(2) e^{-t} the gap is 8 e^{-2}
    assert (2 * K(1.0)) ** 2 == pytest.approx(1.082682, abs=1e-6)


def test_majorant_equals_intensity_for_same_signs():
    p = _params()
    ev = EventStream([0.2, 0.9, 1.5, 3.0], [1, 1, 1, 1])
    for t in (0.5, 1.6, 4.0):
        assert majorant_at(p, ev, t) == pytest.approx(intensity_at(p, ev, t), rel=1e-15)
    assert majorant_at(p, EventStream([], []), 2.0) == p.mu


@dataclass(frozen=True)
class Rising(Kernel):
    nonincreasing = False

    def _value(self, t):
        return 0.1 * t * np.exp(-t)

    def l1(self):
        return 0.1

    def l2_sq(self):
        return 0.0025


def test_majorant_rejects_increasing_kernels():
    p = QHawkesParams(1.0, Rising(), Zero())
    with pytest.raises(UnsupportedKernelError):
        majorant_at(p, EventStream([0.1], [1]), 1.0)


@settings(max_examples=100, deadline=None)
@given(
    times=st.lists(st.floats(0.0, 20.0), min_size=0, max_size=25),
    seed=st.integers(0, 2**32 - 1),
    t=st.floats(0.0, 25.0),
)
def test_envelope_dominates_intensity(times, seed, t):
    rng = np.random.default_rng(seed)
    signs = rng.choice([-1, 1], size=len(times))
    ev = EventStream.from_unsorted(times, signs)
    for p in (_params(), QHawkesParams(0.7, PowerLawTail(0.5, 0.2, 1.0), Exponential(3.0, 1.0))):
        lam = intensity_at(p, ev, t)
        assert lam >= p.mu
        assert majorant_at(p, ev, t) >= lam * (1 - 1e-14)


@settings(max_examples=40, deadline=None)
@given(times=st.lists(st.floats(0.0, 10.0), min_size=1, max_size=15), dt=st.floats(1e-3, 5.0))
def test_envelope_nonincreasing_between_events(times, dt):
    ev = EventStream.from_unsorted(times, np.ones(len(times), dtype=np.int8))
    p = QHawkesParams(1.0, PowerLawTail(0.5, 0.2, 1.0), Exponential(2.0, 1.0))
    t0 = ev.times[-1] + 1e-9
    assert majorant_at(p, ev, t0 + dt) <= majorant_at(p, ev, t0) * (1 + 1e-14)


def test_truncated_history_matches_full_sum():
    p = _params(T=400.0)
    ev = simulate(p, 5)
    for t in (50.0, 250.0, 399.0):
        full = intensity_at(p, ev, t, truncate=False)
        assert intensity_at(p, ev, t) == pytest.approx(full, rel=1e-11)


# --- validation ----------------------------------------------------------------


def test_event_stream_validation():
    with pytest.raises(ValidationError):
        EventStream([1.0, 0.5], [1, 1])
    with pytest.raises(ValidationError):
        EventStream([0.5, 1.0], [1, 0])
    with pytest.raises(ValidationError):
        EventStream([0.5], [1, -1])
    ev = EventStream.from_unsorted([2.0, 1.0, 1.0], [1, -1, 1])
    assert ev.times.tolist() == [1.0, 1.0, 2.0] and ev.signs.tolist() == [1, -1, 1]
    assert not ev.is_strict


def test_stability_is_enforced():
    with pytest.raises(StabilityError):
        QHawkesParams(1.0, Exponential(1.0, 0.7), Exponential(1.0, 1.0))
    with pytest.raises(ValidationError):
        QHawkesParams(-1.0)


def test_params_dict_roundtrip():
    p = _params()
    assert QHawkesParams.from_dict(p.to_dict()) == p
    with pytest.raises(ValidationError):
        QHawkesParams.from_dict({"mu": 1.0, "horizn": 3.0})


# --- simulation ------------------------------------------------------------------


def test_poisson_rate():
    ev = simulate(QHawkesParams(1.0, horizon=1000.0), 11)
    assert abs(len(ev) / 1000.0 - 1.0) <= 3 * math.sqrt(1 / 1000)
    assert ev.is_strict and ev.times[-1] <= 1000.0


def test_same_seed_same_stream():
    p = _params()
    a, b = simulate(p, 42), simulate(p, 42)
    assert np.array_equal(a.times, b.times) and np.array_equal(a.signs, b.signs)
    assert not np.array_equal(a.times[:5], simulate(p, 43).times[:5])


def test_explosion_guard():
    p = QHawkesParams(5.0, horizon=1000.0, max_events=100)
    with pytest.raises(ExplosionError):
        simulate(p, 1)


def test_singular_kernels_are_not_simulated():
    p = QHawkesParams(1.0, Zero(), Scaled(MittagLeffler(0.8, 1.0), 0.3, 1.0), horizon=10.0)
    with pytest.raises(UnsupportedKernelError):
        simulate(p, 0)


def test_linear_hawkes_mean_matches_renewal_equation():
    T = 1000.0
    p = QHawkesParams(1.0, Exponential(1.0, 0.5), Zero(), horizon=T)
    counts = np.array([len(simulate(p, s)) for s in range(200)]) / T
    # E[lambda] on [0, 60] by Picard iteration, stationary value beyond
    t, m = picard_linear_volterra(1.0, lambda u: 0.5 * np.exp(-u), t_max=60.0, n=6000)
    head = np.trapezoid(m, t)
    expected = (head + m[-1] * (T - 60.0)) / T
    se = counts.std(ddof=1) / math.sqrt(counts.size)
    assert abs(counts.mean() - expected) <= 3 * se


def test_moment_bound_example():
    p = QHawkesParams(1.0, Exponential(2.0, 0.6), Exponential(1.0, math.sqrt(0.4)), horizon=300.0)
    x = np.array([len(simulate(p, s)) for s in range(100)]) / 300.0
    assert x.mean() <= 1 / (1 - 0.6) + 3 * x.std(ddof=1) / 10


def test_price_is_centered_martingale():
    p = _params(T=100.0)
    runs = [simulate(p, s) for s in range(500)]
    P = np.array([r.signs.sum() for r in runs], dtype=float)
    N = np.array([len(r) for r in runs], dtype=float)
    z = P / math.sqrt(N.mean())
    assert abs(z.mean()) <= 4 * z.std(ddof=1) / math.sqrt(z.size)


def test_bracket_equals_count():
    ev = simulate(_params(), 3)
    grid = np.linspace(0, 50, 17)
    assert np.array_equal(ev.bracket(grid), ev.counts(grid))
    assert ev.price(50.0) == ev.signs.sum()


def test_csv_roundtrip_is_lossless(tmp_path):
    ev = simulate(_params(), 8)
    ev.to_csv(tmp_path / "ev.csv")
    back = EventStream.from_csv(tmp_path / "ev.csv")
    assert np.array_equal(back.times, ev.times) and np.array_equal(back.signs, ev.signs)
    header = (tmp_path / "ev.csv").read_text().splitlines()[0]
    assert header == "time,sign"


# --- compensator and residuals --------------------------------------------------------


def test_compensator_trivial_cases():
    grid = np.linspace(0, 10, 11)
    assert np.allclose(compensator(QHawkesParams(1.7), simulate(QHawkesParams(1.7, horizon=10.0), 1), grid), 1.7 * grid, rtol=0, atol=1e-14)
    assert np.allclose(compensator(_params(), EventStream([], []), grid), 1.3 * grid, rtol=0, atol=1e-14)


def test_compensator_single_event_closed_form():
    nu_p, c_p, nu_k, c_k, t1, mu = 1.5, 0.4, 0.8, 0.5, 2.0, 1.1
    p = QHawkesParams(mu, Exponential(nu_p, c_p), Exponential(nu_k, c_k), horizon=10.0)
    ev = EventStream([t1], [-1])
    grid = np.array([1.0, 2.0, 3.5, 9.0])
    lag = np.maximum(grid - t1, 0.0)
    exact = mu * grid + c_p / nu_p * (1 - np.exp(-nu_p * lag)) + c_k**2 / (2 * nu_k) * (1 - np.exp(-2 * nu_k * lag))
    assert np.allclose(compensator(p, ev, grid), exact, rtol=1e-13)


def test_recursive_and_quadrature_paths_agree():
    p = _params(T=60.0)
    ev = simulate(p, 2)
    grid = np.linspace(0, 60.0, 25)
    nu, c = p.k.as_exponential()
    fast = qh._z_sq_integral_exp(ev.times, ev.signs.astype(float), nu, c, grid)
    slow = qh._z_sq_integral_general(p, ev, grid)
    assert np.allclose(fast, slow, rtol=1e-10, atol=1e-12)
    nu, c = p.phi.as_exponential()
    lin = qh._linear_integral_exp(ev.times, nu, c, grid)
    direct = [np.sum(p.phi.integral(g - ev.times[ev.times < g])) for g in grid]
    assert np.allclose(lin, direct, rtol=1e-12, atol=1e-13)
    # intensity from the recursion used by the thinning loop equals the direct sum
    for t in (5.0, 30.0, 59.0):
        lam = intensity_at(p, ev, t)
        a = np.sum(p.phi(t - ev.times[ev.times < t]))
        z = feedback_at(p, ev, t, strict=True)
        assert lam == pytest.approx(p.mu + a + z * z, rel=1e-10)


def test_compensator_is_nondecreasing():
    p = QHawkesParams(0.8, PowerLawTail(0.5, 0.2, 1.0), Exponential(2.0, 1.0), horizon=60.0)
    ev = simulate(p, 4)
    lam = compensator(p, ev, np.linspace(0, 60, 200))
    assert np.all(np.diff(lam) >= 0)


def test_poisson_residuals_are_gaps():
    p = QHawkesParams(1.0, horizon=200.0)
    ev = simulate(p, 9)
    assert np.allclose(time_change_residuals(p, ev), np.diff(ev.times), rtol=1e-12)
    assert time_change_residuals(p, EventStream([1.0], [1])).size == 0


@pytest.mark.parametrize(
    "params",
    [
        QHawkesParams(1.3, Exponential(2.0, 0.6), Exponential(1.5, 0.9), horizon=1500.0),
        QHawkesParams(1.3, PowerLawTail(0.5, 0.2, 1.0), Exponential(1.5, 0.9), horizon=400.0),
        QHawkesParams(1.0, Zero(), Exponential(0.5, 0.7), horizon=1500.0),
    ],
    ids=["recursive", "general", "pure-quadratic"],
)
def test_residuals_are_unit_exponential(params):
    pvals = [stats.kstest(time_change_residuals(params, simulate(params, s)), "expon").pvalue for s in range(3)]
    assert min(pvals) > 1e-3


def test_corrupted_times_fail_the_residual_check():
    p = QHawkesParams(1.3, Exponential(2.0, 0.6), Exponential(1.5, 0.9), horizon=1500.0)
    ev = simulate(p, 1)
    bad = EventStream(ev.times * 2, ev.signs)
    assert stats.kstest(time_change_residuals(p, bad), "expon").pvalue < 1e-6


def test_estimator_wrapper():
    est = QuadraticHawkes(mu=1.2, phi=Exponential(1.0, 0.3), k=Exponential(1.0, 0.5), horizon=30.0)
    assert clone(est).get_params()["mu"] == 1.2
    ev = est.sample(3)
    assert est.residuals(ev).size == len(ev) - 1
    assert est.intensity(ev, 5.0) >= 1.2
