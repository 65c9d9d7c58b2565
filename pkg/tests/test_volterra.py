import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from oracles import picard_linear_volterra, sq_deterministic_ode
from qhl import (
    ConfigurationError,
    Exponential,
    MittagLeffler,
    NUModel,
    PQModel,
    RoughHestonRef,
    SQModel,
    StabilityError,
    UnsupportedKernelError,
    ValidationError,
    Zero,
    forward_decomposition_exp,
    holder_estimate,
    integrated_ml,
    normalize_l2,
    simulate_limit,
    simulate_nu,
    simulate_pq,
    simulate_rough_heston,
    simulate_sq,
)
from qhl.volterra import _normals, _simulate_quadratic, model_from_dict, model_to_dict

K_EXP = Exponential(1.0, math.sqrt(2.0))
PHI_EXP = Exponential(1.0, 1.0)


def _sq(n=512, gamma=0.3, beta=0.4, k=K_EXP, phi=PHI_EXP):
    return SQModel(1.0, gamma, beta, k, phi, n_steps=n)


def _within(sample, target, n_se=3.0):
    se = sample.std(ddof=1) / math.sqrt(sample.size)
    return abs(sample.mean() - target) <= n_se * se


# --- PQ ---------------------------------------------------------------------------


def test_pq_without_feedback_is_brownian():
    p = simulate_pq(PQModel(1.7, 0.5, Zero(), n_steps=64), 3, n_paths=2000)
    assert np.all(p.V == 1.7)
    var = p.P[:, -1].var(ddof=1)
    assert abs(var - 1.7) <= 3 * 1.7 * math.sqrt(2 / 1999)


def test_pq_mean_matches_picard_solution():
    spec = PQModel(1.0, 0.25, K_EXP, n_steps=256)
    p = simulate_pq(spec, 7, n_paths=4000)
    grid, m = picard_linear_volterra(1.0, lambda x: 0.25 * K_EXP(x) ** 2, 1.0, 4000)
    for t in (0.25, 0.5, 1.0):
        assert _within(p.V[:, int(t * 256)], m[int(t * 4000)])


def test_pq_moment_bound():
    p = simulate_pq(PQModel(1.0, 0.6, K_EXP, n_steps=256), 1, n_paths=1000)
    v = p.V[:, -1]
    assert v.mean() <= 1.0 / (1 - 0.6) + 3 * v.std(ddof=1) / math.sqrt(v.size)


def test_start_values():
    k_ml = normalize_l2(MittagLeffler(0.8, 1.0))
    assert np.all(simulate_pq(PQModel(1.2, 0.3, k_ml, n_steps=32), 0, 4).V[:, 0] == 1.2)
    sq = simulate_sq(_sq(32), 0, 4)
    assert np.all(sq.V[:, 0] == 1.0) and np.all(sq.H[:, 0] == 0) and np.all(sq.Z[:, 0] == 0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        nu = simulate_nu(NUModel(0.7, 1.0, 1.0, K_EXP, n_steps=32), 0, 4)
    assert np.all(nu.V[:, 0] == 0) and np.all(nu.Z[:, 0] == 0) and np.all(nu.M[:, 0] == 0)
    assert np.all(nu.P[:, 0] == 0)


@pytest.mark.parametrize("k", [K_EXP, normalize_l2(MittagLeffler(0.8, 1.0))], ids=["exp", "ml"])
def test_structural_identity_pq(k):
    p = simulate_pq(PQModel(0.9, 0.3, k, n_steps=256), 5, n_paths=8)
    assert np.array_equal(p.V, 0.9 + p.Z**2)


def test_structural_identity_sq():
    p = simulate_sq(_sq(256), 5, n_paths=8)
    assert np.array_equal(p.V, 1.0 + p.H + p.Z**2)
    assert np.all(p.V >= 1.0)


@given(st.integers(0, 2**63 - 1), st.floats(0.05, 0.9))
@settings(max_examples=15, deadline=None)
def test_sq_with_zero_beta_is_pq(seed, gamma):
    pq = simulate_pq(PQModel(1.0, gamma, K_EXP, n_steps=64), seed, n_paths=2)
    sq = simulate_sq(SQModel(1.0, gamma, 0.0, K_EXP, PHI_EXP, n_steps=64), seed, n_paths=2)
    assert np.array_equal(pq.V, sq.V) and np.array_equal(pq.P, sq.P)


def test_batch_equals_single_paths():
    batch = simulate_sq(_sq(64), 9, n_paths=3)
    for i in range(3):
        one = simulate_sq(_sq(64), 9, n_paths=1, first_index=i)
        assert np.array_equal(batch.V[i], one.V[0])
    assert np.array_equal(batch[1].V, batch.V[1:2])


# --- SQ ---------------------------------------------------------------------------


def test_sq_deterministic_resolvent():
    spec = SQModel(1.0, 0.0, 0.5, Zero(), PHI_EXP, n_steps=4096)
    p = simulate_sq(spec, 0)
    t = np.array([0.25, 0.5, 1.0])
    ode = sq_deterministic_ode(1.0, 0.5, 1.0, t)
    closed = 1.0 + 0.5 * (1 - np.exp(-0.5 * t)) / 0.5
    assert np.allclose(ode, closed, atol=1e-10)
    assert np.allclose(p.V[0, (t * 4096).astype(int)], closed, atol=1e-4)


def test_sq_moment_bound():
    p = simulate_sq(_sq(256), 2, n_paths=1000)
    v = p.V[:, -1]
    assert v.mean() <= 1.0 / (1 - 0.7) + 3 * v.std(ddof=1) / math.sqrt(v.size)


def test_semimartingale_part_of_feedback_square():
    # for k = sqrt(2 nu) e^{-nu t}: d(Z^2) = (gamma k(0)^2 V - 2 nu Z^2) dt + 2 sqrt(gamma) k(0) Z sqrt(V) dB
    nu, g, fine = 1.0, 0.3, 4096
    k0 = math.sqrt(2 * nu)
    dB_fine = _normals(11, 100, fine, 1 / fine)
    errs, hs = [], []
    for n in (256, 512, 1024, 2048, 4096):
        dB = dB_fine.reshape(100, n, fine // n).sum(axis=2)
        V, Z, _, _ = _simulate_quadratic(1.0, g, 0.0, K_EXP, Zero(), n, 1.0, dB)
        h = 1 / n
        drift = g * k0**2 * V - 2 * nu * Z**2
        fv = np.sum(0.5 * h * (drift[:, 1:] + drift[:, :-1]), axis=1)
        mart = 2 * math.sqrt(g) * k0 * np.sum(Z[:, :-1] * np.sqrt(V[:, :-1]) * dB, axis=1)
        errs.append(np.mean(np.abs(Z[:, -1] ** 2 - fv - mart)))
        hs.append(h)
    rate = stats.linregress(np.log(hs), np.log(errs)).slope
    assert rate >= 0.4
    assert errs[-1] < 0.03


@pytest.mark.parametrize("n", [2048])
def test_price_bracket_matches_integrated_variance(n):
    p = simulate_sq(_sq(n), 1, n_paths=100)
    qv = np.sum(np.diff(p.P, axis=1) ** 2, axis=1)
    iv = p.integrated_variance()[:, -1]
    assert np.mean(np.abs(qv / iv - 1)) <= 0.05


# --- forward variance -------------------------------------------------------------


def test_forward_decomposition_identity():
    p = simulate_sq(SQModel(1.0, 0.3, 0.4, Exponential(20.0, math.sqrt(40.0)), Exponential(20.0, 20.0), n_steps=1024), 2, 50)
    fd = forward_decomposition_exp(p, 0.5)
    assert fd.max_abs_error <= 1e-10
    assert np.allclose(fd.predictable[:, 0], p.V[:, 512], rtol=0, atol=1e-13)
    assert np.all(fd.Zt[:, 0] == 0) and np.all(fd.Ht[:, 0] == 0)
    # the predictable part decays towards mu as the lag grows
    assert np.all(np.diff(fd.decay_z) < 0) and np.all(np.diff(fd.decay_h) < 0)


def test_forward_decomposition_rejects_other_kernels():
    k_ml = normalize_l2(MittagLeffler(0.8, 1.0))
    p = simulate_sq(SQModel(1.0, 0.3, 0.4, k_ml, PHI_EXP, n_steps=64), 0)
    with pytest.raises(UnsupportedKernelError):
        forward_decomposition_exp(p, 0.5)
    with pytest.raises(ConfigurationError):
        forward_decomposition_exp(simulate_pq(PQModel(1.0, 0.3, K_EXP, n_steps=64), 0), 0.5)
    with pytest.raises(ValidationError):
        forward_decomposition_exp(simulate_sq(_sq(64), 0), 1.0)


# --- NU ---------------------------------------------------------------------------


def test_nu_mean_without_feedback():
    p = simulate_nu(NUModel(0.7, 1.0, 1.0, Zero(), n_steps=512), 3, n_paths=2000)
    assert _within(p.V[:, -1], 0.5 * integrated_ml(0.7, 1.0, 1.0))
    assert np.all(p.V >= 0)
    assert np.array_equal(p.V, np.maximum(p.V_raw, 0))


def test_nu_integral_form_self_consistency():
    # X_t = int 1/2 F(t-s)(1 + Z^2) ds + int 1/2 f(t-s) M_s ds / sqrt(lam mu*)
    a, lam, mus = 0.7, 1.0, 1.0
    errs, hs = [], []
    for n in (256, 512, 1024, 2048):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            p = simulate_nu(NUModel(a, lam, mus, K_EXP, n_steps=n), 4, n_paths=50)
        h, t = 1 / n, p.grid
        X = p.integrated_variance()[:, -1]
        F = integrated_ml(a, lam, t)
        F_mid = integrated_ml(a, lam, 1 - (t[:-1] + h / 2))
        A = np.sum(0.5 * F_mid * (1 + p.Z[:, :-1] ** 2) * h, axis=1)
        w = F[::-1][:-1] - F[::-1][1:]
        B = np.sum(0.5 / math.sqrt(lam * mus) * w * p.M[:, :-1], axis=1)
        errs.append(np.mean(np.abs(X - A - B)))
        hs.append(h)
    assert stats.linregress(np.log(hs), np.log(errs)).slope >= a - 0.5
    assert errs[-1] < 1e-3


def test_nu_brackets():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        p = simulate_nu(NUModel(0.75, 1.0, 1.0, K_EXP, n_steps=2048), 1, n_paths=100)
    iv = p.integrated_variance()[:, -1]
    keep = iv > 0.05  # paths stuck near zero have no usable ratio
    for proc in (p.P, p.M):
        qv = np.sum(np.diff(proc, axis=1) ** 2, axis=1)
        assert np.mean(np.abs(qv[keep] / iv[keep] - 1)) <= 0.05


@pytest.mark.parametrize("alpha", [0.6, 0.75])
def test_nu_regularity(alpha):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        p = simulate_nu(NUModel(alpha, 1.0, 1.0, K_EXP, n_steps=4096), 5, n_paths=10)
    assert abs(holder_estimate(p.V).H - (alpha - 0.5)) <= 0.07


def test_nu_clip_warning():
    with pytest.warns(UserWarning, match="clipped"):
        simulate_nu(NUModel(0.6, 1.0, 0.05, K_EXP, n_steps=256), 0, n_paths=20)


# --- rough Heston --------------------------------------------------------------------


def test_rough_heston_fixed_points():
    assert np.all(simulate_rough_heston(RoughHestonRef(0.04, 1.0, 0.6, 0.04, 0.0, 0.0), 1, 3).V == 0.04)
    assert np.all(simulate_rough_heston(RoughHestonRef(0.04, 0.0, 0.6, 0.2, 0.3, -0.5), 1, 3).V == 0.04)


def test_rough_heston_relaxes_towards_theta():
    p = simulate_rough_heston(RoughHestonRef(0.04, 2.0, 0.7, 0.1, 0.0, 0.0, n_steps=256), 0)
    assert np.all(np.diff(p.V[0]) > 0) and p.V[0, -1] < 0.1


def test_rough_heston_mean():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        p = simulate_rough_heston(RoughHestonRef(0.04, 1.0, 0.6, 0.04, 0.3, 0.0, n_steps=256), 4, n_paths=2000)
    # the mean of the raw scheme solves the linear equation exactly
    assert _within(p.V_raw[:, -1], 0.04)


def test_rough_heston_theta_table():
    theta = np.linspace(0.04, 0.1, 65)
    spec = RoughHestonRef(0.04, 1.0, 0.6, theta, 0.0, 0.0, n_steps=64)
    assert np.array_equal(spec.theta_grid(), theta)
    with pytest.raises(ConfigurationError):
        RoughHestonRef(0.04, 1.0, 0.6, theta[:10], 0.0, 0.0, n_steps=64)


# --- self-convergence ------------------------------------------------------------------


@pytest.mark.parametrize(
    "spec_of",
    [
        lambda n: PQModel(1.0, 0.3, K_EXP, n_steps=n),
        lambda n: _sq(n),
        lambda n: NUModel(0.7, 1.0, 1.0, K_EXP, n_steps=n),
        lambda n: RoughHestonRef(0.04, 1.0, 0.6, 0.04, 0.3, 0.0, n_steps=n),
    ],
    ids=["pq", "sq", "nu", "rh"],
)
def test_euler_self_convergence(spec_of):
    means = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for n, seed in ((512, 1), (1024, 2)):
            v = simulate_limit(spec_of(n), seed, n_paths=500).V[:, -1]
            means.append((v.mean(), v.var(ddof=1) / v.size))
    (m1, s1), (m2, s2) = means
    assert abs(m1 - m2) <= 3 * math.sqrt(s1 + s2)


# --- specs ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "spec",
    [
        PQModel(1.0, 0.3, K_EXP, n_steps=64),
        _sq(64),
        NUModel(0.7, 1.0, 2.0, K_EXP, n_steps=64),
        RoughHestonRef(0.04, 1.0, 0.6, 0.04, 0.3, -0.7, n_steps=8),
        RoughHestonRef(0.04, 1.0, 0.6, list(np.linspace(0, 1, 9)), 0.3, -0.7, n_steps=8),
    ],
)
def test_model_json_roundtrip(spec):
    d = json.loads(json.dumps(model_to_dict(spec)))
    assert model_from_dict(d) == spec


def test_model_validation():
    with pytest.raises(StabilityError):
        SQModel(1.0, 0.6, 0.6, K_EXP, PHI_EXP)
    with pytest.raises(StabilityError):
        PQModel(1.0, 1.0, K_EXP)
    with pytest.raises(ConfigurationError):
        PQModel(1.0, 0.3, Exponential(1.0, 1.0))  # not unit L2 norm
    with pytest.raises(ConfigurationError):
        NUModel(0.4, 1.0, 1.0, K_EXP)
    with pytest.raises(ConfigurationError):
        NUModel(0.7, 1.0, 1.0, normalize_l2(MittagLeffler(0.8, 1.0)))  # k(0) infinite
    with pytest.raises(ConfigurationError):
        RoughHestonRef(0.04, 1.0, 0.6, 0.04, 0.3, 1.5)
    with pytest.raises(ConfigurationError):
        PQModel(1.0, 0.3, K_EXP, n_steps=0)
    with pytest.raises(ValidationError):
        model_from_dict({**model_to_dict(PQModel(1.0, 0.3, K_EXP)), "sigma": 1})
    with pytest.raises(ConfigurationError):
        simulate_limit(object(), 0)


def test_macro_csv(tmp_path):
    p = simulate_sq(_sq(16), 0, 2)
    p.to_csv(tmp_path / "p.csv", index=1)
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert rows[0] == "t,V,Z,P,H" and len(rows) == 18
    back = np.loadtxt(tmp_path / "p.csv", delimiter=",", skiprows=1)
    assert np.array_equal(back[:, 1], p.V[1])
