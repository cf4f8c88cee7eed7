import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import multivariate_normal

from majorant import numerics as nm
from majorant.basis import (
    BasisSet,
    DigitalBlock,
    ExchangeBlock,
    ExpBlock,
    InvalidKernel,
    LevyKernelBlock,
    MultiDigitalBlock,
    ParameterSampler,
    ellipsoid_residual,
    fit_levy_kernel,
    generator_residual,
    levy_kernel_mc,
    make_bs_digital,
    make_exchange_basis,
    make_harmonic_1d,
    make_levy_green_basis,
    make_multi_digital,
    orthant_probability,
    sample_ellipsoid_harmonics,
    sample_parameters,
)
from majorant.models import BMDrift, CPPExp, GBM1D, GBMMulti, gbm_terminal_states


# ---------------------------------------------------------------------------
# 1D harmonic exponentials
# ---------------------------------------------------------------------------

def test_harmonic_1d_unit_vol():
    up, dn = make_harmonic_1d(r=0.1, mu=0.0, sigma=1.0)
    assert up.a[0, 0] == pytest.approx(0.4472, abs=1e-4)
    assert dn.a[0, 0] == pytest.approx(-0.4472, abs=1e-4)
    assert up.a[0, 0] == -dn.a[0, 0]  # exact symmetry for mu = 0


def test_harmonic_1d_with_drift():
    up, dn = make_harmonic_1d(r=0.5, mu=1.0, sigma=1.0)
    assert up.a[0, 0] == pytest.approx(-1.0 + math.sqrt(2.0), abs=1e-12)
    assert dn.a[0, 0] == pytest.approx(-1.0 - math.sqrt(2.0), abs=1e-12)
    for a in (up.a[0, 0], dn.a[0, 0]):
        assert 0.5 * a * a + a - 0.5 == pytest.approx(0.0, abs=1e-12)


def test_harmonic_1d_monotonicity():
    up, dn = make_harmonic_1d(r=0.1, mu=0.0, sigma=1.0)
    xs = np.linspace(-3.0, 3.0, 7)[:, None]
    vu = up.values(0.0, xs)[:, 0]
    vd = dn.values(0.0, xs)[:, 0]
    assert np.all(np.diff(vu) > 0.0)
    assert np.all(np.diff(vd) < 0.0)


# ---------------------------------------------------------------------------
# One-asset digitals
# ---------------------------------------------------------------------------

def _phi_quad(z):
    v, _ = quad(lambda u: math.exp(-0.5 * u * u) / math.sqrt(2 * math.pi), -40.0, z)
    return v


def test_digital_infinite_threshold_is_discount():
    blk = make_bs_digital(1e18, r=0.06, sigma=0.4, T=0.5)
    inf_blk = DigitalBlock(np.array([np.inf]), r=0.06, sigma=0.4, T=0.5)
    for t in (0.0, 0.25, 0.49):
        for x in (5.0, 100.0, 400.0):
            v = inf_blk.values(t, np.array([[x]]))[0, 0]
            assert v == pytest.approx(math.exp(-0.06 * (0.5 - t)), abs=1e-12)
            assert blk.values(t, np.array([[x]]))[0, 0] == pytest.approx(v, abs=1e-9)


def test_digital_at_the_money_value():
    blk = make_bs_digital(100.0, r=0.06, sigma=0.4, T=0.5)
    val = blk.values(0.0, np.array([[100.0]]))[0, 0]
    arg = -(0.06 - 0.5 * 0.4 ** 2) * 0.5 / (0.4 * math.sqrt(0.5))
    expect = math.exp(-0.03) * _phi_quad(arg)
    assert arg == pytest.approx(0.03536, abs=1e-5)
    assert val == pytest.approx(expect, abs=1e-12)
    assert val == pytest.approx(0.4989, abs=5e-4)


def test_digital_terminal_indicator():
    blk = make_bs_digital(100.0, r=0.06, sigma=0.4, T=0.5)
    v = blk.values(0.5, np.array([[90.0], [100.0], [110.0]]))
    assert v[0, 0] == 1.0
    assert v[1, 0] == 0.5
    assert v[2, 0] == 0.0


def test_digital_rejects_bad_domain():
    blk = make_bs_digital(100.0, r=0.06, sigma=0.4, T=0.5)
    with pytest.raises(ValueError):
        blk.values(0.0, np.array([[-1.0]]))


# ---------------------------------------------------------------------------
# Multi-asset digitals
# ---------------------------------------------------------------------------

def test_multi_digital_diagonal_is_product():
    a = np.array([[90.0, 120.0]])
    blk = make_multi_digital(a, r=0.06, sigmas=[0.4, 0.8], rho=np.eye(2), T=0.5)
    d1 = make_bs_digital(90.0, r=0.06, sigma=0.4, T=0.5)
    d2 = make_bs_digital(120.0, r=0.06, sigma=0.8, T=0.5)
    P = np.array([[100.0, 100.0], [80.0, 130.0]])
    v = blk.values(0.1, P)[:, 0]
    f1 = d1.values(0.1, P[:, :1])[:, 0]
    f2 = d2.values(0.1, P[:, 1:])[:, 0]
    disc = math.exp(-0.06 * 0.4)
    assert np.allclose(v, f1 * f2 / disc, rtol=1e-12)


def test_multi_digital_d1_matches_univariate():
    blk = make_multi_digital(np.array([[95.0]]), r=0.06, sigmas=[0.4],
                             rho=np.eye(1), T=0.5)
    uni = make_bs_digital(95.0, r=0.06, sigma=0.4, T=0.5)
    P = np.array([[70.0], [100.0], [130.0]])
    assert np.allclose(blk.values(0.2, P), uni.values(0.2, P), atol=1e-12)


def test_orthant_probability_against_library():
    rho = np.array([[1.0, 0.5, 0.2], [0.5, 1.0, -0.3], [0.2, -0.3, 1.0]])
    rng = np.random.default_rng(5)
    z = rng.uniform(-1.5, 1.5, size=(20, 3))
    mine = orthant_probability(z, rho)
    ref = np.array([multivariate_normal(cov=rho).cdf(zz) for zz in z])
    assert np.max(np.abs(mine - ref)) < 3e-4


def test_multi_digital_correlated_against_mc():
    rho = np.array([[1.0, 0.5], [0.5, 1.0]])
    blk = make_multi_digital(np.array([[100.0, 100.0]]), r=0.06,
                             sigmas=[0.4, 0.8], rho=rho, T=0.5)
    x0 = np.array([100.0, 100.0])
    model = GBMMulti(r=0.06, sigmas=[0.4, 0.8], rho=rho)
    states = gbm_terminal_states(model, x0, np.array([0.0, 0.5]), 1_000_000,
                                 nm.make_rng(10))
    hits = np.all(states[:, -1, :] <= 100.0, axis=1).astype(float)
    p_mc = hits.mean()
    se = hits.std() / math.sqrt(len(hits))
    p_blk = blk.values(0.0, x0[None, :])[0, 0] / math.exp(-0.03)
    assert abs(p_blk - p_mc) < 3.0 * se


def test_multi_digital_terminal_product_indicator():
    blk = make_multi_digital(np.array([[100.0, 90.0]]), r=0.06,
                             sigmas=[0.4, 0.8], rho=np.eye(2), T=0.5)
    v = blk.values(0.5, np.array([[95.0, 80.0], [95.0, 95.0]]))
    assert v[0, 0] == 1.0
    assert v[1, 0] == 0.0


# ---------------------------------------------------------------------------
# Exchange options
# ---------------------------------------------------------------------------

def test_exchange_terminal_intrinsic():
    blk = make_exchange_basis((0, 1), 0.4, 0.8, 0.0, T=0.5)
    v = blk.values(0.5, np.array([[100.0, 100.0], [110.0, 100.0]]))
    assert v[0, 0] == 0.0
    assert v[1, 0] == 10.0


def test_exchange_zero_vol_spread():
    blk = make_exchange_basis((0, 1), 0.4, 0.4, 1.0, T=0.5)   # sig_hat == 0
    v = blk.values(0.499, np.array([[110.0, 100.0]]))[0, 0]
    assert v == pytest.approx(10.0, abs=1e-12)


def test_exchange_against_mc():
    model = GBMMulti(r=0.06, sigmas=[0.4, 0.4], rho=np.eye(2))
    blk = make_exchange_basis((0, 1), 0.4, 0.4, 0.0, T=0.5)
    x0 = np.array([100.0, 100.0])
    states = gbm_terminal_states(model, x0, np.array([0.0, 0.5]), 1_000_000,
                                 nm.make_rng(11))
    pay = math.exp(-0.03) * np.maximum(states[:, -1, 0] - states[:, -1, 1], 0.0)
    se = pay.std() / math.sqrt(len(pay))
    val = blk.values(0.0, x0[None, :])[0, 0]
    assert abs(val - pay.mean()) < 3.0 * se


def test_exchange_dominates_intrinsic():
    blk = make_exchange_basis((0, 1), 0.4, 0.8, 0.0, T=0.5)
    rng = np.random.default_rng(3)
    P = rng.uniform(10.0, 200.0, size=(500, 2))
    for t in (0.0, 0.3):
        v = blk.values(t, P)[:, 0]
        assert np.all(v >= np.maximum(P[:, 0] - P[:, 1], 0.0) - 1e-9)


# ---------------------------------------------------------------------------
# Ellipsoid harmonics
# ---------------------------------------------------------------------------

def test_ellipsoid_1d_recovers_exponents():
    blk = sample_ellipsoid_harmonics([[1.0]], [0.0], 0.1, 40, nm.make_rng(12))
    vals = np.unique(np.round(blk.a[:, 0], 10))
    assert set(np.sign(vals)) == {-1.0, 1.0}
    assert np.allclose(np.abs(blk.a[:, 0]), math.sqrt(0.2), atol=1e-12)


def test_ellipsoid_residual_zero():
    cov = np.array([[1.0, 0.3], [0.3, 2.0]])
    mu = np.array([0.1, -0.2])
    blk = sample_ellipsoid_harmonics(cov, mu, 0.25, 60, nm.make_rng(13))
    assert np.max(ellipsoid_residual(cov, mu, 0.25, blk.a)) < 1e-12


def test_ellipsoid_harmonicity_fd():
    blk = sample_ellipsoid_harmonics(np.eye(2), np.zeros(2), 0.1, 10,
                                     nm.make_rng(14))
    model = BMDrift(mu=np.zeros(2), cov=np.eye(2), r=0.1)
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.uniform(-1.5, 1.5, size=2)
        res = generator_residual(blk, model, 0.0, x)
        assert np.max(res) < 1e-4


# ---------------------------------------------------------------------------
# Resolvent kernel basis
# ---------------------------------------------------------------------------

JUMP_MODEL = CPPExp(c=-1000.0, lam=500.0, alpha=1.0, r=2.0)


def test_kernel_exponent_from_parameters():
    assert CPPExp(c=-2.0, lam=1.0, alpha=1.0, r=2.0).kernel_exponent == \
        pytest.approx(0.5, abs=1e-14)
    assert JUMP_MODEL.kernel_exponent == pytest.approx(0.5, abs=1e-14)


def test_kernel_constant_above_zero():
    blk = make_levy_green_basis(alpha=1.0, c=-1000.0, lam=500.0, r=2.0, a=[5.0])
    assert blk.kernel(0.5) == blk.kernel(7.3)
    assert blk.kernel(-0.5) == pytest.approx(blk.A_neg * math.exp(-0.5 * blk.rho),
                                             rel=1e-12)


def test_kernel_values_match_occupation_oracle():
    blk = make_levy_green_basis(alpha=1.0, c=-1000.0, lam=500.0, r=2.0, a=[5.0])
    edges = np.arange(-3.5, 3.5001, 0.05)
    mc = levy_kernel_mc(JUMP_MODEL, edges, 1_000_000, nm.make_rng(15))
    centers = 0.5 * (edges[:-1] + edges[1:])
    for x in (-1.0, -0.1, 0.5):
        k = int(np.argmin(np.abs(centers - x)))
        assert abs(blk.kernel(centers[k]) - mc[k]) / mc[k] < 0.02


def test_kernel_rejects_nonpositive_exponent():
    with pytest.raises(InvalidKernel):
        make_levy_green_basis(alpha=1.0, c=-1.0, lam=1.5, r=2.0, a=[1.0])


def test_kernel_rejects_shape_mismatch():
    # at slow drift the discounted occupation decays on the positive side,
    # so the flat branch misfits by far more than the 5% gate
    with pytest.raises(InvalidKernel):
        make_levy_green_basis(alpha=1.0, c=-1.0, lam=0.5, r=2.0, a=[1.0],
                              n_paths=100_000)


def test_kernel_basis_shape_and_monotonicity():
    blk = make_levy_green_basis(alpha=1.0, c=-1000.0, lam=500.0, r=2.0,
                                a=[2.0, 8.0])
    ys = np.linspace(-5.0, 15.0, 81)[:, None]
    v = blk.values(0.0, ys)
    assert v.shape == (81, 2)
    assert np.all(np.diff(v, axis=0) >= -1e-15)     # nondecreasing members
    assert np.all(v > 0.0)


# ---------------------------------------------------------------------------
# Parameter sampling
# ---------------------------------------------------------------------------

def test_sample_interval_reproducible():
    s = ParameterSampler(kind="interval", n=100, lo=0.0, hi=100.0)
    a1 = sample_parameters(s, nm.make_rng(77))
    a2 = sample_parameters(s, nm.make_rng(77))
    assert np.array_equal(a1, a2)
    assert a1.min() >= 0.0 and a1.max() <= 100.0 and len(a1) == 100


def test_sample_box():
    s = ParameterSampler(kind="box", n=50, lo=[0.0, 10.0], hi=[1.0, 20.0])
    a = sample_parameters(s, nm.make_rng(78))
    assert a.shape == (50, 2)
    assert np.all(a[:, 0] <= 1.0) and np.all(a[:, 1] >= 10.0)


def test_sample_ellipsoid_kind():
    s = ParameterSampler(kind="ellipsoid", n=25, cov=np.eye(2),
                         mu=np.zeros(2), rate=0.1)
    a = sample_parameters(s, nm.make_rng(79))
    assert np.max(ellipsoid_residual(np.eye(2), np.zeros(2), 0.1, a)) < 1e-12


# ---------------------------------------------------------------------------
# Module-wide invariants
# ---------------------------------------------------------------------------

def test_harmonicity_residuals_all_families():
    rng = np.random.default_rng(21)
    dig = DigitalBlock(np.array([60.0, 100.0, 140.0, np.inf]),
                       r=0.06, sigma=0.4, T=0.5)
    gbm1 = GBM1D(r=0.06, sigma=0.4)
    for _ in range(20):
        t = rng.uniform(0.0, 0.45)
        x = rng.uniform(40.0, 180.0, size=1)
        assert np.max(generator_residual(dig, gbm1, t, x)) < 1e-4

    rho = np.array([[1.0, 0.3], [0.3, 1.0]])
    gbm2 = GBMMulti(r=0.06, sigmas=[0.4, 0.8], rho=rho)
    # finite differencing amplifies the orthant quadrature error, so the
    # correlated block gets a denser point set for this check
    mdig = MultiDigitalBlock(np.array([[90.0, 110.0], [60.0, 60.0]]),
                             r=0.06, sigmas=[0.4, 0.8], rho=rho, T=0.5,
                             qmc_points=65536)
    exch = ExchangeBlock(np.array([[0, 1], [1, 0]]), sigmas=np.array([0.4, 0.8]),
                         rho=rho, T=0.5)
    for _ in range(20):
        t = rng.uniform(0.0, 0.45)
        x = rng.uniform(50.0, 150.0, size=2)
        assert np.max(generator_residual(mdig, gbm2, t, x)) < 1e-4
        assert np.max(generator_residual(exch, gbm2, t, x)) < 1e-4


def test_values_nonnegative_everywhere():
    rng = np.random.default_rng(22)
    dig = DigitalBlock(np.array([50.0, 100.0, np.inf]), r=0.06, sigma=0.4, T=0.5)
    exch = ExchangeBlock(np.array([[0, 1]]), sigmas=np.array([0.4, 0.8]),
                         rho=np.eye(2), T=0.5)
    expb = ExpBlock(np.array([[0.4, -0.3]]))
    ker = LevyKernelBlock(np.array([3.0]), rho=0.5, A_neg=1e-3, A_pos=2e-3)
    for _ in range(10):
        t = rng.uniform(0.0, 0.5)
        P1 = rng.uniform(1.0, 300.0, size=(1000, 1))
        P2 = rng.uniform(1.0, 300.0, size=(1000, 2))
        PR = rng.uniform(-10.0, 20.0, size=(1000, 2))
        assert np.all(dig.values(t, P1) >= 0.0)
        assert np.all(exch.values(t, P2) >= 0.0)
        assert np.all(expb.values(t, PR) >= 0.0)
        assert np.all(ker.values(t, PR[:, :1]) >= 0.0)


def test_analytic_partials_match_fd():
    rng = np.random.default_rng(23)
    dig = DigitalBlock(np.array([60.0, 100.0, 140.0]), r=0.06, sigma=0.4, T=0.5)
    mdig = MultiDigitalBlock(np.array([[90.0, 110.0]]), r=0.06,
                             sigmas=[0.4, 0.8], rho=np.eye(2), T=0.5)
    exch = ExchangeBlock(np.array([[0, 1]]), sigmas=np.array([0.4, 0.8]),
                         rho=np.eye(2), T=0.5)
    cases = [(dig, 1), (mdig, 2), (exch, 2)]
    for _ in range(100):
        blk, d = cases[rng.integers(len(cases))]
        t = rng.uniform(0.02, 0.4)
        x = rng.uniform(70.0, 140.0, size=d)

        def f(tt, xx):
            return blk.values(tt, xx[None, :])[0]

        grad = blk.grad_x(t, x)
        for i in range(d):
            e = np.zeros(d)
            e[i] = 1e-3 * max(1.0, x[i]) * 1e-2
            fd = (f(t, x + e) - f(t, x - e)) / (2.0 * e[i])
            denom = np.maximum(np.abs(fd), 1e-8)
            assert np.max(np.abs(grad[:, i] - fd) / denom) < 1e-6
        h = 1e-6 * 0.5
        fd_t = (f(t + h, x) - f(t - h, x)) / (2.0 * h)
        denom = np.maximum(np.abs(fd_t), 1e-8)
        assert np.max(np.abs(blk.dtime(t, x) - fd_t) / denom) < 1e-6


def test_basis_set_stacks_blocks():
    dig = DigitalBlock(np.array([80.0, 120.0]), r=0.06, sigma=0.4, T=0.5)
    inf_dig = DigitalBlock(np.array([np.inf]), r=0.06, sigma=0.4, T=0.5)
    bs = BasisSet([dig, inf_dig])
    assert bs.n == 3
    P = np.array([[90.0], [110.0]])
    v = bs.values(0.1, P)
    assert v.shape == (2, 3)
    assert np.allclose(v[:, :2], dig.values(0.1, P))
    assert np.allclose(v[:, 2], inf_dig.values(0.1, P)[:, 0])
    g = bs.grad_x(0.1, np.array([100.0]))
    assert g.shape == (3, 1)
