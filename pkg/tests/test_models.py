import math

import numpy as np
import pytest

from majorant import numerics as nm
from majorant.models import (
    BMDrift,
    CPPExp,
    GBM1D,
    GBMMulti,
    IndexPut,
    MinPut,
    Power,
    Put,
    Square,
    cpp_grid_states,
    eval_payoff,
    gbm_terminal_states,
    simulate_cpp_path,
    simulate_gbm_path,
)


# ---------------------------------------------------------------------------
# Payoffs
# ---------------------------------------------------------------------------

def test_min_put_value():
    assert eval_payoff(MinPut(100.0), np.array([80.0, 120.0])) == 20.0


def test_power_clips_negative():
    assert eval_payoff(Power(2.5), np.array([-1.0])) == 0.0
    assert eval_payoff(Power(2.5), np.array([4.0])) == pytest.approx(32.0)


def test_index_put_value():
    val = eval_payoff(IndexPut(10.0, [1.0, 1.0]), np.array([0.7, 0.2]))
    assert val == pytest.approx(10.0 - math.exp(0.7) - math.exp(0.2), abs=1e-12)
    # reference tables print the truncated 6.764
    assert val == pytest.approx(6.764, abs=1e-3)


def test_put_and_square():
    assert eval_payoff(Put(100.0), np.array([90.0])) == 10.0
    assert eval_payoff(Put(100.0), np.array([110.0])) == 0.0
    assert eval_payoff(Square(), np.array([-3.0])) == 9.0


def test_payoffs_nonnegative_and_continuous():
    rng = np.random.default_rng(0)
    payoffs = [Put(100.0), MinPut(100.0), Power(1.5), Square(),
               IndexPut(10.0, [1.0, 1.0])]
    dims = [1, 2, 1, 1, 2]
    for payoff, d in zip(payoffs, dims):
        x = rng.uniform(-2.0, 3.0, size=(200, d)) * (50.0 if d == 1 else 1.0)
        base = payoff(np.abs(x) + 0.1) if isinstance(payoff, (Put, MinPut)) else payoff(x)
        assert np.all(base >= 0.0)
        pert = x + rng.uniform(-1e-7, 1e-7, size=x.shape)
        moved = payoff(np.abs(pert) + 0.1) if isinstance(payoff, (Put, MinPut)) else payoff(pert)
        assert np.max(np.abs(moved - base)) < 1e-4


def test_payoff_dimension_mismatch():
    with pytest.raises(ValueError):
        eval_payoff(Put(100.0), np.array([1.0, 2.0]))


# ---------------------------------------------------------------------------
# GBM simulation
# ---------------------------------------------------------------------------

def test_gbm_zero_vol_limit():
    # sigma must stay positive; a tiny vol reproduces the deterministic drift
    model = GBM1D(r=0.05, sigma=1e-12)
    path = simulate_gbm_path(model, [100.0], dt=0.1, T=1.0, stream=nm.make_rng(1))
    assert np.allclose(path.states[:, 0], 100.0 * np.exp(0.05 * path.times), rtol=1e-9)


def test_gbm_discounted_martingale():
    model = GBM1D(r=0.06, sigma=0.4)
    T = 0.5
    states = gbm_terminal_states(model, [100.0], np.array([0.0, T]), 100_000,
                                 nm.make_rng(2))
    xT = states[:, -1, 0]
    disc = np.exp(-model.r * T) * xT
    se = disc.std() / math.sqrt(len(disc))
    assert abs(disc.mean() - 100.0) < 4.0 * se


def test_gbm_log_variance():
    model = GBM1D(r=0.06, sigma=0.4)
    T = 0.5
    states = gbm_terminal_states(model, [100.0], np.array([0.0, T]), 100_000,
                                 nm.make_rng(3))
    logs = np.log(states[:, -1, 0] / 100.0)
    var = logs.var()
    # CLT bound for the variance of a normal sample
    se = math.sqrt(2.0 / len(logs)) * model.sigma ** 2 * T
    assert abs(var - model.sigma ** 2 * T) < 4.0 * se


def test_gbm_refinement_invariance():
    model = GBM1D(r=0.06, sigma=0.4)
    T = 0.5
    means = []
    for steps in (1, 10, 100):
        times = np.linspace(0.0, T, steps + 1)
        states = gbm_terminal_states(model, [100.0], times, 40_000, nm.make_rng(4))
        means.append(np.exp(-model.r * T) * states[:, -1, 0].mean())
    for m in means:
        assert abs(m - 100.0) < 0.6


def test_gbm_multi_correlation():
    rho = np.array([[1.0, 0.7], [0.7, 1.0]])
    model = GBMMulti(r=0.0, sigmas=[0.3, 0.3], rho=rho)
    states = gbm_terminal_states(model, [1.0, 1.0], np.array([0.0, 1.0]),
                                 60_000, nm.make_rng(5))
    logs = np.log(states[:, -1, :])
    corr = np.corrcoef(logs.T)[0, 1]
    assert abs(corr - 0.7) < 0.02


# ---------------------------------------------------------------------------
# Compound Poisson simulation
# ---------------------------------------------------------------------------

def test_cpp_pure_drift():
    model = CPPExp(c=-1.0, lam=0.0, alpha=1.0, r=0.1)
    path = simulate_cpp_path(model, 2.0, T=3.0, stream=nm.make_rng(6))
    assert np.allclose(path.states[:, 0], 2.0 - path.times)
    assert path.jump_times.size == 0


def test_cpp_mean_increment():
    model = CPPExp(c=-1.0, lam=0.5, alpha=1.0, r=0.1)
    T = 2.0
    states = cpp_grid_states(model, 0.0, np.array([0.0, T]), 100_000,
                             nm.make_rng(7))
    inc = states[:, -1]
    expect = model.c * T + model.lam * T / model.alpha
    se = inc.std() / math.sqrt(len(inc))
    assert abs(inc.mean() - expect) < 4.0 * se


def test_cpp_jump_count():
    model = CPPExp(c=-1.0, lam=2.0, alpha=1.0, r=0.1)
    T = 1.5
    counts = [simulate_cpp_path(model, 0.0, T, nm.make_rng(8).derive(i)).jump_times.size
              for i in range(4000)]
    counts = np.asarray(counts, dtype=float)
    se = counts.std() / math.sqrt(len(counts))
    assert abs(counts.mean() - model.lam * T) < 4.0 * se


def test_cpp_path_records_jumps_on_grid():
    model = CPPExp(c=-2.0, lam=3.0, alpha=2.0, r=0.1)
    path = simulate_cpp_path(model, 1.0, T=2.0, stream=nm.make_rng(9))
    assert path.times[0] == 0.0 and path.times[-1] == 2.0
    for jt in path.jump_times:
        assert np.min(np.abs(path.times - jt)) < 1e-12
