"""Process dynamics, payoff evaluation and exact-step path simulation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm


# ---------------------------------------------------------------------------
# Process models (discount rate r carried on each variant)
# ---------------------------------------------------------------------------

@dataclass
class GBM1D:
    r: float
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ValueError("sigma must be positive")
        if self.r < 0.0:
            raise ValueError("r must be nonnegative")

    @property
    def dim(self) -> int:
        return 1


@dataclass
class GBMMulti:
    r: float
    sigmas: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.sigmas = np.asarray(self.sigmas, dtype=float)
        self.rho = np.asarray(self.rho, dtype=float)
        if np.any(self.sigmas <= 0.0):
            raise ValueError("vols must be positive")
        d = len(self.sigmas)
        if self.rho.shape != (d, d) or not np.allclose(np.diag(self.rho), 1.0):
            raise ValueError("rho must be (d, d) with unit diagonal")
        nm.cholesky_factor(self.rho)   # raises NotPositiveDefinite if bad

    @property
    def dim(self) -> int:
        return len(self.sigmas)


@dataclass
class BMDrift:
    mu: np.ndarray
    cov: np.ndarray
    r: float

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        nm.cholesky_factor(self.cov)

    @property
    def dim(self) -> int:
        return len(self.mu)


@dataclass
class CPPExp:
    """Compound Poisson with negative drift and Exp(alpha) upward jumps."""

    c: float
    lam: float
    alpha: float
    r: float

    def __post_init__(self):
        if self.c >= 0.0:
            raise ValueError("drift c must be negative")
        if self.lam < 0.0 or self.alpha <= 0.0:
            raise ValueError("need lam >= 0 and alpha > 0")

    @property
    def dim(self) -> int:
        return 1

    @property
    def kernel_exponent(self) -> float:
        return self.alpha + self.lam / self.c


# ---------------------------------------------------------------------------
# Payoffs
# ---------------------------------------------------------------------------

@dataclass
class Put:
    K: float

    def __post_init__(self):
        if self.K <= 0.0:
            raise ValueError("K must be positive")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != 1:
            raise ValueError("put payoff takes one asset")
        return np.maximum(self.K - x[:, 0], 0.0)


@dataclass
class MinPut:
    K: float

    def __post_init__(self):
        if self.K <= 0.0:
            raise ValueError("K must be positive")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.maximum(self.K - x.min(axis=1), 0.0)


@dataclass
class IndexPut:
    """Put on a weighted basket of exponentials; states live in log space."""

    K: float
    weights: np.ndarray = field(default_factory=lambda: np.array([1.0]))

    def __post_init__(self):
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if self.K <= 0.0 or np.any(self.weights <= 0.0):
            raise ValueError("K and weights must be positive")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != len(self.weights):
            raise ValueError("state dimension mismatch")
        return np.maximum(self.K - np.exp(x) @ self.weights, 0.0)


@dataclass
class Power:
    gamma: float

    def __post_init__(self):
        if self.gamma < 1.0:
            raise ValueError("gamma must be >= 1")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.maximum(x[:, 0], 0.0) ** self.gamma


@dataclass
class Square:
    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return x[:, 0] ** 2


def eval_payoff(payoff, x) -> np.ndarray:
    """Evaluate a payoff at one state (d,) or a batch (m, d)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    out = payoff(np.atleast_2d(x))
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# Path simulation
# ---------------------------------------------------------------------------

@dataclass
class SamplePath:
    times: np.ndarray            # (m+1,)
    states: np.ndarray           # (m+1, d)
    jump_times: np.ndarray | None = None


def simulate_gbm_path(model, x0, dt: float, T: float,
                      stream: nm.RandomStream) -> SamplePath:
    """Exact lognormal stepping (no Euler bias in the marginals)."""
    if dt <= 0.0 or T < dt:
        raise ValueError("need 0 < dt <= T")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if np.any(x0 <= 0.0):
        raise ValueError("GBM states must be positive")
    if isinstance(model, GBM1D):
        sigmas = np.array([model.sigma])
        L = np.eye(1)
    else:
        sigmas = model.sigmas
        L = nm.cholesky_factor(model.rho)
    d = len(sigmas)
    n = int(round(T / dt))
    times = np.linspace(0.0, n * dt, n + 1)
    drift = (model.r - 0.5 * sigmas ** 2) * dt
    z = stream.normals(n * d).reshape(n, d) @ L.T
    log_steps = drift + sigmas * np.sqrt(dt) * z
    logs = np.concatenate([[np.zeros(d)], np.cumsum(log_steps, axis=0)])
    return SamplePath(times=times, states=x0 * np.exp(logs))


def simulate_cpp_path(model: CPPExp, x0: float, T: float,
                      stream: nm.RandomStream, n_grid: int = 50) -> SamplePath:
    """Event-driven simulation: exponential inter-arrivals, Exp(alpha) jumps,
    linear drift in between.  States are recorded at the jump times merged
    with a uniform grid."""
    if T <= 0.0:
        raise ValueError("T must be positive")
    jump_times = []
    t = 0.0
    while True:
        if model.lam <= 0.0:
            break
        t += -np.log1p(-stream.uniform()) / model.lam
        if t >= T:
            break
        jump_times.append(t)
    jumps = np.array([-np.log1p(-stream.uniform()) / model.alpha
                      for _ in jump_times])
    grid = np.linspace(0.0, T, n_grid + 1)
    times = np.unique(np.concatenate([grid, jump_times]))
    jt = np.asarray(jump_times)
    # position = x0 + c t + sum of jumps that occurred at or before t
    cum = np.array([jumps[jt <= t + 1e-15].sum() for t in times])
    states = x0 + model.c * times + cum
    return SamplePath(times=times, states=states[:, None], jump_times=jt)


def gbm_terminal_states(model, x0, times: np.ndarray, n_paths: int,
                        stream: nm.RandomStream) -> np.ndarray:
    """States of many GBM paths on a common time grid, shape (n_paths, m+1, d).

    Block-vectorized version of ``simulate_gbm_path`` used by the Monte-Carlo
    lower bound; the marginals are exact.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if isinstance(model, GBM1D):
        sigmas = np.array([model.sigma])
        L = np.eye(1)
    else:
        sigmas = model.sigmas
        L = nm.cholesky_factor(model.rho)
    d = len(sigmas)
    dts = np.diff(times)
    n = len(dts)
    z = stream.normals(n_paths * n * d).reshape(n_paths, n, d)
    z = z @ L.T
    steps = (model.r - 0.5 * sigmas ** 2) * dts[None, :, None] + \
        sigmas * np.sqrt(dts)[None, :, None] * z
    logs = np.concatenate([np.zeros((n_paths, 1, d)), np.cumsum(steps, axis=1)],
                          axis=1)
    return x0 * np.exp(logs)


def cpp_grid_states(model: CPPExp, x0: float, times: np.ndarray, n_paths: int,
                    stream: nm.RandomStream) -> np.ndarray:
    """Compound-Poisson-with-drift states on a grid, shape (n_paths, m+1).

    Increments over each grid cell are sampled exactly: Poisson jump counts
    with Gamma-distributed jump sums."""
    dts = np.diff(times)
    gen = stream._gen
    x = np.full(n_paths, float(x0))
    out = np.empty((n_paths, len(times)))
    out[:, 0] = x
    for j, dt in enumerate(dts):
        counts = gen.poisson(model.lam * dt, size=n_paths)
        sums = np.where(counts > 0,
                        gen.gamma(np.maximum(counts, 1), 1.0 / model.alpha),
                        0.0)
        x = x + model.c * dt + sums
        out[:, j + 1] = x
    stream.counter += n_paths * len(dts) * 2
    return out
