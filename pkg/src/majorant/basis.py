"""Harmonic basis families and their random parameter sampling.

Each family is a vector-valued block: one object holds the parameters of all
its member functions and evaluates them in one vectorized pass.  A block with
a single member is an ordinary basis function.  Conventions:

* ``values(t, P)`` takes a scalar or (m,) time array and an (m, d) state
  array and returns the (m, n) matrix of member values.
* Finite-horizon families evaluate their terminal limit at t == T.
* Perpetual families ignore the time argument.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .models import BMDrift, CPPExp, GBM1D, GBMMulti


class InvalidKernel(RuntimeError):
    """Resolvent-kernel construction failed its oracle validation."""


def _as_time_array(t, m):
    t = np.asarray(t, dtype=float)
    return np.full(m, float(t)) if t.ndim == 0 else t


# ---------------------------------------------------------------------------
# Exponential harmonics  e^{a.x}  (perpetual)
# ---------------------------------------------------------------------------

@dataclass
class ExpBlock:
    """Members x -> exp(a.x); annihilated by (L - r) when each row of ``a``
    satisfies 0.5 a'cov a + mu.a - r = 0 for the intended diffusion."""

    a: np.ndarray                    # (n, d)
    time_dependent: bool = False
    has_partials: bool = True

    def __post_init__(self):
        self.a = np.atleast_2d(np.asarray(self.a, dtype=float))

    @property
    def n(self) -> int:
        return self.a.shape[0]

    def values(self, t, P) -> np.ndarray:
        P = np.atleast_2d(np.asarray(P, dtype=float))
        return np.exp(P @ self.a.T)

    def grad_x(self, t, x) -> np.ndarray:
        v = self.values(t, np.atleast_2d(x))[0]
        return self.a * v[:, None]

    def dtime(self, t, x) -> np.ndarray:
        return np.zeros(self.n)

    def gamma_diag(self, t, x) -> np.ndarray:
        v = self.values(t, np.atleast_2d(x))[0]
        return (self.a ** 2) * v[:, None]


def make_harmonic_1d(r: float, mu: float, sigma: float):
    """Increasing/decreasing exponential pair for a 1D diffusion with constant
    coefficients: exponents are the roots of 0.5 sigma^2 a^2 + mu a - r = 0."""
    if sigma <= 0.0 or r <= 0.0:
        raise ValueError("need sigma > 0 and r > 0")
    disc = math.sqrt(mu * mu + 2.0 * r * sigma * sigma)
    a_plus = (-mu + disc) / (sigma * sigma)
    a_minus = (-mu - disc) / (sigma * sigma)
    return ExpBlock(np.array([[a_plus]])), ExpBlock(np.array([[a_minus]]))


def sample_ellipsoid_harmonics(cov, mu, r: float, n: int,
                               stream: nm.RandomStream) -> ExpBlock:
    """Exponentials with parameters uniform on the ellipsoid
    {a : 0.5 a'cov a + mu.a = r}, sampled as
    a = -cov^{-1} mu + sqrt(2c) L^{-T} u with u uniform on the sphere."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    if r <= 0.0:
        raise ValueError("r must be positive")
    d = len(mu)
    L = nm.cholesky_factor(cov)
    center = -np.linalg.solve(cov, mu)
    c = r + 0.5 * float(mu @ np.linalg.solve(cov, mu))
    radius = math.sqrt(2.0 * c)
    a = np.empty((n, d))
    for i in range(n):
        u = nm.sample_unit_sphere(d, stream)
        a[i] = center + radius * np.linalg.solve(L.T, u)
    return ExpBlock(a)


def ellipsoid_residual(cov, mu, r: float, a: np.ndarray) -> np.ndarray:
    """|0.5 a'cov a + mu.a - r| per sampled parameter row."""
    a = np.atleast_2d(a)
    quad = 0.5 * np.einsum("ni,ij,nj->n", a, np.atleast_2d(cov), a)
    return np.abs(quad + a @ np.atleast_1d(mu) - r)


# ---------------------------------------------------------------------------
# One-asset digitals (space-time harmonic for GBM)
# ---------------------------------------------------------------------------

@dataclass
class DigitalBlock:
    """Members (t, x) -> e^{-r(T-t)} Phi(-(log(x/a) + (r - s^2/2)(T-t)) / (s sqrt(T-t)))
    with terminal limit 1{x < a} (1/2 at x == a).  ``a`` may be +inf, which
    degenerates to the pure discount factor."""

    a: np.ndarray                   # (n,) thresholds, entries in (0, +inf]
    r: float
    sigma: float
    T: float
    time_dependent: bool = True
    has_partials: bool = True

    def __post_init__(self):
        self.a = np.atleast_1d(np.asarray(self.a, dtype=float))
        if np.any(self.a <= 0.0):
            raise ValueError("thresholds must be positive")
        if self.sigma <= 0.0 or self.T <= 0.0:
            raise ValueError("need sigma > 0 and T > 0")

    @property
    def n(self) -> int:
        return len(self.a)

    def _check_x(self, x):
        if np.any(x <= 0.0):
            raise ValueError("price states must be positive")

    def _z(self, x, tau):
        # argument of Phi; broadcast to (m, n)
        with np.errstate(divide="ignore"):
            la = np.log(self.a)[None, :]
        return (la - np.log(x)[:, None] -
                (self.r - 0.5 * self.sigma ** 2) * tau[:, None]) / \
            (self.sigma * np.sqrt(tau)[:, None])

    def values(self, t, P) -> np.ndarray:
        P = np.atleast_2d(np.asarray(P, dtype=float))
        x = P[:, 0]
        self._check_x(x)
        tau = self.T - _as_time_array(t, len(x))
        if np.any(tau < -1e-12 * self.T):
            raise ValueError("evaluation after the horizon")
        tau = np.maximum(tau, 0.0)
        out = np.empty((len(x), self.n))
        live = tau > 1e-14 * self.T
        if np.any(live):
            z = self._z(x[live], tau[live])
            vals = np.exp(-self.r * tau[live])[:, None] * nm.std_normal_cdf(z)
            # mathematically positive before the horizon; guard underflow
            out[live] = np.maximum(vals, 1e-300)
        if np.any(~live):
            xe = x[~live][:, None]
            a = self.a[None, :]
            out[~live] = np.where(xe < a, 1.0, np.where(xe == a, 0.5, 0.0))
        return out

    def _live_parts(self, t, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        self._check_x(x)
        tau = self.T - float(t)
        if tau <= 0.0:
            raise ValueError("partials undefined at the horizon")
        z = self._z(x, np.array([tau]))[0]
        disc = math.exp(-self.r * tau)
        return x[0], tau, z, disc

    def grad_x(self, t, x) -> np.ndarray:
        xv, tau, z, disc = self._live_parts(t, x)
        pdf = nm.std_normal_pdf(z)
        g = -disc * pdf / (xv * self.sigma * math.sqrt(tau))
        g = np.where(np.isinf(self.a), 0.0, g)
        return g[:, None]

    def dtime(self, t, x) -> np.ndarray:
        xv, tau, z, disc = self._live_parts(t, x)
        st = self.sigma * math.sqrt(tau)
        with np.errstate(invalid="ignore"):
            log_ratio = np.where(np.isinf(self.a), 0.0, np.log(self.a / xv))
        z_tau = -(log_ratio / tau + (self.r - 0.5 * self.sigma ** 2)) / (2.0 * st)
        pdf = np.where(np.isinf(self.a), 0.0, nm.std_normal_pdf(z))
        return disc * (self.r * nm.std_normal_cdf(z) - pdf * z_tau)

    def gamma_diag(self, t, x) -> np.ndarray:
        xv, tau, z, disc = self._live_parts(t, x)
        st = self.sigma * math.sqrt(tau)
        zf = np.where(np.isinf(self.a), 0.0, z)
        g2 = disc * nm.std_normal_pdf(zf) / (xv * xv * st) * (1.0 - zf / st)
        return np.where(np.isinf(self.a), 0.0, g2)[:, None]


def make_bs_digital(a: float, r: float, sigma: float, T: float) -> DigitalBlock:
    return DigitalBlock(np.array([float(a)]), r=r, sigma=sigma, T=T)


# ---------------------------------------------------------------------------
# Multi-asset orthant digitals
# ---------------------------------------------------------------------------

def orthant_probability(z, corr, n_points: int = 4096) -> np.ndarray:
    """P(Z <= z) for Z ~ N(0, corr), batched over rows of ``z``.

    Separation-of-variables transform evaluated on a deterministic Halton
    point set; relative accuracy target about 1e-4 for moderate dimensions.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    corr = np.atleast_2d(np.asarray(corr, dtype=float))
    d = corr.shape[0]
    if d == 1:
        return nm.std_normal_cdf(z[:, 0])
    L = nm.cholesky_factor(corr)
    k = z.shape[0]
    u = nm.halton(n_points, d - 1)
    out = np.empty(k)
    chunk = max(1, 2_000_000 // n_points)
    eps = 1e-300
    for s in range(0, k, chunk):
        zz = z[s:s + chunk]
        kk = zz.shape[0]
        e = np.clip(nm.std_normal_cdf(zz[:, 0] / L[0, 0]), eps, 1.0)[None, :]
        prod = np.broadcast_to(e, (n_points, kk)).copy()
        ys = []
        for i in range(1, d):
            y_prev = nm.std_normal_ppf(
                np.clip(u[:, i - 1][:, None] * e, eps, 1.0 - 1e-16))
            ys.append(y_prev)
            num = zz[:, i][None, :] - sum(L[i, j] * ys[j] for j in range(i))
            e = np.clip(nm.std_normal_cdf(num / L[i, i]), eps, 1.0)
            prod *= e
        out[s:s + chunk] = prod.mean(axis=0)
    return out


@dataclass
class MultiDigitalBlock:
    """Discounted probability that every asset finishes at or below its
    threshold; products of one-dimensional factors when the correlation is
    diagonal, the separation-of-variables transform otherwise."""

    a: np.ndarray                   # (n, d), entries in (0, +inf]
    r: float
    sigmas: np.ndarray
    rho: np.ndarray
    T: float
    qmc_points: int = 4096
    time_dependent: bool = True

    def __post_init__(self):
        self.a = np.atleast_2d(np.asarray(self.a, dtype=float))
        self.sigmas = np.asarray(self.sigmas, dtype=float)
        self.rho = np.atleast_2d(np.asarray(self.rho, dtype=float))
        d = len(self.sigmas)
        if np.any(self.a <= 0.0):
            raise ValueError("thresholds must be positive")
        if self.a.shape[1] != d or self.rho.shape != (d, d):
            raise ValueError("dimension mismatch")
        if not np.allclose(np.diag(self.rho), 1.0):
            raise ValueError("rho must have unit diagonal")
        nm.cholesky_factor(self.rho)
        self._diagonal = bool(np.allclose(self.rho, np.eye(d), atol=1e-14))
        self.has_partials = self._diagonal

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def d(self) -> int:
        return len(self.sigmas)

    def _z(self, x, tau):
        # (m, n, d) arguments of the orthant
        with np.errstate(divide="ignore"):
            la = np.log(self.a)[None, :, :]
        drift = (self.r - 0.5 * self.sigmas ** 2)[None, None, :] * tau[:, None, None]
        return (la - np.log(x)[:, None, :] - drift) / \
            (self.sigmas[None, None, :] * np.sqrt(tau)[:, None, None])

    def values(self, t, P) -> np.ndarray:
        P = np.atleast_2d(np.asarray(P, dtype=float))
        if np.any(P <= 0.0):
            raise ValueError("price states must be positive")
        m = P.shape[0]
        tau = self.T - _as_time_array(t, m)
        if np.any(tau < -1e-12 * self.T):
            raise ValueError("evaluation after the horizon")
        tau = np.maximum(tau, 0.0)
        out = np.empty((m, self.n))
        live = tau > 1e-14 * self.T
        if np.any(live):
            z = self._z(P[live], tau[live])
            disc = np.exp(-self.r * tau[live])[:, None]
            if self._diagonal:
                vals = disc * nm.std_normal_cdf(z).prod(axis=2)
            else:
                flat = z.reshape(-1, self.d)
                probs = orthant_probability(flat, self.rho, self.qmc_points)
                vals = disc * probs.reshape(z.shape[0], self.n)
            out[live] = np.maximum(vals, 1e-300)
        if np.any(~live):
            xe = P[~live][:, None, :]
            a = self.a[None, :, :]
            ind = np.where(xe < a, 1.0, np.where(xe == a, 0.5, 0.0))
            out[~live] = ind.prod(axis=2)
        return out

    def _factors(self, t, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        tau = self.T - float(t)
        if tau <= 0.0:
            raise ValueError("partials undefined at the horizon")
        z = self._z(x[None, :], np.array([tau]))[0]          # (n, d)
        return x, tau, z, nm.std_normal_cdf(z), math.exp(-self.r * tau)

    def grad_x(self, t, x) -> np.ndarray:
        if not self.has_partials:
            raise NotImplementedError("no analytic partials for correlated thresholds")
        x, tau, z, F, disc = self._factors(t, x)
        pdf = np.where(np.isinf(self.a), 0.0, nm.std_normal_pdf(z))
        dz = -1.0 / (x[None, :] * self.sigmas[None, :] * math.sqrt(tau))
        prod = F.prod(axis=1)[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            others = np.where(F > 0.0, prod / F, 0.0)
        return disc * pdf * dz * others

    def dtime(self, t, x) -> np.ndarray:
        if not self.has_partials:
            raise NotImplementedError("no analytic partials for correlated thresholds")
        x, tau, z, F, disc = self._factors(t, x)
        st = self.sigmas[None, :] * math.sqrt(tau)
        with np.errstate(invalid="ignore"):
            log_ratio = np.where(np.isinf(self.a), 0.0, np.log(self.a / x[None, :]))
        z_tau = -(log_ratio / tau + (self.r - 0.5 * self.sigmas ** 2)[None, :]) / (2.0 * st)
        pdf = np.where(np.isinf(self.a), 0.0, nm.std_normal_pdf(z))
        prod = F.prod(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            others = np.where(F > 0.0, prod[:, None] / F, 0.0)
        dF_dtau = (pdf * z_tau * others).sum(axis=1)
        return disc * (self.r * prod - dF_dtau)

    def gamma_diag(self, t, x) -> np.ndarray:
        if not self.has_partials:
            raise NotImplementedError("no analytic partials for correlated thresholds")
        x, tau, z, F, disc = self._factors(t, x)
        st = self.sigmas[None, :] * math.sqrt(tau)
        zf = np.where(np.isinf(self.a), 0.0, z)
        g2 = np.where(np.isinf(self.a), 0.0,
                      nm.std_normal_pdf(zf) / (x[None, :] ** 2 * st) * (1.0 - zf / st))
        prod = F.prod(axis=1)[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            others = np.where(F > 0.0, prod / F, 0.0)
        return disc * g2 * others


def make_multi_digital(a, r: float, sigmas, rho, T: float) -> MultiDigitalBlock:
    return MultiDigitalBlock(np.atleast_2d(a), r=r, sigmas=sigmas, rho=rho, T=T)


# ---------------------------------------------------------------------------
# Exchange options (closed form)
# ---------------------------------------------------------------------------

@dataclass
class ExchangeBlock:
    """European exchange values x_i Phi(d1) - x_j Phi(d2) with effective vol
    sqrt(s_i^2 - 2 rho s_i s_j + s_j^2); terminal limit (x_i - x_j)^+."""

    pairs: np.ndarray                # (n, 2) ordered asset index pairs
    sigmas: np.ndarray
    rho: np.ndarray
    T: float
    time_dependent: bool = True
    has_partials: bool = True

    def __post_init__(self):
        self.pairs = np.atleast_2d(np.asarray(self.pairs, dtype=int))
        self.sigmas = np.asarray(self.sigmas, dtype=float)
        self.rho = np.atleast_2d(np.asarray(self.rho, dtype=float))
        i, j = self.pairs[:, 0], self.pairs[:, 1]
        if np.any(i == j):
            raise ValueError("exchange pair needs distinct assets")
        si, sj = self.sigmas[i], self.sigmas[j]
        self.sig_hat = np.sqrt(np.maximum(
            si ** 2 - 2.0 * self.rho[i, j] * si * sj + sj ** 2, 0.0))

    @property
    def n(self) -> int:
        return self.pairs.shape[0]

    def _d12(self, xi, xj, tau):
        st = self.sig_hat[None, :] * np.sqrt(tau)[:, None]
        lr = np.log(xi / xj)
        d1 = (lr + 0.5 * st ** 2) / st
        return d1, d1 - st

    def values(self, t, P) -> np.ndarray:
        P = np.atleast_2d(np.asarray(P, dtype=float))
        if np.any(P <= 0.0):
            raise ValueError("price states must be positive")
        m = P.shape[0]
        tau = np.maximum(self.T - _as_time_array(t, m), 0.0)
        xi = P[:, self.pairs[:, 0]]
        xj = P[:, self.pairs[:, 1]]
        out = np.maximum(xi - xj, 0.0)
        live = (tau > 1e-14 * self.T)[:, None] & (self.sig_hat > 1e-14)[None, :]
        if np.any(live):
            d1, d2 = self._d12(xi, xj, np.maximum(tau, 1e-300))
            vals = xi * nm.std_normal_cdf(d1) - xj * nm.std_normal_cdf(d2)
            out = np.where(live, vals, out)
        return out

    def _point(self, t, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        tau = self.T - float(t)
        if tau <= 0.0:
            raise ValueError("partials undefined at the horizon")
        xi = x[self.pairs[:, 0]]
        xj = x[self.pairs[:, 1]]
        d1, d2 = self._d12(xi[None, :], xj[None, :], np.array([tau]))
        return x, tau, xi, xj, d1[0], d2[0]

    def grad_x(self, t, x) -> np.ndarray:
        x, tau, xi, xj, d1, d2 = self._point(t, x)
        g = np.zeros((self.n, len(x)))
        rows = np.arange(self.n)
        g[rows, self.pairs[:, 0]] = nm.std_normal_cdf(d1)
        g[rows, self.pairs[:, 1]] = -nm.std_normal_cdf(d2)
        return g

    def dtime(self, t, x) -> np.ndarray:
        x, tau, xi, xj, d1, d2 = self._point(t, x)
        return -xi * nm.std_normal_pdf(d1) * self.sig_hat / (2.0 * math.sqrt(tau))

    def gamma_diag(self, t, x) -> np.ndarray:
        x, tau, xi, xj, d1, d2 = self._point(t, x)
        g2 = np.zeros((self.n, len(x)))
        rows = np.arange(self.n)
        st = self.sig_hat * math.sqrt(tau)
        g2[rows, self.pairs[:, 0]] = nm.std_normal_pdf(d1) / (xi * st)
        g2[rows, self.pairs[:, 1]] = xi * nm.std_normal_pdf(d1) / (xj ** 2 * st)
        return g2


def make_exchange_basis(pair, sigma_i: float, sigma_j: float, rho_ij: float,
                        T: float, d: int | None = None) -> ExchangeBlock:
    i, j = int(pair[0]), int(pair[1])
    d = d if d is not None else max(i, j) + 1
    sigmas = np.zeros(d)
    sigmas[i], sigmas[j] = sigma_i, sigma_j
    rho = np.eye(d)
    rho[i, j] = rho[j, i] = rho_ij
    return ExchangeBlock(np.array([[i, j]]), sigmas=sigmas, rho=rho, T=T)


# ---------------------------------------------------------------------------
# Resolvent kernel for the compound-Poisson-with-drift process
# ---------------------------------------------------------------------------

def levy_kernel_mc(model: CPPExp, edges: np.ndarray, n_paths: int,
                   stream: nm.RandomStream) -> np.ndarray:
    """Monte-Carlo estimate of the discounted occupation density.

    Paths are simulated event-by-event; each drift segment contributes its
    exactly discounted time in every bin it sweeps.  ``edges`` are bin edges
    in the kernel argument convention (positive side constant-ish): the
    kernel value at displacement z is accumulated into the bin containing -z.
    """
    r, c, lam, alpha = model.r, model.c, model.lam, model.alpha
    speed = -c
    # work in displacement coordinates; mirror at the end
    zed = -edges[::-1]
    z_lo, z_hi = float(zed[0]), float(zed[-1])
    width = float(zed[1] - zed[0])
    nbins = len(zed) - 1
    diff = np.zeros(nbins + 1)       # difference array for fully swept bins
    part = np.zeros(nbins)           # direct weights for partially swept bins
    kill_z = z_lo - 18.0 / alpha
    kill_t = 20.0 / r

    t = np.zeros(n_paths)
    z = np.zeros(n_paths)
    alive = np.ones(n_paths, dtype=bool)
    gen = stream._gen
    rounds = 0
    while np.any(alive) and rounds < 100_000:
        rounds += 1
        na = int(alive.sum())
        if lam > 0.0:
            dt = gen.exponential(1.0 / lam, size=na)
        else:
            dt = np.full(na, (z[alive] - kill_z) / speed + 1e-9)
        t0 = t[alive]
        z0 = z[alive]
        z1 = z0 - speed * dt
        # accumulate the segment sweep [z1, z0] clipped to the bin range;
        # weight separates as exp(-r t0 - r z0/speed) * exp(r z/speed)
        a = np.maximum(z1, z_lo)
        b = np.minimum(z0, z_hi)
        hit = b > a
        if np.any(hit):
            s = np.exp(-r * (t0[hit] + z0[hit] / speed)) / speed
            ah, bh = a[hit], b[hit]
            ia = np.clip(((ah - z_lo) / width).astype(int), 0, nbins - 1)
            ib = np.clip(((bh - z_lo) / width).astype(int), 0, nbins - 1)
            ea = z_lo + (ia + 1) * width      # upper edge of entry bin
            eb = z_lo + ib * width            # lower edge of exit bin
            same = ia == ib
            if np.any(~same):
                shs = s[~same]
                np.add.at(diff, ia[~same] + 1, shs)
                np.add.at(diff, ib[~same], -shs)
                np.add.at(part, ia[~same], shs * (ea[~same] - ah[~same]) / width)
                np.add.at(part, ib[~same], shs * (bh[~same] - eb[~same]) / width)
            if np.any(same):
                np.add.at(part, ia[same], s[same] * (bh[same] - ah[same]) / width)
        if lam > 0.0:
            jumps = gen.exponential(1.0 / alpha, size=na)
        else:
            jumps = np.zeros(na)
        t[alive] = t0 + dt
        z[alive] = z1 + jumps
        alive[alive] = (z[alive] > kill_z) & (t[alive] < kill_t)
    stream.counter += 2 * n_paths * rounds

    dens = np.cumsum(diff)[:nbins] + part
    centers_z = 0.5 * (zed[:-1] + zed[1:])
    dens *= width * np.exp(r * centers_z / speed)      # per-bin discount factor
    dens /= n_paths * width
    return dens[::-1]                                   # mirror back


_KERNEL_CACHE: dict = {}


def fit_levy_kernel(model: CPPExp, n_paths: int = 200_000, seed: int = 977,
                    fit_range=(-3.5, 3.5), bin_width: float = 0.05):
    """Fit the two piecewise constants of the kernel shape
    (A2 e^{rho x} on x <= 0, a constant on x > 0) to the occupation oracle.

    Returns (A_neg, A_pos, rho, rel_rms, centers, mc_density).  Relative
    least squares per branch; ``rel_rms`` is the root-mean-square relative
    deviation of the fit from the oracle over the fit range.
    """
    rho = model.kernel_exponent
    if rho <= 0.0:
        raise InvalidKernel(f"kernel exponent {rho:.4f} must be positive")
    key = (model.alpha, model.c, model.lam, model.r, n_paths, seed,
           fit_range, bin_width)
    if key in _KERNEL_CACHE:
        return _KERNEL_CACHE[key]
    nbins = int(round((fit_range[1] - fit_range[0]) / bin_width))
    edges = fit_range[0] + bin_width * np.arange(nbins + 1)
    mc = levy_kernel_mc(model, edges, n_paths, nm.make_rng(seed))
    centers = 0.5 * (edges[:-1] + edges[1:])
    good = mc > 0.0
    neg = good & (centers < 0.0)
    pos = good & (centers > 0.0)
    if neg.sum() < 3 or pos.sum() < 3:
        raise InvalidKernel("oracle produced too little mass to fit")
    # relative least squares per branch: min_A sum ((A phi - y) / y)^2
    phi_over_y = np.exp(rho * centers[neg]) / mc[neg]
    A_neg = float(phi_over_y.sum() / (phi_over_y ** 2).sum())
    inv_y = 1.0 / mc[pos]
    A_pos = float(inv_y.sum() / (inv_y ** 2).sum())
    fit = np.where(centers <= 0.0, A_neg * np.exp(rho * centers), A_pos)
    rel = (fit[good] - mc[good]) / mc[good]
    rel_rms = float(np.sqrt(np.mean(rel ** 2)))
    result = (A_neg, A_pos, rho, rel_rms, centers, mc)
    _KERNEL_CACHE[key] = result
    return result


@dataclass
class LevyKernelBlock:
    """Shifted resolvent-kernel functions for the compound-Poisson model.

    Member with shift ``a`` evaluates kernel(y - a): it rises like
    A_neg e^{rho (y-a)} below the shift and is the constant A_pos above it,
    which makes it nondecreasing and r-excessive up to the oracle fit error.
    """

    shifts: np.ndarray
    rho: float
    A_neg: float
    A_pos: float
    fit_rel_rms: float = 0.0
    time_dependent: bool = False
    has_partials: bool = False

    def __post_init__(self):
        self.shifts = np.atleast_1d(np.asarray(self.shifts, dtype=float))

    @property
    def n(self) -> int:
        return len(self.shifts)

    def kernel(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.where(x <= 0.0, self.A_neg * np.exp(self.rho * x), self.A_pos)
        return float(out) if out.ndim == 0 else out

    def values(self, t, P) -> np.ndarray:
        P = np.atleast_2d(np.asarray(P, dtype=float))
        return self.kernel(P[:, 0][:, None] - self.shifts[None, :])


def make_levy_green_basis(alpha: float, c: float, lam: float, r: float,
                          a, n_paths: int = 200_000, seed: int = 977,
                          max_fit_error: float = 0.05) -> LevyKernelBlock:
    """Validated kernel basis; raises ``InvalidKernel`` when the exponent is
    nonpositive or the shape misfits the occupation oracle by more than
    ``max_fit_error`` (root-mean-square relative)."""
    model = CPPExp(c=c, lam=lam, alpha=alpha, r=r)
    A_neg, A_pos, rho, rel_rms, _, _ = fit_levy_kernel(model, n_paths, seed)
    if rel_rms > max_fit_error:
        raise InvalidKernel(
            f"kernel shape misfits the occupation oracle: {rel_rms:.1%} rms")
    return LevyKernelBlock(np.atleast_1d(np.asarray(a, dtype=float)),
                           rho=rho, A_neg=A_neg, A_pos=A_pos,
                           fit_rel_rms=rel_rms)


# ---------------------------------------------------------------------------
# Parameter sampling
# ---------------------------------------------------------------------------

@dataclass
class ParameterSampler:
    """Sampling recipe for basis parameters.

    ``kind`` is "interval" (lo, hi scalars), "box" (lo, hi vectors) or
    "ellipsoid" (cov, mu, rate)."""

    kind: str
    n: int
    lo: float | np.ndarray | None = None
    hi: float | np.ndarray | None = None
    cov: np.ndarray | None = None
    mu: np.ndarray | None = None
    rate: float | None = None

    def __post_init__(self):
        if self.kind not in ("interval", "box", "ellipsoid"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.n < 1:
            raise ValueError("n must be >= 1")


def sample_parameters(sampler: ParameterSampler, stream: nm.RandomStream) -> np.ndarray:
    if sampler.kind == "interval":
        u = stream.uniforms(sampler.n)
        return sampler.lo + u * (sampler.hi - sampler.lo)
    if sampler.kind == "box":
        lo = np.atleast_1d(np.asarray(sampler.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(sampler.hi, dtype=float))
        u = stream.uniforms(sampler.n * len(lo)).reshape(sampler.n, len(lo))
        return lo + u * (hi - lo)
    block = sample_ellipsoid_harmonics(sampler.cov, sampler.mu, sampler.rate,
                                       sampler.n, stream)
    return block.a


# ---------------------------------------------------------------------------
# Basis sets and harmonicity checking
# ---------------------------------------------------------------------------

class BasisSet:
    """Concatenation of family blocks evaluated as one (m, n) matrix."""

    def __init__(self, blocks):
        self.blocks = list(blocks)
        if not self.blocks:
            raise ValueError("need at least one block")
        self.n = sum(b.n for b in self.blocks)
        self.time_dependent = any(b.time_dependent for b in self.blocks)
        self.has_partials = all(getattr(b, "has_partials", False)
                                for b in self.blocks)

    def values(self, t, P) -> np.ndarray:
        return np.hstack([b.values(t, P) for b in self.blocks])

    def grad_x(self, t, x) -> np.ndarray:
        return np.vstack([b.grad_x(t, x) for b in self.blocks])

    def dtime(self, t, x) -> np.ndarray:
        return np.concatenate([b.dtime(t, x) for b in self.blocks])

    def gamma_diag(self, t, x) -> np.ndarray:
        return np.vstack([b.gamma_diag(t, x) for b in self.blocks])


def generator_residual(block, model, t: float, x, rel_step: float = 1e-4):
    """Relative residual of (d/dt + L - r) h at one point, by central finite
    differences.  Returns (n,) residuals normalized by the sum of the
    magnitudes of the individual generator terms."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = len(x)

    def val(tt, xx):
        return block.values(tt, xx[None, :])[0]

    h0 = val(t, x)
    # time derivative
    if block.time_dependent:
        dt_step = rel_step * getattr(block, "T", 1.0)
        ht = (val(t + dt_step, x) - val(t - dt_step, x)) / (2.0 * dt_step)
    else:
        ht = np.zeros_like(h0)

    steps = rel_step * np.maximum(1.0, np.abs(x))
    grad = np.empty((len(h0), d))
    hess = np.empty((len(h0), d, d))
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = steps[i]
        hp, hm = val(t, x + ei), val(t, x - ei)
        grad[:, i] = (hp - hm) / (2.0 * steps[i])
        hess[:, i, i] = (hp - 2.0 * h0 + hm) / steps[i] ** 2
        for j in range(i + 1, d):
            ej = np.zeros(d)
            ej[j] = steps[j]
            cross = (val(t, x + ei + ej) - val(t, x + ei - ej)
                     - val(t, x - ei + ej) + val(t, x - ei - ej)) / \
                (4.0 * steps[i] * steps[j])
            hess[:, i, j] = hess[:, j, i] = cross

    if isinstance(model, GBM1D):
        drift = model.r * x[0] * grad[:, 0]
        diff = 0.5 * model.sigma ** 2 * x[0] ** 2 * hess[:, 0, 0]
        r = model.r
    elif isinstance(model, GBMMulti):
        drift = model.r * (x[None, :] * grad).sum(axis=1)
        covs = np.outer(model.sigmas, model.sigmas) * model.rho
        diff = 0.5 * np.einsum("ij,nij->n", covs * np.outer(x, x), hess)
        r = model.r
    elif isinstance(model, BMDrift):
        drift = grad @ model.mu
        diff = 0.5 * np.einsum("ij,nij->n", model.cov, hess)
        r = model.r
    else:
        raise TypeError(f"no differential generator for {type(model).__name__}")

    residual = ht + drift + diff - r * h0
    denom = np.abs(ht) + np.abs(drift) + np.abs(diff) + np.abs(r * h0)
    return np.abs(residual) / np.maximum(denom, 1e-300)
