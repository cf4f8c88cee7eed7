"""Low-level numerical kernels shared by every other module.

Special functions, a pivoted Cholesky factorization, deterministic random
streams, Halton low-discrepancy sequences and two derivative-free minimizers
(golden section in 1D, multistart Nelder-Mead on a box).  Everything is
deterministic given its inputs; ``RandomStream`` is the only stateful object
and is never shared implicitly between callers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri


class NotPositiveDefinite(ValueError):
    """A symmetric matrix failed its positive-definiteness pivot test."""


# ---------------------------------------------------------------------------
# Gaussian special functions
# ---------------------------------------------------------------------------

def std_normal_cdf(z):
    """Standard normal CDF for scalars or arrays (absolute error < 1e-15)."""
    if np.isscalar(z):
        return float(ndtr(z))
    return ndtr(np.asarray(z, dtype=float))


def std_normal_pdf(z):
    """Standard normal density."""
    z = np.asarray(z, dtype=float)
    out = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    return float(out) if out.ndim == 0 else out


def std_normal_ppf(p):
    """Inverse standard normal CDF."""
    if np.isscalar(p):
        return float(ndtri(p))
    return ndtri(np.asarray(p, dtype=float))


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def cholesky_factor(S) -> np.ndarray:
    """Lower-triangular L with L @ L.T == S.

    Raises ``NotPositiveDefinite`` when a pivot falls at or below
    1e-14 times the largest diagonal entry.
    """
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError("matrix must be square")
    if not np.allclose(S, S.T, rtol=0.0, atol=1e-10 * max(1.0, np.abs(S).max())):
        raise ValueError("matrix must be symmetric")
    d = S.shape[0]
    pivot_floor = 1e-14 * max(1.0, float(np.max(np.diag(S))))
    L = np.zeros((d, d))
    for i in range(d):
        s = S[i, i] - np.dot(L[i, :i], L[i, :i])
        if s <= pivot_floor:
            raise NotPositiveDefinite(f"pivot {s:.3e} at row {i}")
        L[i, i] = math.sqrt(s)
        if i + 1 < d:
            L[i + 1:, i] = (S[i + 1:, i] - L[i + 1:, :i] @ L[i, :i]) / L[i, i]
    return L


def solve_lower_triangular(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve L y = b for lower-triangular L (forward substitution)."""
    return np.linalg.solve(L, b)


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

@dataclass
class RandomStream:
    """Deterministic random stream.

    Uniform draws come from PCG64 seeded with ``entropy``; normal draws are
    produced by the Box-Muller transform (two uniforms per normal) so the
    contract is reproducible across platforms.  ``counter`` counts the values
    emitted to callers.
    """

    seed: int
    entropy: tuple = ()
    counter: int = 0
    _gen: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        if self._gen is None:
            key = (int(self.seed),) + tuple(int(k) for k in self.entropy)
            self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))

    def uniform(self) -> float:
        """One uniform draw in [0, 1)."""
        self.counter += 1
        return float(self._gen.random())

    def uniforms(self, n: int) -> np.ndarray:
        self.counter += int(n)
        return self._gen.random(int(n))

    def normal(self) -> float:
        """One standard normal draw (Box-Muller, consumes two uniforms)."""
        u = self._gen.random(2)
        self.counter += 1
        return math.sqrt(-2.0 * math.log1p(-u[0])) * math.cos(2.0 * math.pi * u[1])

    def normals(self, n: int) -> np.ndarray:
        n = int(n)
        u = self._gen.random(2 * n)
        self.counter += n
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        return r * np.cos(2.0 * math.pi * u[1::2])

    def derive(self, index: int) -> "RandomStream":
        """Independent child stream; derivation key is (seed, entropy..., index)."""
        return RandomStream(seed=self.seed, entropy=self.entropy + (int(index),))


def make_rng(seed: int) -> RandomStream:
    return RandomStream(seed=int(seed))


def draw_uniform(stream: RandomStream) -> float:
    return stream.uniform()


def draw_normal(stream: RandomStream) -> float:
    return stream.normal()


def sample_unit_sphere(d: int, stream: RandomStream) -> np.ndarray:
    """Uniform point on the unit sphere in R^d (normalized Gaussian vector)."""
    if d < 1:
        raise ValueError("d must be >= 1")
    while True:
        z = stream.normals(d)
        nrm = float(np.linalg.norm(z))
        if nrm > 1e-12:
            return z / nrm


# ---------------------------------------------------------------------------
# Halton low-discrepancy sequence
# ---------------------------------------------------------------------------

_PRIMES = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61]


def _nth_prime(i: int) -> int:
    while len(_PRIMES) <= i:
        c = _PRIMES[-1] + 2
        while any(c % p == 0 for p in _PRIMES if p * p <= c):
            c += 2
        _PRIMES.append(c)
    return _PRIMES[i]


def _radical_inverse(indices: np.ndarray, base: int) -> np.ndarray:
    out = np.zeros(len(indices))
    f = 1.0 / base
    idx = indices.copy()
    while idx.any():
        out += f * (idx % base)
        idx //= base
        f /= base
    return out


def halton(n: int, d: int, start: int = 1) -> np.ndarray:
    """First ``n`` points (from index ``start``) of the d-dimensional Halton
    sequence in the open unit cube.  Prefix property: the first n points of a
    longer run coincide with a shorter run at the same ``start``.
    """
    idx = np.arange(start, start + n, dtype=np.int64)
    return np.column_stack([_radical_inverse(idx, _nth_prime(j)) for j in range(d)])


# ---------------------------------------------------------------------------
# Derivative-free minimizers
# ---------------------------------------------------------------------------

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section_min(f, a: float, b: float, tol: float = 1e-8):
    """Golden-section search on [a, b]; returns (x*, f(x*)).

    Locates the minimizer of a unimodal function to within ``tol``; for
    non-unimodal f it still returns the best point it evaluated.
    """
    if not a < b:
        raise ValueError("need a < b")
    best_x, best_f = a, f(a)
    fb = f(b)
    if fb < best_f:
        best_x, best_f = b, fb
    lo, hi = a, b
    c = hi - _INVPHI * (hi - lo)
    d_ = lo + _INVPHI * (hi - lo)
    fc, fd = f(c), f(d_)
    while hi - lo > tol:
        if fc < fd:
            hi, d_, fd = d_, c, fc
            c = hi - _INVPHI * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d_, fd
            d_ = lo + _INVPHI * (hi - lo)
            fd = f(d_)
    for x, fx in ((c, fc), (d_, fd)):
        if fx < best_f:
            best_x, best_f = x, fx
    return float(best_x), float(best_f)


def _nelder_mead(f, x0, lo, hi, max_iter=200, init_frac=0.01):
    """Box-clipped Nelder-Mead with standard coefficients (1, 2, 0.5, 0.5).

    Returns the best point ever evaluated, which is at least as good as the
    final simplex best.
    """
    m = len(x0)
    width = hi - lo
    pts = [np.clip(np.asarray(x0, dtype=float), lo, hi)]
    for i in range(m):
        p = pts[0].copy()
        step = init_frac * width[i]
        p[i] = p[i] + step if p[i] + step <= hi[i] else p[i] - step
        pts.append(np.clip(p, lo, hi))
    simplex = np.array(pts)
    fvals = np.array([f(p) for p in simplex])
    best_idx = int(np.argmin(fvals))
    best_x, best_f = simplex[best_idx].copy(), float(fvals[best_idx])

    def probe(p):
        nonlocal best_x, best_f
        p = np.clip(p, lo, hi)
        fp = f(p)
        if fp < best_f:
            best_x, best_f = p.copy(), float(fp)
        return p, fp

    for _ in range(max_iter):
        order = np.argsort(fvals, kind="stable")
        simplex, fvals = simplex[order], fvals[order]
        spread = fvals[-1] - fvals[0]
        if spread <= 1e-12 * (1.0 + abs(fvals[0])) and np.max(
            np.abs(simplex[-1] - simplex[0])
        ) <= 1e-10 * (1.0 + np.max(np.abs(simplex[0]))):
            break
        centroid = simplex[:-1].mean(axis=0)
        xr, fr = probe(centroid + (centroid - simplex[-1]))
        if fr < fvals[0]:
            xe, fe = probe(centroid + 2.0 * (centroid - simplex[-1]))
            simplex[-1], fvals[-1] = (xe, fe) if fe < fr else (xr, fr)
        elif fr < fvals[-2]:
            simplex[-1], fvals[-1] = xr, fr
        else:
            xc, fc = probe(centroid + 0.5 * (simplex[-1] - centroid))
            if fc < fvals[-1]:
                simplex[-1], fvals[-1] = xc, fc
            else:
                for i in range(1, m + 1):
                    simplex[i] = np.clip(
                        simplex[0] + 0.5 * (simplex[i] - simplex[0]), lo, hi
                    )
                    fvals[i] = f(simplex[i])
                    if fvals[i] < best_f:
                        best_x, best_f = simplex[i].copy(), float(fvals[i])
    return best_x, best_f


def multistart_min(f, box, n_starts: int, stream: RandomStream | None = None):
    """Global minimization heuristic on a box.

    Scans ``n_starts`` Halton points, then refines the best five with
    Nelder-Mead (200 iterations, initial simplex 1% of the box width).
    Returns (x*, f*) where f* is the minimum over every point evaluated.
    The stream is only consulted for extra starts when the scan produces
    fewer than five distinct candidates.
    """
    lo = np.asarray(box[0], dtype=float)
    hi = np.asarray(box[1], dtype=float)
    m = len(lo)
    n_starts = max(1, int(n_starts))
    pts = lo + halton(n_starts, m) * (hi - lo)
    vals = np.array([f(p) for p in pts])
    order = np.argsort(vals, kind="stable")
    starts = [pts[i] for i in order[: min(5, n_starts)]]
    if len(starts) < 5 and stream is not None:
        for _ in range(5 - len(starts)):
            starts.append(lo + stream.uniforms(m) * (hi - lo))
            v = f(starts[-1])
            vals = np.append(vals, v)
    best_x = pts[order[0]]
    best_f = float(vals[order[0]])
    extra = np.argmin(vals)
    if vals[extra] < best_f:
        best_f = float(vals[extra])
    for s in starts:
        x, fx = _nelder_mead(f, s, lo, hi)
        if fx < best_f:
            best_x, best_f = x, fx
    return np.asarray(best_x, dtype=float), float(best_f)
