"""Finite LP solver and the cutting-plane loop for the semi-infinite program.

The program is: minimize sum_i lambda_i h_i(x0) over lambda >= 0 subject to
sum_i lambda_i h_i(x) >= g(x) for every x in a search box.  The cutting-plane
loop alternates between solving the finite LP restricted to the cut points
found so far and searching the box for the most violated point of the current
iterate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm


class BasisInsufficient(RuntimeError):
    """The basis cannot dominate the gain at some constraint point
    (the restricted LP became infeasible)."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


# ---------------------------------------------------------------------------
# Finite LP: min c.x  s.t.  A x >= b, x >= 0
# ---------------------------------------------------------------------------

@dataclass
class FiniteLP:
    c: np.ndarray          # (n,) objective, all >= 0 in our use
    rows: np.ndarray       # (m, n) constraint matrix
    rhs: np.ndarray        # (m,)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.rows = np.atleast_2d(np.asarray(self.rows, dtype=float))
        self.rhs = np.asarray(self.rhs, dtype=float)
        if self.rows.shape[0] != self.rhs.shape[0]:
            raise ValueError("row count != rhs count")
        if self.rows.shape[1] != self.c.shape[0]:
            raise ValueError("column count != |c|")
        if not (np.all(np.isfinite(self.c)) and np.all(np.isfinite(self.rows))
                and np.all(np.isfinite(self.rhs))):
            raise ValueError("non-finite LP data")


@dataclass
class LPResult:
    status: str            # "optimal" | "infeasible"
    lam: np.ndarray | None
    objective: float | None
    bad_row: int | None = None   # most violated row when infeasible


class _Simplex:
    """Revised simplex on equality form min c.x, G x = rhs, x >= 0.

    Keeps an explicit basis inverse updated by pivoting; entering variable is
    chosen by the most-negative reduced cost and switches to Bland's rule
    permanently once the objective stalls (anti-cycling).
    """

    REFACTOR_EVERY = 60
    STALL_LIMIT = 30

    def __init__(self, G, rhs, tol):
        self.G = G
        self.rhs = rhs
        self.tol = tol

    def run(self, cost, basis, allowed, max_iter):
        G, rhs = self.G, self.rhs
        m = G.shape[0]
        basis = list(basis)
        B_inv = np.linalg.inv(G[:, basis])
        xB = B_inv @ rhs
        bland = False
        stall = 0
        last_obj = math.inf
        for it in range(max_iter):
            if it and it % self.REFACTOR_EVERY == 0:
                B_inv = np.linalg.inv(G[:, basis])
                xB = B_inv @ rhs
            cB = cost[basis]
            y = cB @ B_inv
            rc = cost - y @ G
            rc[basis] = 0.0
            cand = np.where((rc < -self.tol) & allowed)[0]
            if cand.size == 0:
                return "optimal", basis, xB, B_inv
            j = int(cand[0]) if bland else int(cand[np.argmin(rc[cand])])
            d = B_inv @ G[:, j]
            pos = d > 1e-11
            if not np.any(pos):
                return "unbounded", basis, xB, B_inv
            ratios = np.full(m, np.inf)
            ratios[pos] = np.maximum(xB[pos], 0.0) / d[pos]
            rmin = ratios.min()
            ties = np.where(ratios <= rmin + 1e-13 * (1.0 + rmin))[0]
            # Bland tie-break: leave the variable with the smallest index
            r = int(min(ties, key=lambda i: basis[i]))
            piv = d[r]
            br = B_inv[r, :] / piv
            B_inv = B_inv - np.outer(d, br)
            B_inv[r, :] = br
            basis[r] = j
            xB = B_inv @ rhs
            obj = float(cost[basis] @ xB)
            if obj >= last_obj - 1e-13 * (1.0 + abs(last_obj)):
                stall += 1
                if stall >= self.STALL_LIMIT:
                    bland = True
            else:
                stall = 0
            last_obj = obj
        raise RuntimeError("simplex iteration limit reached")


def solve_finite_lp(p: FiniteLP) -> LPResult:
    """Two-phase revised simplex for min c.lam, A lam >= b, lam >= 0.

    Surplus variables convert the inequalities to equalities; rows whose
    right-hand side is positive receive a phase-1 artificial.  Unboundedness
    cannot occur for c >= 0 and is reported as an internal error.
    """
    A, b, c = p.rows.copy(), p.rhs.copy(), p.c
    m, n = A.shape
    if m == 0:
        return LPResult("optimal", np.zeros(n), 0.0)
    scale = max(1.0, float(np.abs(b).max()), float(np.abs(A).max()))
    tol = 1e-10 * scale

    flip = b < 0.0
    A[flip] *= -1.0
    b = b.copy()
    b[flip] *= -1.0
    surplus = np.where(flip, 1.0, -1.0)          # coefficient of s_i in row i
    need_art = ~flip                              # rows with b >= 0 and -s_i need artificials

    art_rows = np.where(need_art)[0]
    n_art = len(art_rows)
    N = n + m + n_art
    G = np.zeros((m, N))
    G[:, :n] = A
    G[np.arange(m), n + np.arange(m)] = surplus
    for k, i in enumerate(art_rows):
        G[i, n + m + k] = 1.0

    basis = []
    k = 0
    for i in range(m):
        if need_art[i]:
            basis.append(n + m + k)
            k += 1
        else:
            basis.append(n + i)

    sx = _Simplex(G, b, tol)
    allowed = np.ones(N, dtype=bool)
    max_iter = 50 * (m + N) + 200

    if n_art:
        cost1 = np.zeros(N)
        cost1[n + m:] = 1.0
        status, basis, xB, B_inv = sx.run(cost1, basis, allowed, max_iter)
        if status != "optimal":
            raise RuntimeError(f"phase-1 simplex returned {status}")
        phase1 = float(cost1[basis] @ xB)
        if phase1 > 1e-8 * scale:
            # locate the most violated original row for diagnostics
            lam = np.zeros(n)
            for r, bi in enumerate(basis):
                if bi < n:
                    lam[bi] = xB[r]
            viol = p.rows @ lam - p.rhs
            return LPResult("infeasible", None, None, bad_row=int(np.argmin(viol)))
        # drive leftover artificials out of the basis where possible
        for r, bi in enumerate(basis):
            if bi >= n + m:
                row = B_inv[r, :] @ G[:, : n + m]
                pivots = np.where(np.abs(row) > 1e-9)[0]
                if pivots.size:
                    j = int(pivots[0])
                    d = B_inv @ G[:, j]
                    br = B_inv[r, :] / d[r]
                    B_inv = B_inv - np.outer(d, br)
                    B_inv[r, :] = br
                    basis[r] = j
        allowed[n + m:] = False

    cost2 = np.zeros(N)
    cost2[:n] = c
    status, basis, xB, _ = sx.run(cost2, basis, allowed, max_iter)
    if status != "optimal":
        raise RuntimeError(f"phase-2 simplex returned {status} (unexpected for c >= 0)")
    lam = np.zeros(n)
    for r, bi in enumerate(basis):
        if bi < n:
            lam[bi] = max(0.0, xB[r])
    return LPResult("optimal", lam, float(c @ lam))


# ---------------------------------------------------------------------------
# Search box
# ---------------------------------------------------------------------------

@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.lo.shape != self.hi.shape or np.any(self.lo >= self.hi):
            raise ValueError("need lo < hi componentwise")

    @property
    def dim(self) -> int:
        return len(self.lo)

    def contains(self, p, slack=1e-9) -> bool:
        p = np.asarray(p, dtype=float)
        w = self.hi - self.lo
        return bool(np.all(p >= self.lo - slack * w) and np.all(p <= self.hi + slack * w))

    def corners(self) -> np.ndarray:
        d = self.dim
        nbits = min(d, 6)
        out = np.empty((2 ** nbits, d))
        for j in range(2 ** nbits):
            for i in range(d):
                bit = (j >> (i % nbits)) & 1
                out[j, i] = self.hi[i] if bit else self.lo[i]
        return np.unique(out, axis=0)

    def halton_points(self, n: int, start: int = 1) -> np.ndarray:
        return self.lo + nm.halton(n, self.dim, start=start) * (self.hi - self.lo)


# ---------------------------------------------------------------------------
# LSIP problem and cutting-plane solve
# ---------------------------------------------------------------------------

@dataclass
class LSIPProblem:
    """Semi-infinite program over a finite search box.

    ``h_matrix`` maps an (m, D) array of points to the (m, n) matrix of basis
    values; ``gain`` maps it to the (m,) gain values.  The anchor is the
    optimization point (time coordinate first for finite-horizon problems).

    ``seed_cuts`` are extra initial constraint points (callers seed the
    structurally binding points they know about, e.g. terminal thresholds).
    ``scan_slices`` are (dim, value) pairs; the violation search additionally
    scans each hyperplane {p : p[dim] = value}, which catches thin boundary
    layers the box scan would miss.
    """

    h_matrix: object
    gain: object
    box: Box
    anchor: np.ndarray
    tol_feas: float = 1e-6
    max_cuts: int = 400
    n_starts: int = 0            # 0 -> dimension-based default
    seed_cuts: np.ndarray | None = None
    scan_slices: tuple = ()

    def __post_init__(self):
        self.anchor = np.asarray(self.anchor, dtype=float)
        if not self.box.contains(self.anchor):
            raise ValueError("anchor outside search box")
        col = np.asarray(self.h_matrix(self.anchor[None, :]), dtype=float).ravel()
        if col.size < 1:
            raise ValueError("need at least one basis function")
        if np.any(col <= 0.0) or not np.all(np.isfinite(col)):
            raise ValueError("every basis function must be strictly positive at the anchor")
        self._anchor_col = col
        if self.n_starts <= 0:
            self.n_starts = max(256, 128 * self.box.dim)
        if self.seed_cuts is not None:
            self.seed_cuts = np.atleast_2d(np.asarray(self.seed_cuts, dtype=float))

    @property
    def n_basis(self) -> int:
        return len(self._anchor_col)


@dataclass
class MajorantSolution:
    lam: np.ndarray
    objective: float
    cuts: np.ndarray
    history: list[float] = field(default_factory=list)
    final_violation: float = 0.0
    certified: bool = False
    termination: str = ""
    worst_point: np.ndarray | None = None
    uncovered_point: np.ndarray | None = None


def _dedupe(points: np.ndarray, width: np.ndarray) -> np.ndarray:
    kept = []
    for p in points:
        if not any(np.max(np.abs(p - q) / width) < 1e-10 for q in kept):
            kept.append(p)
    return np.array(kept)


def _search_violation(F_batch, F, box: Box, n_starts: int, stream,
                      n_grid: int = 512):
    """Most-violated point of the slack surface F = sum lam_i h_i - g.

    One dimension: grid scan plus golden-section refinement.  Higher
    dimensions: the multistart recipe (Halton scan, Nelder-Mead from the five
    best starts) with the scan evaluated in one vectorized pass.
    """
    if box.dim == 1:
        lo, hi = float(box.lo[0]), float(box.hi[0])
        xs = np.linspace(lo, hi, n_grid)
        vals = np.asarray(F_batch(xs[:, None]), dtype=float)
        i = int(np.argmin(vals))
        a = xs[max(0, i - 1)]
        b = xs[min(n_grid - 1, i + 1)]
        if a == b:
            return np.array([xs[i]]), float(vals[i])
        x, fv = nm.golden_section_min(lambda x: F(np.array([x])), a, b,
                                      tol=1e-10 * max(1.0, abs(hi - lo)))
        if vals[i] < fv:
            return np.array([xs[i]]), float(vals[i])
        return np.array([x]), float(fv)
    pts = box.halton_points(max(1, n_starts))
    vals = np.asarray(F_batch(pts), dtype=float)
    order = np.argsort(vals, kind="stable")
    best_x = pts[order[0]].copy()
    best_f = float(vals[order[0]])
    for idx in order[:5]:
        x, fx = nm._nelder_mead(F, pts[idx], box.lo, box.hi)
        if fx < best_f:
            best_x, best_f = x, fx
    return best_x, best_f


def _scan_slice(F_batch, box: Box, dim: int, value: float, n_scan: int = 2048):
    """Worst point of the slack surface on the hyperplane p[dim] = value."""
    free = [i for i in range(box.dim) if i != dim]
    if not free:
        p = np.array([value])
        return p, float(F_batch(p[None, :])[0])
    pts = np.empty((n_scan, box.dim))
    pts[:, dim] = value
    sub = nm.halton(n_scan, len(free))
    for k, i in enumerate(free):
        pts[:, i] = box.lo[i] + sub[:, k] * (box.hi[i] - box.lo[i])
    vals = np.asarray(F_batch(pts), dtype=float)
    j = int(np.argmin(vals))
    best_p, best_v = pts[j].copy(), float(vals[j])
    if len(free) == 1:
        i = free[0]
        lo = max(box.lo[i], best_p[i] - 2.0 * (box.hi[i] - box.lo[i]) / n_scan)
        hi = min(box.hi[i], best_p[i] + 2.0 * (box.hi[i] - box.lo[i]) / n_scan)

        def f1(x):
            q = best_p.copy()
            q[i] = x
            return float(F_batch(q[None, :])[0])

        if hi > lo:
            x, fv = nm.golden_section_min(f1, lo, hi, tol=1e-10 * (hi - lo + 1.0))
            if fv < best_v:
                best_p[i] = x
                best_v = fv
    return best_p, best_v


def cutting_plane_solve(prob: LSIPProblem, stream: nm.RandomStream) -> MajorantSolution:
    """Cutting-plane loop for the LSIP.

    Initial cuts are the anchor, the box corners, 32 low-discrepancy points
    and any caller-seeded points the basis can cover.  Each round solves the
    restricted LP, minimizes the slack surface (box multistart plus the
    configured slice scans) and appends the most violated coverable point as
    a cut while violations below ``-tol_feas`` keep turning up.  Success
    means termination through the violation criterion; hitting ``max_cuts``,
    a stalled (duplicate) cut or a violated point no basis member covers
    returns the best iterate flagged non-certified.
    """
    box, tol = prob.box, prob.tol_feas
    width = box.hi - box.lo
    init = [prob.anchor[None, :], box.corners(), box.halton_points(32)]
    h_scale = max(1.0, float(np.max(prob._anchor_col)))

    def coverable(row, gval):
        # a cut the basis can only cover with an absurd coefficient would
        # poison the program; flag it instead of adding the row
        return gval <= tol or float(np.max(row)) > max(1e-12 * h_scale,
                                                       1e-7 * gval)

    seeds = []
    if prob.seed_cuts is not None:
        for p in prob.seed_cuts:
            if not box.contains(p):
                continue
            row = np.asarray(prob.h_matrix(p[None, :]), dtype=float)[0]
            gval = float(np.asarray(prob.gain(p[None, :])).ravel()[0])
            if gval > 0.0 and coverable(row, gval):
                seeds.append(p)
    if seeds:
        init.append(np.array(seeds))
    cuts = _dedupe(np.vstack(init), width)
    H = np.asarray(prob.h_matrix(cuts), dtype=float)
    g = np.asarray(prob.gain(cuts), dtype=float)
    h_scale = max(h_scale, float(np.max(H)))

    history: list[float] = []
    termination = "max_cuts"
    violation = 0.0
    worst = None
    uncovered = None
    lam = np.zeros(prob.n_basis)

    def candidates(lam, dense=False):
        def F_batch(P):
            P2 = np.atleast_2d(P)
            return np.asarray(prob.h_matrix(P2), dtype=float) @ lam - \
                np.asarray(prob.gain(P2), dtype=float)

        def F(p):
            return float(F_batch(np.atleast_2d(p))[0])

        n_starts = (4 if dense else 1) * prob.n_starts
        n_grid = 2048 if dense else 512
        out = [_search_violation(F_batch, F, box, n_starts, stream,
                                 n_grid=n_grid)]
        for dim, value in prob.scan_slices:
            out.append(_scan_slice(F_batch, box, dim, value,
                                   n_scan=4096 if dense else 2048))
        return sorted(out, key=lambda c: c[1])

    while True:
        res = solve_finite_lp(FiniteLP(prob._anchor_col, H, g))
        if res.status == "infeasible":
            bad = cuts[res.bad_row] if res.bad_row is not None else None
            raise BasisInsufficient(
                "basis cannot dominate the gain at a cut point", point=bad)
        lam = res.lam
        history.append(res.objective)

        cand = candidates(lam)
        violation = cand[0][1]
        worst = cand[0][0]
        if violation >= -tol:
            termination = "converged"
            break
        if len(history) >= prob.max_cuts:
            termination = "max_cuts"
            break

        x_new = None
        for p, v in cand:
            if v >= -tol:
                break
            row = np.asarray(prob.h_matrix(p[None, :]), dtype=float)[0]
            gval = float(np.asarray(prob.gain(p[None, :])).ravel()[0])
            if not coverable(row, gval):
                uncovered = p
                continue
            if np.any(np.max(np.abs(cuts - p) / width, axis=1) < 1e-10):
                continue
            x_new = p
            break
        if x_new is None:
            cand = candidates(lam, dense=True)
            violation = cand[0][1]
            worst = cand[0][0]
            if violation >= -tol:
                termination = "converged"
                break
            for p, v in cand:
                if v >= -tol:
                    break
                row = np.asarray(prob.h_matrix(p[None, :]), dtype=float)[0]
                gval = float(np.asarray(prob.gain(p[None, :])).ravel()[0])
                if not coverable(row, gval):
                    uncovered = p
                    continue
                if np.any(np.max(np.abs(cuts - p) / width, axis=1) < 1e-10):
                    continue
                x_new = p
                break
            if x_new is None:
                termination = "uncovered" if uncovered is not None else "stalled"
                break
        cuts = np.vstack([cuts, x_new[None, :]])
        H = np.vstack([H, np.asarray(prob.h_matrix(x_new[None, :]), dtype=float)])
        g = np.append(g, float(np.asarray(prob.gain(x_new[None, :])).ravel()[0]))

    return MajorantSolution(
        lam=lam,
        objective=history[-1],
        cuts=cuts,
        history=history,
        final_violation=float(violation),
        certified=(termination == "converged"),
        termination=termination,
        worst_point=worst,
        uncovered_point=uncovered,
    )


def verify_on_grid(h_matrix, gain, box: Box, lam: np.ndarray,
                   n_points: int = 100_000, start: int = 1, chunk: int = 20_000):
    """Minimum slack of sum lam_i h_i - g over a low-discrepancy grid.

    Returns (min_slack, argmin_point).  ``start`` offsets the Halton sequence
    so that independent checks can use disjoint grids.
    """
    best = math.inf
    best_p = None
    done = 0
    while done < n_points:
        k = min(chunk, n_points - done)
        P = box.halton_points(k, start=start + done)
        slack = np.asarray(h_matrix(P), dtype=float) @ lam - np.asarray(
            gain(P), dtype=float)
        i = int(np.argmin(slack))
        if slack[i] < best:
            best = float(slack[i])
            best_p = P[i]
        done += k
    return best, best_p
