"""Box-constrained convex QP, its implicit derivative, and the barrier variant.

The force-closure program is

    min_z  0.5 z^T H z + g^T z    s.t.  l <= z <= u

with ``H = W^T W`` (rank at most 6, so usually singular). A primal
active-set method handles the singular reduced Hessians through an
eigenvalue pseudo-inverse and null-space descent steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

KKT_TOL = 1e-8
TIE_TOL = 1e-10
DEFAULT_UPPER = 50.0
BARRIER_TAU = 100.0
BARRIER_EPS = 1e-6

# working-set status codes
FREE, AT_LOWER, AT_UPPER = 0, 1, 2


@dataclass
class BoxQp:
    H: np.ndarray
    g: np.ndarray | None = None
    lower: float | np.ndarray = 1.0
    upper: float | np.ndarray = DEFAULT_UPPER

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = self.H.shape[0]
        if self.H.shape != (n, n):
            raise ValueError("H must be square")
        if np.abs(self.H - self.H.T).max(initial=0.0) > 1e-10 * max(1.0, np.abs(self.H).max(initial=0.0)):
            raise ValueError("H must be symmetric")
        self.g = np.zeros(n) if self.g is None else np.asarray(self.g, dtype=float).reshape(n)
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (n,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (n,)).copy()
        if np.any(self.lower >= self.upper):
            raise ValueError("need lower < upper in every coordinate")

    @property
    def n(self):
        return self.H.shape[0]


@dataclass
class QpSolution:
    z: np.ndarray
    objective: float
    status: np.ndarray  # FREE / AT_LOWER / AT_UPPER per coordinate
    multipliers: np.ndarray  # >= 0 on active bounds, 0 on free coordinates
    iterations: int
    converged: bool
    kkt_residual: float
    eq_multiplier: float = 0.0

    @property
    def active(self):
        return self.status != FREE


# ---------------------------------------------------------------------------
# compiled core


@njit(cache=True)
def _sym_solve(M, rhs):
    """Pseudo-inverse solve of a symmetric system.

    Returns (x, r) where ``r = M x - rhs`` is the part of ``rhs`` outside
    the numerical range of ``M``.
    """
    w, V = np.linalg.eigh(M)
    top = 0.0
    for k in range(w.shape[0]):
        top = max(top, abs(w[k]))
    cut = 1e-11 * max(top, 1e-300)
    c = V.T @ rhs
    for k in range(w.shape[0]):
        if abs(w[k]) > cut:
            c[k] /= w[k]
        else:
            c[k] = 0.0
    x = V @ c
    return x, M @ x - rhs


@njit(cache=True)
def _active_set(H, g, lo, hi, use_eq, eq_rhs, z0, status0, max_iter):
    """Primal active-set iteration for box (and optional sum) constraints.

    ``z0`` must be feasible and consistent with ``status0``.
    """
    n = H.shape[0]
    hmax = 1.0
    for i in range(n):
        for j in range(n):
            hmax = max(hmax, abs(H[i, j]))
    z = z0.copy()
    status = status0.copy()
    lam = np.zeros(n)
    nu = 0.0
    it = 0
    converged = False
    while it < max_iter:
        it += 1
        grad = H @ z + g
        nf = 0
        for i in range(n):
            if status[i] == FREE:
                nf += 1
        free = np.empty(nf, dtype=np.int64)
        k = 0
        for i in range(n):
            if status[i] == FREE:
                free[k] = i
                k += 1
        m = nf + 1 if use_eq else nf
        p = np.zeros(n)
        null_step = False
        if nf > 0:
            M = np.zeros((m, m))
            rhs = np.zeros(m)
            for a in range(nf):
                rhs[a] = -grad[free[a]]
                for b in range(nf):
                    M[a, b] = H[free[a], free[b]]
                if use_eq:
                    M[a, nf] = 1.0
                    M[nf, a] = 1.0
            x, r = _sym_solve(M, rhs)
            scale = 1.0
            for a in range(m):
                scale = max(scale, abs(rhs[a]))
            rn = 0.0
            for a in range(m):
                rn = max(rn, abs(r[a]))
            if rn > 1e-9 * scale:
                # objective is linear and decreasing along this null direction
                null_step = True
                for a in range(nf):
                    p[free[a]] = -r[a]
            else:
                for a in range(nf):
                    p[free[a]] = x[a]
                if use_eq:
                    nu = x[nf]
        pmax = 0.0
        zmax = 1.0
        gmax = 0.0
        for i in range(n):
            pmax = max(pmax, abs(p[i]))
            zmax = max(zmax, abs(z[i]))
            if status[i] == FREE:
                gmax = max(gmax, abs(grad[i] + nu))
        # a free gradient at rounding level is stationary even when a
        # near-singular reduced Hessian still suggests a tiny step
        if not null_step and (pmax <= 1e-13 * zmax or gmax <= 1e-13 * hmax * zmax):
            # stationary on the working set: check multipliers
            grad = H @ z + g
            if use_eq and nf > 0:
                s = 0.0
                for a in range(nf):
                    s += grad[free[a]]
                nu = -s / nf
            worst = -TIE_TOL
            drop = -1
            # most-negative release is fast; smallest-index release (Bland)
            # cannot cycle, so fall back to it on degenerate problems
            bland = it > 4 * n
            for i in range(n):
                if status[i] == AT_LOWER:
                    lam[i] = grad[i] + nu
                elif status[i] == AT_UPPER:
                    lam[i] = -(grad[i] + nu)
                else:
                    lam[i] = 0.0
                if status[i] != FREE and lam[i] < worst:
                    worst = lam[i]
                    drop = i
                    if bland:
                        break
            if drop < 0:
                converged = True
                break
            status[drop] = FREE
            lam[drop] = 0.0
            continue
        # ratio test against the inactive bounds
        alpha = 1.0 if not null_step else np.inf
        block = -1
        for i in range(n):
            if status[i] != FREE:
                continue
            if p[i] < 0.0:
                t = (lo[i] - z[i]) / p[i]
                if t < alpha:
                    alpha = t
                    block = i
            elif p[i] > 0.0:
                t = (hi[i] - z[i]) / p[i]
                if t < alpha:
                    alpha = t
                    block = i
        if block < 0 and null_step:
            break  # unbounded; cannot happen with finite bounds
        alpha = max(alpha, 0.0)
        for i in range(n):
            z[i] += alpha * p[i]
        if block >= 0:
            if p[block] < 0.0:
                status[block] = AT_LOWER
                z[block] = lo[block]
            else:
                status[block] = AT_UPPER
                z[block] = hi[block]
    for i in range(n):
        z[i] = min(max(z[i], lo[i]), hi[i])
    return z, status, lam, nu, it, converged


@njit(cache=True)
def _box_qp(H, g, lo, hi, max_iter):
    n = H.shape[0]
    status = np.full(n, AT_LOWER, dtype=np.int64)
    return _active_set(H, g, lo, hi, False, 0.0, lo.copy(), status, max_iter)


def _kkt_residual(H, g, z, status, lam, nu=0.0):
    grad = H @ z + g + nu
    stat = grad.copy()
    stat[status == AT_LOWER] -= lam[status == AT_LOWER]
    stat[status == AT_UPPER] += lam[status == AT_UPPER]
    return float(np.abs(stat).max(initial=0.0))


def solve_box_qp(qp, max_iter=None):
    """Global minimizer of the box QP by primal active set from ``z0 = l``."""
    if not isinstance(qp, BoxQp):
        qp = BoxQp(qp)
    n = qp.n
    cap = 50 * n if max_iter is None else int(max_iter)
    z, status, lam, _, it, ok = _box_qp(qp.H, qp.g, qp.lower, qp.upper, cap)
    res = _kkt_residual(qp.H, qp.g, z, status, lam)
    obj = float(0.5 * z @ qp.H @ z + qp.g @ z)
    return QpSolution(z, obj, status, lam, int(it), bool(ok and res < KKT_TOL * max(1.0, np.abs(qp.H).max())), res)


def solve_sum_constrained_qp(H, total=None, max_iter=None):
    """min 0.5 a^T H a  s.t.  a >= 0, sum(a) = total (default N).

    Starts from the uniform point a = total / N with every coordinate free.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    n = H.shape[0]
    total = float(n if total is None else total)
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    z0 = np.full(n, total / n)
    status = np.zeros(n, dtype=np.int64)
    cap = 50 * n if max_iter is None else int(max_iter)
    z, status, lam, nu, it, ok = _active_set(H, np.zeros(n), lo, hi, True, total, z0, status, cap)
    # restore the equality exactly after clipping
    z *= total / z.sum()
    res = _kkt_residual(H, np.zeros(n), z, status, lam, nu)
    return QpSolution(z, float(0.5 * z @ H @ z), status, lam, int(it),
                      bool(ok and res < KKT_TOL * max(1.0, np.abs(H).max())), res, float(nu))


# ---------------------------------------------------------------------------
# implicit differentiation


@dataclass
class QpGradient:
    dH: np.ndarray
    dg: np.ndarray
    regularized: bool
    free: np.ndarray


def qp_gradients(qp, sol, upstream):
    """Backpropagate ``dL/dz*`` to ``dL/dH`` (and ``dL/dg``).

    Differentiates the stationarity condition on the free coordinates,
    ``(H z + g)_F = 0``, holding active bounds fixed. Coordinates sitting
    on a bound with a vanishing multiplier count as active. A singular
    reduced Hessian is handled with the pseudo-inverse (flagged).
    """
    if not isinstance(qp, BoxQp):
        qp = BoxQp(qp)
    v = np.asarray(upstream, dtype=float)
    free = np.flatnonzero(sol.status == FREE)
    y = np.zeros(qp.n)
    regularized = False
    if len(free):
        Hff = qp.H[np.ix_(free, free)]
        w, V = np.linalg.eigh(Hff)
        cut = 1e-11 * max(np.abs(w).max(), 1e-300)
        regularized = bool(np.any(np.abs(w) <= cut))
        inv = np.where(np.abs(w) > cut, 1.0 / np.where(np.abs(w) > cut, w, 1.0), 0.0)
        y[free] = V @ (inv * (V.T @ v[free]))
    z = sol.z
    dH = -0.5 * (np.outer(y, z) + np.outer(z, y))
    return QpGradient(dH, -y, regularized, free)


# ---------------------------------------------------------------------------
# barrier (unconstrained) variant


def barrier(gamma, upper=DEFAULT_UPPER, tau=BARRIER_TAU, eps=BARRIER_EPS):
    """Sum of the piecewise barrier over ``h = [gamma - 1, upper - gamma]``.

    Linear penalty ``-h`` where ``h < 0`` and ``-(1/tau) log(h + eps)``
    where ``h >= 0``; the two branches are mutually exclusive.
    """
    gamma = np.asarray(gamma, dtype=float)
    h = np.concatenate([gamma - 1.0, upper - gamma])
    neg = h < 0
    val = np.where(neg, -h, -np.log(np.where(neg, 1.0, h) + eps) / tau)
    return float(val.sum())


@njit(cache=True)
def _barrier_terms(gamma, upper, tau, eps):
    n = gamma.shape[0]
    val = 0.0
    grad = np.zeros(n)
    curv = np.zeros(n)
    for i in range(n):
        for side in range(2):
            h = gamma[i] - 1.0 if side == 0 else upper - gamma[i]
            sgn = 1.0 if side == 0 else -1.0
            if h < 0.0:
                val -= h
                grad[i] -= sgn
            else:
                val -= math.log(h + eps) / tau
                grad[i] -= sgn / (tau * (h + eps))
                curv[i] += 1.0 / (tau * (h + eps) ** 2)
    return val, grad, curv


@njit(cache=True)
def _barrier_objective(W, gamma, upper, tau, eps):
    r = W @ gamma
    s = math.sqrt(r @ r + 1e-12)
    bv, bg, bc = _barrier_terms(gamma, upper, tau, eps)
    WtR = W.T @ r
    grad = WtR / s + bg
    Hs = (W.T @ W) / s - np.outer(WtR, WtR) / s ** 3
    for i in range(gamma.shape[0]):
        Hs[i, i] += bc[i]
    return s + bv, grad, Hs


@njit(cache=True)
def _dogleg(W, upper, tau, eps, max_iter):
    n = W.shape[1]
    x = np.full(n, 0.5 * (1.0 + upper))
    f, g, B = _barrier_objective(W, x, upper, tau, eps)
    radius = 1.0
    it = 0
    converged = False
    while it < max_iter:
        it += 1
        gn = math.sqrt(g @ g)
        if gn < 1e-10:
            converged = True
            break
        # Cauchy point
        gBg = g @ B @ g
        if gBg > 0.0:
            tc = min(gn * gn / gBg, radius / gn)
        else:
            tc = radius / gn
        pc = -tc * g
        # Newton point on a slightly shifted model keeps the solve well posed
        w, V = np.linalg.eigh(B)
        shift = max(0.0, -w.min()) + 1e-10 * max(1.0, np.abs(w).max())
        pn = -(V @ ((V.T @ g) / (w + shift)))
        if math.sqrt(pn @ pn) <= radius:
            p = pn
        elif math.sqrt(pc @ pc) >= radius - 1e-15:
            p = pc
        else:
            d = pn - pc
            a = d @ d
            b = 2.0 * (pc @ d)
            c = pc @ pc - radius * radius
            t = (-b + math.sqrt(max(b * b - 4 * a * c, 0.0))) / (2 * a)
            p = pc + t * d
        pred = -(g @ p + 0.5 * (p @ B @ p))
        fn, gn_, Bn = _barrier_objective(W, x + p, upper, tau, eps)
        rho = (f - fn) / pred if pred > 0 else -1.0
        pnorm = math.sqrt(p @ p)
        if rho < 0.25:
            radius = 0.25 * pnorm
        elif rho > 0.75 and pnorm >= 0.99 * radius:
            radius = min(2.0 * radius, 1e3)
        if rho > 1e-4:
            x = x + p
            small = f - fn <= 1e-12 * (1.0 + abs(f))
            f, g, B = fn, gn_, Bn
            if small:
                converged = True
                break
        if radius < 1e-12:
            converged = True
            break
    return x, f, it, converged


@dataclass
class BarrierResult:
    gamma: np.ndarray  # raw minimizer (may leave [1, u])
    gamma_clipped: np.ndarray
    objective: float
    residual: float  # ||W clip(gamma)||
    iterations: int
    converged: bool


def barrier_objective(W, gamma, upper=DEFAULT_UPPER, tau=BARRIER_TAU, eps=BARRIER_EPS):
    return float(np.linalg.norm(W @ gamma)) + barrier(gamma, upper, tau, eps)


def solve_barrier_unconstrained(W, upper=DEFAULT_UPPER, tau=BARRIER_TAU, eps=BARRIER_EPS, max_iter=50):
    """Minimize ``||W gamma|| + barrier(gamma)`` by a dogleg trust region.

    Starts from the box midpoint. The reported residual is evaluated at
    the minimizer clipped into ``[1, upper]`` so it is a feasible value of
    the exact program.
    """
    if upper <= 1:
        raise ValueError("upper bound must exceed 1")
    W = np.ascontiguousarray(np.atleast_2d(np.asarray(W, dtype=float)))
    x, f, it, ok = _dogleg(W, float(upper), float(tau), float(eps), int(max_iter))
    xc = np.clip(x, 1.0, upper)
    return BarrierResult(x, xc, float(barrier_objective(W, x, upper, tau, eps)),
                         float(np.linalg.norm(W @ xc)), int(it), bool(ok))

