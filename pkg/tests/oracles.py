"""Independent reference implementations used only by the tests."""

import math

import numpy as np
from numba import njit
from scipy.optimize import linprog


@njit(cache=True)
def _fista_box(H, g, lo, hi, tol, max_iter):
    n = H.shape[0]
    L = max(np.linalg.eigvalsh(H).max(), 1e-12)
    x = lo.copy()
    y = x.copy()
    t = 1.0
    for it in range(max_iter):
        x_new = np.minimum(np.maximum(y - (H @ y + g) / L, lo), hi)
        step = np.abs(x_new - x).max()
        # gradient-mapping restart test; avoids comparing objective values
        # that are below their own rounding error near a zero optimum
        if (y - x_new) @ (x_new - x) > 0.0:
            t = 1.0
            y = x_new.copy()
        else:
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            y = x_new + (t - 1.0) / t_new * (x_new - x)
            t = t_new
        x = x_new
        if step < tol:
            break
    return x, 0.5 * x @ H @ x + g @ x


def projected_gradient_qp(H, g=None, lower=1.0, upper=50.0, tol=1e-10, max_iter=2_000_000):
    """Accelerated projected gradient with restarts for box QPs."""
    H = np.ascontiguousarray(H, dtype=float)
    n = H.shape[0]
    g = np.zeros(n) if g is None else np.asarray(g, dtype=float)
    lo = np.broadcast_to(np.asarray(lower, float), (n,)).copy()
    hi = np.broadcast_to(np.asarray(upper, float), (n,)).copy()
    x, f = _fista_box(H, g, lo, hi, tol, max_iter)
    return x, float(f)


def lp_positive_span(W, tol=1e-8):
    """Positive span test through a different LP: for each of the 12
    signed axis directions d, check that -d lies in the conic hull."""
    W = np.asarray(W, dtype=float)
    m, n = W.shape
    for k in range(m):
        for s in (1.0, -1.0):
            d = np.zeros(m)
            d[k] = s
            res = linprog(np.zeros(n), A_eq=W, b_eq=d, bounds=[(0, None)] * n, method="highs")
            if res.status != 0:
                return False
    return True


def exact_sphere_penetration(points, centers, radii):
    """Per-grasp max depth of ``points`` inside a union of spheres, in loops."""
    best = 0.0
    for p in points:
        for c, r in zip(centers, radii):
            d = r - math.dist(p, c)
            best = max(best, d)
    return best
