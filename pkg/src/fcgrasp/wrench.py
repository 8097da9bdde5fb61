"""Contact wrenches, friction pyramids and wrench-matrix utilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

DEFAULT_MU = 0.2
DEFAULT_TORQUE_WEIGHT = 5.0
SPAN_TOL = 1e-8


@dataclass
class ContactFrame:
    point: np.ndarray  # relative to the object's center of mass
    normal: np.ndarray  # outward object normal

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=float)
        n = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise ValueError("contact normal must be non-zero")
        self.normal = n / norm


@dataclass
class WrenchMatrix:
    columns: np.ndarray  # 6 x N, torque rows already scaled by sqrt(torque_weight)
    torque_weight: float
    contact_index: np.ndarray
    edge_index: np.ndarray

    @property
    def n_columns(self):
        return self.columns.shape[1]


def contact_wrench(c, f):
    """Wrench ``[f; f x c]`` of force ``f`` applied at ``c``."""
    f = np.asarray(f, dtype=float)
    return np.concatenate([f, np.cross(f, np.asarray(c, dtype=float))], axis=-1)


def tangent_basis(n):
    """Deterministic orthonormal tangents (t1, t2) at unit normal(s) ``n``.

    The seed axis is the world axis along which ``n`` has the smallest
    magnitude (first one on ties), Gram-Schmidt'd against ``n``.
    """
    n = np.asarray(n, dtype=float)
    seed = np.eye(3)[np.argmin(np.abs(n), axis=-1)]
    t1 = seed - np.sum(seed * n, axis=-1, keepdims=True) * n
    t1 /= np.linalg.norm(t1, axis=-1, keepdims=True)
    t2 = np.cross(n, t1)
    return t1, t2


def friction_cone_edges(n, mu=DEFAULT_MU):
    """Four unit edge directions of the friction pyramid about ``n``.

    Shape (..., 4, 3); order is +t1, -t1, +t2, -t2.
    """
    if mu < 0:
        raise ValueError("friction coefficient must be non-negative")
    n = np.asarray(n, dtype=float)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("zero normal")
    n = n / norm
    t1, t2 = tangent_basis(n)
    raw = np.stack([n + mu * t1, n - mu * t1, n + mu * t2, n - mu * t2], axis=-2)
    return raw / np.sqrt(1.0 + mu * mu)


def cone_force_directions(normals, mu):
    """Inward force directions of every pyramid edge, one row per column.

    Object normals point outward, contact forces push inward, so the
    edges are built around ``-n``. Frictionless contacts contribute a
    single column each.
    """
    normals = np.asarray(normals, dtype=float)
    if mu == 0:
        return -normals, np.arange(len(normals)), np.zeros(len(normals), dtype=int)
    edges = friction_cone_edges(-normals, mu)
    k = len(normals)
    return edges.reshape(-1, 3), np.repeat(np.arange(k), 4), np.tile(np.arange(4), k)


def build_wrench_matrix(contacts, mu=DEFAULT_MU, torque_weight=DEFAULT_TORQUE_WEIGHT):
    """6 x N wrench matrix of friction-pyramid edges about the center of mass.

    ``contacts`` is a list of ContactFrame or a (points, normals) pair of
    arrays. Torque rows are scaled by ``sqrt(torque_weight)`` so the plain
    Euclidean norm is the weighted wrench norm.
    """
    points, normals = _unpack(contacts)
    if len(points) == 0:
        raise ValueError("need at least one contact")
    dirs, ci, ei = cone_force_directions(normals, mu)
    w = contact_wrench(points[ci], dirs)
    w[:, 3:] *= np.sqrt(torque_weight)
    return WrenchMatrix(w.T.copy(), float(torque_weight), ci, ei)


def _unpack(contacts):
    if isinstance(contacts, tuple) and len(contacts) == 2:
        return np.atleast_2d(np.asarray(contacts[0], float)), np.atleast_2d(np.asarray(contacts[1], float))
    pts = np.array([c.point for c in contacts]).reshape(-1, 3)
    nrm = np.array([c.normal for c in contacts]).reshape(-1, 3)
    return pts, nrm


def wrench_svd(W):
    """Six singular values, descending, zero-padded when N < 6."""
    W = W.columns if isinstance(W, WrenchMatrix) else np.asarray(W, dtype=float)
    s = np.linalg.svd(W, compute_uv=False)
    out = np.zeros(6)
    out[: min(6, len(s))] = s[:6]
    return out


def positive_span_margin(W):
    """Largest t with W a = 0, sum(a) = N, a >= t (None if infeasible)."""
    W = W.columns if isinstance(W, WrenchMatrix) else np.asarray(W, dtype=float)
    m, n = W.shape
    # variables (a_1..a_n, t); maximize t
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_eq = np.zeros((m + 1, n + 1))
    A_eq[:m, :n] = W
    A_eq[m, :n] = 1.0
    b_eq = np.zeros(m + 1)
    b_eq[m] = n
    A_ub = np.hstack([-np.eye(n), np.ones((n, 1))])
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(n), A_eq=A_eq, b_eq=b_eq,
                  bounds=[(0, None)] * n + [(None, 1.0)], method="highs")
    if res.status != 0:
        return None
    return float(res.x[-1])


def positively_spans(W, tol=SPAN_TOL):
    """True iff the columns of ``W`` positively span R^6.

    Rank 6 plus a strictly positive null-space combination.
    """
    W = W.columns if isinstance(W, WrenchMatrix) else np.asarray(W, dtype=float)
    if W.shape[1] < W.shape[0] + 1:
        return False
    if np.linalg.matrix_rank(W) < W.shape[0]:
        return False
    t = positive_span_margin(W)
    return t is not None and t > tol
