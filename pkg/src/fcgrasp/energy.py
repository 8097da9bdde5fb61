"""Grasp energies and their gradients with respect to (translation, rotation, q).

Composite energy

    E = E_fc + w_dis E_dis + w_pen E_pen + w_spen E_spen + w_joints E_joints

The force-closure term ``E_fc`` comes in several flavours selected by
``EnergyWeights.variant``:

* ``graspqp``         ||W g*|| exp(-prod sigma(W)),  g* = argmin ||W g||, 1 <= g <= u
* ``graspqp_no_exp``  ||W g*||
* ``dexgraspnet``     ||sum of frictionless contact wrenches||
* ``gendexgrasp``     the dexgraspnet term with normal-weighted distances
* ``constrained_ii``  ||W a*|| exp(-prod sigma(W)),  a* >= 0, sum a* = N
* ``barrier``         ||W clip(g_b)|| exp(-prod sigma(W)) with g_b from the barrier solver
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import qp as qpmod
from .geometry import sdf_eval
from .gripper import direction_jacobians, forward_kinematics, point_jacobians
from .wrench import DEFAULT_MU, DEFAULT_TORQUE_WEIGHT

VARIANTS = ("graspqp", "graspqp_no_exp", "dexgraspnet", "gendexgrasp", "constrained_ii", "barrier")
SIGMA_FLOOR = 1e-9
RESIDUAL_FLOOR = 1e-12
# flags marking points where the energy is not differentiable; "outside_grid"
# is informational only (the extrapolated field is smooth off the grid box)
NONSMOOTH_FLAGS = frozenset({"qp_not_converged", "degenerate_active_set", "singular_value_floor",
                             "zero_residual", "sdf_nonsmooth"})


@dataclass
class EnergyWeights:
    w_dis: float = 100.0
    w_pen: float = 100.0
    w_spen: float = 10.0
    w_joints: float = 1.0
    mu: float = DEFAULT_MU
    upper: float = qpmod.DEFAULT_UPPER
    torque_weight: float = DEFAULT_TORQUE_WEIGHT
    variant: str = "graspqp"
    # None picks the variant's own convention (normal weighting everywhere except dexgraspnet)
    normal_weighted_dis: bool | None = None

    def __post_init__(self):
        self.variant = self.variant.replace("-", "_")
        if self.variant == "gendexgrasp_dis":
            self.variant = "gendexgrasp"
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown energy variant {self.variant!r}")
        for f in ("w_dis", "w_pen", "w_spen", "w_joints", "mu"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be non-negative")
        if not self.upper > 1:
            raise ValueError("upper bound on contact forces must exceed 1")

    @property
    def weighted_dis(self):
        if self.normal_weighted_dis is not None:
            return bool(self.normal_weighted_dis)
        return self.variant != "dexgraspnet"

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class EnergyBreakdown:
    e_fc: float
    e_dis: float
    e_pen: float
    e_spen: float
    e_joints: float
    total: float
    gamma: np.ndarray | None = None
    sigma_product: float = 0.0
    qp_converged: bool = True
    flags: set = field(default_factory=set)

    def as_dict(self):
        return {"e_fc": self.e_fc, "e_dis": self.e_dis, "e_pen": self.e_pen, "e_spen": self.e_spen,
                "e_joints": self.e_joints, "total": self.total, "sigma_product": self.sigma_product}


# ---------------------------------------------------------------------------
# force closure


def edge_jacobian(m, mu):
    """Pyramid edges around unit ``m`` and their derivative d edge / d m.

    Returns (edges (4, 3), jac (4, 3, 3)). The seed axis of the tangent
    basis is treated as locally constant.
    """
    e, J = _edge_jacobians(np.asarray(m, dtype=float)[None], mu)
    return e[0], J[0]


def _cross(a, b):
    # row-wise cross product; np.cross is slow on small arrays
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def _hats(v):
    H = np.zeros(v.shape[:-1] + (3, 3))
    H[..., 0, 1], H[..., 0, 2] = -v[..., 2], v[..., 1]
    H[..., 1, 0], H[..., 1, 2] = v[..., 2], -v[..., 0]
    H[..., 2, 0], H[..., 2, 1] = -v[..., 1], v[..., 0]
    return H


def _edge_jacobians(M, mu):
    """Vectorized edge_jacobian over unit vectors M (k, 3): (k, 4, 3), (k, 4, 3, 3)."""
    k = len(M)
    I = np.eye(3)
    A = I[np.argmin(np.abs(M), axis=1)]
    am = np.sum(A * M, axis=1)
    V = A - am[:, None] * M
    nv = np.sqrt(np.sum(V * V, axis=1))
    t1 = V / nv[:, None]
    t2 = _cross(M, t1)
    dv = -M[:, :, None] * A[:, None, :] - am[:, None, None] * I
    P = I - t1[:, :, None] * t1[:, None, :]
    dt1 = P @ dv / nv[:, None, None]
    # d(m x t1) = -[t1]x dm + [m]x dt1
    dt2 = -_hats(t1) + _hats(M) @ dt1
    c = 1.0 / np.sqrt(1.0 + mu * mu)
    edges = c * np.stack([M + mu * t1, M - mu * t1, M + mu * t2, M - mu * t2], axis=1)
    jac = c * np.stack([I + mu * dt1, I - mu * dt1, I + mu * dt2, I - mu * dt2], axis=1)
    return edges.reshape(k, 4, 3), jac


def _force_directions(normals, mu):
    """Inward force directions per column plus d dir / d normal."""
    k = len(normals)
    if mu == 0:
        dirs = -normals
        jac = np.broadcast_to(-np.eye(3), (k, 3, 3)).copy()
        return dirs, jac, np.arange(k)
    e, J = _edge_jacobians(-normals, mu)
    return e.reshape(-1, 3), -J.reshape(-1, 3, 3), np.repeat(np.arange(k), 4)


def sigma_product_and_grad(W):
    """prod_i sigma_i(W) over 6 singular values, its gradient, and a flag.

    The flag marks points where the product is not differentiable (a
    vanishing singular value) or numerically delicate.
    """
    W = np.asarray(W, dtype=float)
    if W.shape[1] < 6:
        return 0.0, np.zeros_like(W), False
    U, s, Vt = np.linalg.svd(W, full_matrices=False)
    # numerically rank-deficient matrices get an exact zero, as in matrix_rank
    s = np.where(s > max(W.shape) * np.finfo(float).eps * s[0], s, 0.0)
    prod = float(np.prod(s))
    flagged = bool(s[-1] < SIGMA_FLOOR * max(s[0], 1.0))
    # product of all the other singular values, without dividing by s_i
    pre = np.concatenate([[1.0], np.cumprod(s[:-1])])
    suf = np.concatenate([np.cumprod(s[::-1][:-1])[::-1], [1.0]])
    G = (U * (pre * suf)) @ Vt
    return prod, G, flagged


@dataclass
class FcResult:
    value: float
    grad_points: np.ndarray | None
    grad_normals: np.ndarray | None
    gamma: np.ndarray | None
    sigma_product: float
    residual: float
    converged: bool = True
    flags: set = field(default_factory=set)
    W: np.ndarray | None = None


def _contacts(contacts):
    if isinstance(contacts, tuple):
        p, n = contacts
    else:
        p = np.array([c.point for c in contacts])
        n = np.array([c.normal for c in contacts])
    p = np.atleast_2d(np.asarray(p, dtype=float))
    n = np.atleast_2d(np.asarray(n, dtype=float))
    return p, n / np.linalg.norm(n, axis=1, keepdims=True)


def fc_from_wrench(W, variant="graspqp", upper=qpmod.DEFAULT_UPPER, grad=False):
    """E_FC of a 6 x N wrench matrix and, with ``grad``, its derivative dE/dW."""
    W = np.asarray(W, dtype=float)
    flags = set()
    converged = True
    sol = None
    use_exp = variant in ("graspqp", "constrained_ii", "barrier")
    if variant in ("dexgraspnet", "gendexgrasp"):
        gamma = np.ones(W.shape[1])
    elif variant in ("graspqp", "graspqp_no_exp"):
        sol = qpmod.solve_box_qp(qpmod.BoxQp(W.T @ W, None, 1.0, upper))
        gamma, converged = sol.z, sol.converged
    elif variant == "constrained_ii":
        sol = qpmod.solve_sum_constrained_qp(W.T @ W)
        gamma, converged = sol.z, sol.converged
    else:
        res = qpmod.solve_barrier_unconstrained(W, upper)
        gamma = res.gamma_clipped
        if not res.converged:
            flags.add("barrier_max_iter")
    if not converged:
        flags.add("qp_not_converged")

    r = W @ gamma
    residual = float(np.linalg.norm(r))
    if use_exp:
        prod, dprod, bad = sigma_product_and_grad(W)
        factor = float(np.exp(-prod))
        if bad:
            flags.add("singular_value_floor")
    else:
        s = np.linalg.svd(W, compute_uv=False)
        prod, dprod, factor = sigma_product_and_grad(W)[0], None, 1.0
    value = residual * factor
    out = FcResult(value, None, None, gamma, prod, residual, converged, flags, W)
    if not grad:
        return out, None

    # d residual / dW at the optimum (the optimal gamma is stationary, so
    # its own sensitivity only enters through the implicit QP term below)
    if residual > RESIDUAL_FLOOR:
        dW = np.outer(r, gamma) / residual
    else:
        dW = np.zeros_like(W)
        flags.add("zero_residual")
    if variant in ("graspqp", "graspqp_no_exp") and residual > RESIDUAL_FLOOR:
        H = W.T @ W
        qp = qpmod.BoxQp(H, None, 1.0, upper)
        # objective 0.5 z^T H z; upstream through z* is H z*
        g = qpmod.qp_gradients(qp, sol, H @ gamma)
        dH = g.dH / residual
        dW = dW + W @ (dH + dH.T)
        if np.any(np.abs(sol.multipliers[sol.status != qpmod.FREE]) < qpmod.TIE_TOL):
            flags.add("degenerate_active_set")
    dW = factor * dW
    if use_exp:
        dW = dW - value * dprod
    return out, dW


def force_closure_energy(contacts, weights=None, grad=False):
    """Force-closure energy of contacts ``(points - com, outward normals)``."""
    wts = weights or EnergyWeights()
    points, normals = _contacts(contacts)
    variant = wts.variant
    frictionless = variant in ("dexgraspnet", "gendexgrasp")
    mu = 0.0 if frictionless else wts.mu
    dirs, djac, col_contact = _force_directions(normals, mu)
    st = np.sqrt(wts.torque_weight)
    W = np.vstack([dirs.T, st * _cross(dirs, points[col_contact]).T])
    out, dW = fc_from_wrench(W, variant, wts.upper, grad=grad)
    if not grad:
        return out

    gf = dW[:3].T  # (N, 3) per column, force part
    gt = st * dW[3:].T  # torque part, already divided out of the sqrt weight
    # torque = f x c:  d/dc = [f]x ,  d/df = -[c]x
    pts = points[col_contact]
    g_points_col = _cross(gt, dirs)  # [f]x^T g = g x f
    g_dirs = gf + _cross(pts, gt)  # (-[c]x)^T g = c x g
    g_points = np.zeros_like(points)
    np.add.at(g_points, col_contact, g_points_col)
    g_normals = np.zeros_like(normals)
    np.add.at(g_normals, col_contact, np.einsum("kij,ki->kj", djac, g_dirs))
    out.grad_points, out.grad_normals = g_points, g_normals
    return out


def e_fc_graspqp(contacts, weights=None):
    w = _with_variant(weights, "graspqp")
    r = force_closure_energy(contacts, w)
    return r.value, r.gamma, r.sigma_product


def e_fc_dexgraspnet(contacts, weights=None):
    return force_closure_energy(contacts, _with_variant(weights, "dexgraspnet")).value


def e_fc_constrained_ii(contacts, weights=None):
    return force_closure_energy(contacts, _with_variant(weights, "constrained_ii")).value


def _with_variant(weights, variant):
    base = weights.as_dict() if weights is not None else {}
    base["variant"] = variant
    return EnergyWeights(**base)


# ---------------------------------------------------------------------------
# distance and regularizers


def normal_weight(facing, object_normal):
    """exp(1 - <n_c, n_o>) with n_c the direction the contact pushes along."""
    return np.exp(1.0 - np.sum(facing * object_normal, axis=-1))


def e_dis(distance, facing=None, object_normal=None, weighted=False):
    """Sum of |sdf| at the active contacts, optionally normal-weighted."""
    d = np.abs(np.asarray(distance, dtype=float))
    if not weighted:
        return float(d.sum())
    return float((normal_weight(facing, object_normal) * d).sum())


def e_pen_spheres(distances, radii):
    """sum max(0, r - sdf(center)) over the gripper collision spheres."""
    return float(np.maximum(0.0, np.asarray(radii) - np.asarray(distances)).sum())


def e_spen_spheres(centers, radii, pairs):
    if len(pairs) == 0:
        return 0.0
    a, b = pairs[:, 0], pairs[:, 1]
    dist = np.linalg.norm(centers[a] - centers[b], axis=1)
    return float(np.maximum(0.0, radii[a] + radii[b] - dist).sum())


def e_joints(q, lower, upper):
    q = np.asarray(q, dtype=float)
    return float((np.maximum(0.0, q - upper) ** 2 + np.maximum(0.0, lower - q) ** 2).sum())


# ---------------------------------------------------------------------------
# full energy on a batch of grasps


@dataclass
class BatchEnergy:
    total: np.ndarray  # (B,)
    breakdowns: list
    grad: np.ndarray | None  # (B, 6 + n_q)
    flags: list  # per grasp set of strings


def evaluate_grasps(model, obj, translation, quat, q, contacts, weights, grad=True):
    """Energies (and gradients) of B grasps sharing one gripper and object.

    ``contacts`` is an integer array (B, k) of active candidate indices.
    """
    t = np.atleast_2d(translation)
    quat = np.atleast_2d(quat)
    q = np.atleast_2d(q)
    contacts = np.atleast_2d(contacts)
    B, k = contacts.shape
    fk = forward_kinematics(model, t, quat, q)
    rows = np.arange(B)[:, None]
    cpts = fk.candidate_points[rows, contacts]  # (B,k,3)
    cnrm = fk.candidate_normals[rows, contacts]
    cs = sdf_eval(obj.sdf, cpts, hessian=grad)
    gnorm = np.maximum(np.linalg.norm(cs.gradient, axis=-1, keepdims=True), 1e-12)
    n_obj = cs.gradient / gnorm
    ss = sdf_eval(obj.sdf, fk.sphere_centers)
    radii = model.sphere_radii

    totals = np.empty(B)
    breakdowns, flag_list = [], []
    G = np.zeros((B, 6 + model.n_q)) if grad else None
    if grad:
        Jc = point_jacobians(model, fk, cpts, model.contact_link[contacts])  # (B,k,3,P)
        Jn = direction_jacobians(model, fk, cnrm, model.contact_link[contacts])
        Js = point_jacobians(model, fk, fk.sphere_centers, model.sphere_link)
    wdis = weights.weighted_dis
    for b in range(B):
        flags = set()
        fc = force_closure_energy((cpts[b] - obj.com, n_obj[b]), weights, grad=grad)
        flags |= fc.flags
        d = cs.distance[b]
        facing = -cnrm[b]
        wn = normal_weight(facing, n_obj[b]) if wdis else np.ones(k)
        edis = float((wn * np.abs(d)).sum())
        pen_active = radii - ss.distance[b] > 0
        epen = float((radii - ss.distance[b])[pen_active].sum())
        espen = e_spen_spheres(fk.sphere_centers[b], radii, model.sphere_pairs)
        ejoint = e_joints(q[b], model.lower, model.upper)
        total = fc.value + weights.w_dis * edis + weights.w_pen * epen + weights.w_spen * espen \
            + weights.w_joints * ejoint
        if np.any(cs.near_face[b]) or np.any(np.abs(d) < 1e-9):
            flags.add("sdf_nonsmooth")
        if np.any(cs.outside[b]):
            flags.add("outside_grid")
        totals[b] = total
        breakdowns.append(EnergyBreakdown(fc.value, edis, epen, espen, ejoint, total, fc.gamma,
                                          fc.sigma_product, fc.converged, flags))
        flag_list.append(flags)
        if not grad:
            continue

        # d n_obj / d c = (I - n n^T) Hess / |grad|
        n = n_obj[b]
        P = (np.eye(3)[None] - n[:, :, None] * n[:, None, :]) / gnorm[b][:, :, None]
        dn_dc = P @ cs.hessian[b]  # (k,3,3)
        g_c = fc.grad_points.copy()
        g_nobj = fc.grad_normals.copy()
        # distance term
        sgn = np.sign(d)
        g_c += weights.w_dis * (wn * sgn)[:, None] * cs.gradient[b]
        g_facing = np.zeros((k, 3))
        if wdis:
            # d/dv exp(1 - <f, v>) = -exp(...) f
            coef = weights.w_dis * wn * np.abs(d)
            g_nobj += -coef[:, None] * facing
            g_facing = -coef[:, None] * n
        g_c += np.einsum("kij,ki->kj", dn_dc, g_nobj)
        g = np.einsum("kip,ki->p", Jc[b], g_c)
        g += np.einsum("kip,ki->p", Jn[b], -g_facing)  # facing = -candidate normal
        # penetration of collision spheres
        if weights.w_pen > 0 and pen_active.any():
            g_s = -weights.w_pen * ss.gradient[b][pen_active]
            g += np.einsum("sip,si->p", Js[b][pen_active], g_s)
        if weights.w_spen > 0 and len(model.sphere_pairs):
            pa, pb = model.sphere_pairs[:, 0], model.sphere_pairs[:, 1]
            diff = fk.sphere_centers[b][pa] - fk.sphere_centers[b][pb]
            dist = np.linalg.norm(diff, axis=1)
            act = radii[pa] + radii[pb] - dist > 0
            if act.any():
                u = diff[act] / np.maximum(dist[act], 1e-12)[:, None]
                g -= weights.w_spen * (np.einsum("sip,si->p", Js[b][pa[act]], u)
                                       - np.einsum("sip,si->p", Js[b][pb[act]], u))
        if weights.w_joints > 0:
            g[6:] += weights.w_joints * 2.0 * (np.maximum(0.0, q[b] - model.upper)
                                               - np.maximum(0.0, model.lower - q[b]))
        G[b] = g
    return BatchEnergy(totals, breakdowns, G, flag_list)


def total_energy(grasp, obj, model, weights):
    """EnergyBreakdown of a single grasp."""
    be = evaluate_grasps(model, obj, grasp.translation, grasp.quat, grasp.q, grasp.contacts, weights, grad=False)
    return be.breakdowns[0]


def energy_gradient(grasp, obj, model, weights):
    """Gradient w.r.t. (translation 3, rotation tangent 3, q) and its flags."""
    be = evaluate_grasps(model, obj, grasp.translation, grasp.quat, grasp.q, grasp.contacts, weights, grad=True)
    return be.grad[0], be.flags[0]
