"""Diversity and quality metrics for synthesized grasps.

Stability is judged by an LP surrogate instead of a physics simulator: a
grasp resists a disturbance along an axis if bounded friction-cone forces
can cancel a pure force of that magnitude applied at the center of mass.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.spatial.transform import Rotation

from .geometry import sdf_eval
from .gripper import forward_kinematics, quat_to_matrix
from .qp import DEFAULT_UPPER
from .wrench import DEFAULT_MU, DEFAULT_TORQUE_WEIGHT, build_wrench_matrix

AXES = {"+x": (1, 0, 0), "-x": (-1, 0, 0), "+y": (0, 1, 0), "-y": (0, -1, 0), "+z": (0, 0, 1), "-z": (0, 0, -1)}
FORCE_LEVELS = (1.0, 2.0, 5.0, 10.0)


@dataclass(frozen=True)
class DiscretizationConfig:
    delta_r: float = 0.02  # m
    delta_phi: float = math.radians(4.0)
    delta_q: float = math.radians(1.15)
    delta_prismatic: float = 0.002  # m, prismatic joints
    bins: int = 32
    position_range: float = 0.5  # side of the object-centered cube used for histograms

    def __post_init__(self):
        if min(self.delta_r, self.delta_phi, self.delta_q, self.delta_prismatic, self.position_range) <= 0:
            raise ValueError("discretization steps must be positive")
        if self.bins <= 0:
            raise ValueError("bins must be positive")

    def coarsened(self, factor):
        return DiscretizationConfig(self.delta_r * factor, self.delta_phi * factor, self.delta_q * factor,
                                    self.delta_prismatic * factor, self.bins, self.position_range)


@dataclass
class GraspRecord:
    translation: np.ndarray  # relative to the object's center of mass
    quat: np.ndarray
    q: np.ndarray
    success: bool = True
    contacts: np.ndarray | None = None
    energies: dict = field(default_factory=dict)
    stability: dict = field(default_factory=dict)

    def key(self, config, joint_types=None):
        return grasp_key(self.translation, self.quat, self.q, config, joint_types)


# ---------------------------------------------------------------------------
# unique grasp rate


def grasp_key(translation, quat, q, config=None, joint_types=None):
    """Integer bin tuple: position by delta_r, intrinsic XYZ Euler angles by
    delta_phi and joints by delta_q (delta_prismatic for prismatic joints)."""
    config = config or DiscretizationConfig()
    pos = np.floor(np.asarray(translation, float) / config.delta_r)
    R = quat_to_matrix(np.asarray(quat, float))
    eul = np.floor(Rotation.from_matrix(R).as_euler("XYZ") / config.delta_phi)
    q = np.asarray(q, float)
    steps = np.full(len(q), config.delta_q)
    if joint_types is not None:
        steps[[t == "prismatic" for t in joint_types]] = config.delta_prismatic
    qk = np.floor(q / steps)
    return tuple(int(v) for v in np.concatenate([pos, eul, qk]))


def unique_grasp_rate(records, config=None, joint_types=None):
    if len(records) == 0:
        raise ValueError("need at least one record")
    config = config or DiscretizationConfig()
    keys = {r.key(config, joint_types) for r in records if r.success}
    return len(keys) / len(records)


# ---------------------------------------------------------------------------
# entropy


def axis_angle_to_spherical(rotation):
    """(r, theta, phi) of the axis-angle vector of a rotation.

    Accepts a 3x3 matrix or a (w, x, y, z) quaternion. The angle lies in
    [0, pi]; the identity maps to (0, 0, 0) and phi is 0 at the poles.
    """
    rotation = np.asarray(rotation, float)
    R = quat_to_matrix(rotation) if rotation.shape == (4,) else rotation
    v = Rotation.from_matrix(R).as_rotvec()
    r = float(np.linalg.norm(v))
    if r < 1e-12:
        return 0.0, 0.0, 0.0
    theta = float(np.arccos(np.clip(v[2] / r, -1.0, 1.0)))
    rho = math.hypot(v[0], v[1])
    phi = 0.0 if rho <= 1e-12 * r else float(math.atan2(v[1], v[0]))
    return r, theta, phi


def histogram_entropy(values, lo, hi, bins=32):
    """Shannon entropy (nats) of a fixed-range histogram; values are clipped into range."""
    values = np.clip(np.asarray(values, float), lo, hi)
    if hi <= lo:
        return 0.0
    counts, _ = np.histogram(values, bins=bins, range=(lo, hi))
    p = counts[counts > 0] / counts.sum()
    return float(max(-(p * np.log(p)).sum(), 0.0))


@dataclass
class EntropyReport:
    q: float
    pos: float
    rot: float
    total: float

    def as_dict(self):
        return {"q": self.q, "pos": self.pos, "rot": self.rot, "total": self.total}


def entropy(records, lower, upper, config=None):
    """H = 1/2 H(q) + 1/2 (H(pos) + H(rot)); each block is the mean of its
    per-dimension histogram entropies."""
    config = config or DiscretizationConfig()
    ok = [r for r in records if r.success]
    if not ok:
        raise ValueError("entropy needs at least one successful record")
    b = config.bins
    half = 0.5 * config.position_range
    pos = np.array([r.translation for r in ok])
    sph = np.array([axis_angle_to_spherical(r.quat) for r in ok])
    qs = np.array([r.q for r in ok]).reshape(len(ok), -1)
    h_pos = np.mean([histogram_entropy(pos[:, i], -half, half, b) for i in range(3)])
    rng = ((0.0, math.pi), (0.0, math.pi), (-math.pi, math.pi))
    h_rot = np.mean([histogram_entropy(sph[:, i], *rng[i], bins=b) for i in range(3)])
    h_q = np.mean([histogram_entropy(qs[:, i], lower[i], upper[i], b) for i in range(qs.shape[1])]) \
        if qs.shape[1] else 0.0
    h_q, h_pos, h_rot = float(h_q), float(h_pos), float(h_rot)
    return EntropyReport(h_q, h_pos, h_rot, 0.5 * h_q + 0.5 * (h_pos + h_rot))


# ---------------------------------------------------------------------------
# penetration


def grasp_penetration(points, centers, radii):
    """Deepest object sample inside any gripper sphere: max_p max_s (r_s - |p - c_s|)_+."""
    points = np.asarray(points, float)
    centers = np.asarray(centers, float)
    radii = np.asarray(radii, float)
    best = 0.0
    for c, r in zip(centers, radii):
        d = np.sqrt(np.sum((points - c) ** 2, axis=1))
        best = max(best, float(np.max(r - d)))
    return best


def penetration_depth(records, obj, model):
    """Mean over grasps of the per-grasp maximal penetration (meters)."""
    if len(records) == 0:
        return 0.0
    vals = []
    for r in records:
        fk = forward_kinematics(model, r.translation + obj.com, r.quat, r.q)
        vals.append(grasp_penetration(obj.surface.points, fk.sphere_centers, model.sphere_radii))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# disturbance surrogate


def max_resisted_force(W, direction, upper=DEFAULT_UPPER):
    """Largest s >= 0 with W g + s [a; 0] = 0 for some g in [0, upper]^N.

    The feasible set for force F is the set for the maximum scaled by
    F / s_max (0 is always feasible), so "resisted at F" is exactly
    ``F <= s_max`` and monotone in F.
    """
    W = np.asarray(W, float)
    m, n = W.shape
    a = np.zeros(m)
    a[:3] = direction
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_eq = np.hstack([W, a[:, None]])
    res = linprog(c, A_eq=A_eq, b_eq=np.zeros(m), bounds=[(0, upper)] * n + [(0, None)], method="highs")
    if res.status == 3:  # unbounded: only with upper = inf
        return math.inf
    if res.status != 0:
        return 0.0
    return float(res.x[-1])


def analytic_disturbance_check(points, normals, force, axis, mu=DEFAULT_MU, upper=DEFAULT_UPPER,
                               torque_weight=DEFAULT_TORQUE_WEIGHT, tol=1e-9):
    """Can the contacts cancel a pure force ``force * axis`` at the center of mass?

    ``points`` are relative to the center of mass, ``normals`` point out of
    the object. Forces are in normalized wrench units (unit edge forces).
    """
    if force < 0:
        raise ValueError("force must be non-negative")
    if force == 0:
        return True
    W = build_wrench_matrix((points, normals), mu, torque_weight).columns
    return max_resisted_force(W, np.asarray(axis, float), upper) >= force * (1 - tol)


def axis_capacities(points, normals, mu=DEFAULT_MU, upper=DEFAULT_UPPER, torque_weight=DEFAULT_TORQUE_WEIGHT):
    W = build_wrench_matrix((points, normals), mu, torque_weight).columns
    return {k: max_resisted_force(W, np.array(v, float), upper) for k, v in AXES.items()}


def stability_from_capacities(cap, forces=FORCE_LEVELS, tol=1e-9):
    """Per force level: per-axis flags, Succ1 (some axis resisted both ways), Succ3 (all three)."""
    out = {}
    for f in forces:
        per_axis = {k: bool(v >= f * (1 - tol)) for k, v in cap.items()}
        pairs = [per_axis["+" + a] and per_axis["-" + a] for a in "xyz"]
        out[float(f)] = {"succ1": bool(any(pairs)), "succ3": bool(all(pairs)), "per_axis": per_axis}
    return out


def contact_frames(model, obj, translation, quat, q, contacts):
    """Active contact points (relative to the center of mass) and object normals there."""
    fk = forward_kinematics(model, np.asarray(translation, float), quat, q)
    pts = fk.candidate_points[np.asarray(contacts)]
    s = sdf_eval(obj.sdf, pts)
    n = s.gradient / np.maximum(np.linalg.norm(s.gradient, axis=1, keepdims=True), 1e-12)
    return pts - obj.com, n, s.distance


def grasp_stability(model, obj, grasp, mu=DEFAULT_MU, upper=DEFAULT_UPPER,
                    torque_weight=DEFAULT_TORQUE_WEIGHT, forces=FORCE_LEVELS, contact_tol=0.005):
    """Surrogate stability of a world-frame grasp.

    Contacts farther than ``contact_tol`` from the surface cannot push and
    are dropped before the LP.
    """
    pts, nrm, dist = contact_frames(model, obj, grasp.translation, grasp.quat, grasp.q, grasp.contacts)
    touching = np.abs(dist) <= contact_tol
    if not touching.any():
        cap = {k: 0.0 for k in AXES}
    else:
        cap = axis_capacities(pts[touching], nrm[touching], mu, upper, torque_weight)
    return stability_from_capacities(cap, forces), cap


def success_counts(stabilities, force):
    s1 = sum(1 for s in stabilities if s[float(force)]["succ1"])
    s3 = sum(1 for s in stabilities if s[float(force)]["succ3"])
    return s1, s3


# ---------------------------------------------------------------------------
# contact heatmap


def heatmap_weights(vertices, centers, radii, sharpness=10.0):
    """Per-vertex softmax of -sharpness * distance to the nearest sphere surface."""
    vertices = np.asarray(vertices, float)
    d = np.linalg.norm(vertices[:, None, :] - np.asarray(centers)[None], axis=2) - np.asarray(radii)[None]
    d = np.maximum(d.min(axis=1), 0.0)
    w = np.exp(-sharpness * (d - d.min()))  # shift cancels in the ratio
    return w / w.sum()


def contact_heatmap(grasps, mesh, model, com=None, normalize=True):
    """Average of per-grasp vertex weights; max-normalized for rendering."""
    if len(grasps) == 0:
        raise ValueError("need at least one grasp")
    acc = np.zeros(len(mesh.vertices))
    for g in grasps:
        t = g.translation if com is None else g.translation + com
        fk = forward_kinematics(model, t, g.quat, g.q)
        acc += heatmap_weights(mesh.vertices, fk.sphere_centers, model.sphere_radii)
    acc /= len(grasps)
    if normalize and acc.max() > 0:
        acc = acc / acc.max()
    return acc


def write_heatmap(values, path):
    """Sidecar: uint32 vertex count, then one little-endian float32 per vertex."""
    values = np.asarray(values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(values)))
        fh.write(values.tobytes())


def read_heatmap(path):
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<I", fh.read(4))
        vals = np.frombuffer(fh.read(), dtype="<f4")
    if len(vals) != n:
        raise ValueError(f"heatmap header says {n} values, file has {len(vals)}")
    return vals
