"""Kinematic gripper models, grasp parameterization and seeding.

A grasp is a wrist pose (translation plus unit quaternion, scalar first),
a joint vector and the indices of the currently active contact
candidates. Orientation updates happen in the local tangent space of the
wrist rotation, ``R <- R @ exp(hat(delta))``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .geometry import farthest_point_sample, sdf_eval

TAXONOMIES = ("power", "pinch", "precision")
BUNDLED = {"parallel-2f": "parallel_2f.json", "trifinger": "trifinger.json"}


class GripperSpecError(ValueError):
    pass


# ---------------------------------------------------------------------------
# rotation helpers


def hat(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def rpy_matrix(rpy):
    r, p, y = rpy
    cr, sr, cp, sp, cy, sy = np.cos(r), np.sin(r), np.cos(p), np.sin(p), np.cos(y), np.sin(y)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


def axis_angle_matrix(axis, angle):
    """Rodrigues formula, batched over ``angle``; ``axis`` is a unit 3-vector."""
    angle = np.asarray(angle, dtype=float)
    K = hat(axis)
    s, c = np.sin(angle)[..., None, None], np.cos(angle)[..., None, None]
    return np.eye(3) + s * K + (1 - c) * (K @ K)


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R):
    """Scalar-first unit quaternion with non-negative w."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q = np.asarray(q, dtype=float)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quat_mul(a, b):
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_exp(v):
    """Unit quaternion of the rotation vector ``v`` (batched)."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(x)/x series below 1e-8 keeps the map smooth at the identity
    small = theta < 1e-8
    k = np.where(small, 0.5 - theta ** 2 / 48.0, np.sin(half) / np.where(small, 1.0, theta))
    return np.concatenate([np.cos(half), k * v], axis=-1)


def retract_quat(quat, delta):
    """Apply a local tangent-space rotation and renormalize."""
    q = quat_mul(quat, quat_exp(delta))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# model


@dataclass
class Link:
    name: str
    parent: int
    origin: np.ndarray  # 4x4, applied after the joint motion (identity when absent)
    sphere_centers: np.ndarray
    sphere_radii: np.ndarray
    joint: int = -1


@dataclass
class Joint:
    name: str
    type: str
    axis: np.ndarray
    limits: tuple
    parent: int
    child: int
    origin: np.ndarray
    q_index: int = -1
    multiplier: float = 1.0


@dataclass
class GripperModel:
    name: str
    links: list
    joints: list
    contact_link: np.ndarray
    contact_points: np.ndarray
    contact_normals: np.ndarray
    taxonomies: dict
    lower: np.ndarray = field(init=False)
    upper: np.ndarray = field(init=False)

    def __post_init__(self):
        nq = max((j.q_index for j in self.joints), default=-1) + 1
        self.lower = np.zeros(nq)
        self.upper = np.zeros(nq)
        self.joint_types = [""] * nq
        for j in self.joints:
            if j.multiplier == 1.0 and self.joint_types[j.q_index] == "":
                self.lower[j.q_index], self.upper[j.q_index] = j.limits
                self.joint_types[j.q_index] = j.type
        # link l is moved by joint j iff j's child is l or one of its ancestors
        self.moves = np.zeros((len(self.links), len(self.joints)), dtype=bool)
        for li, link in enumerate(self.links):
            a = li
            while a >= 0:
                if self.links[a].joint >= 0:
                    self.moves[li, self.links[a].joint] = True
                a = self.links[a].parent
        self.sphere_link = np.concatenate(
            [np.full(len(l.sphere_radii), i) for i, l in enumerate(self.links)]).astype(np.int64)
        self.sphere_local = np.concatenate([l.sphere_centers.reshape(-1, 3) for l in self.links])
        self.sphere_radii = np.concatenate([l.sphere_radii for l in self.links])
        pairs = []
        for a in range(len(self.sphere_link)):
            for b in range(a + 1, len(self.sphere_link)):
                la, lb = self.sphere_link[a], self.sphere_link[b]
                if la == lb or self.links[la].parent == lb or self.links[lb].parent == la:
                    continue
                pairs.append((a, b))
        self.sphere_pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)

    @property
    def n_q(self):
        return len(self.lower)

    @property
    def n_candidates(self):
        return len(self.contact_link)

    def link_index(self, name):
        for i, l in enumerate(self.links):
            if l.name == name:
                return i
        raise KeyError(name)

    def q_mid(self):
        return 0.5 * (self.lower + self.upper)

    def reach(self):
        """Largest wrist-to-geometry distance over the joint-limit corners."""
        best = 0.0
        for q in (self.lower, self.upper, self.q_mid()):
            fk = forward_kinematics(self, np.zeros(3), np.array([1.0, 0, 0, 0]), q)
            best = max(best, np.linalg.norm(fk.candidate_points, axis=1).max(),
                       (np.linalg.norm(fk.sphere_centers, axis=1) + self.sphere_radii).max())
        return float(best)


def _origin(d):
    T = np.eye(4)
    if d:
        T[:3, :3] = rpy_matrix(d.get("rpy", (0, 0, 0)))
        T[:3, 3] = d.get("xyz", (0, 0, 0))
    return T


def parse_gripper_spec(spec):
    links_in = spec["links"]
    names = [l["name"] for l in links_in]
    if len(set(names)) != len(names):
        raise GripperSpecError("duplicate link names")
    index = {n: i for i, n in enumerate(names)}

    parent = {}
    for l in links_in:
        p = l.get("parent")
        if p is not None and p not in index:
            raise GripperSpecError(f"unknown parent link {p!r}")
        parent[l["name"]] = p
    for j in spec.get("joints", []):
        if j["parent"] not in index or j["child"] not in index:
            raise GripperSpecError(f"joint {j.get('name')!r} references an unknown link")
        if parent[j["child"]] not in (None, j["parent"]):
            raise GripperSpecError(f"link {j['child']!r} has two parents")
        parent[j["child"]] = j["parent"]

    roots = [n for n in names if parent[n] is None]
    if len(roots) != 1:
        raise GripperSpecError(f"kinematic graph needs exactly one root, found {roots}")
    order, seen = [], set()

    def visit(n, stack):
        if n in stack:
            raise GripperSpecError(f"cyclic kinematic graph through {n!r}")
        if n in seen:
            return
        if parent[n] is not None:
            visit(parent[n], stack | {n})
        seen.add(n)
        order.append(n)

    for n in names:
        visit(n, frozenset())
    new_index = {n: i for i, n in enumerate(order)}

    links = []
    for n in order:
        l = links_in[index[n]]
        spheres = l.get("spheres", [])
        links.append(Link(
            name=n,
            parent=-1 if parent[n] is None else new_index[parent[n]],
            origin=_origin(l.get("origin")),
            sphere_centers=np.array([s["c"] for s in spheres], dtype=float).reshape(-1, 3),
            sphere_radii=np.array([s["r"] for s in spheres], dtype=float),
        ))

    joints, q_of = [], {}
    jspecs = spec.get("joints", [])
    for j in jspecs:
        if j.get("type") not in ("revolute", "prismatic"):
            raise GripperSpecError(f"joint {j.get('name')!r}: unsupported type {j.get('type')!r}")
        axis = np.asarray(j["axis"], dtype=float)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-6:
            raise GripperSpecError(f"joint {j['name']!r}: axis is not unit length")
        lo, hi = (float(x) for x in j["limits"])
        if not lo < hi:
            raise GripperSpecError(f"joint {j['name']!r}: lower limit {lo} >= upper limit {hi}")
        if "mimic" not in j:
            q_of[j["name"]] = len(q_of)
    for j in jspecs:
        mimic = j.get("mimic")
        if mimic is not None and mimic["joint"] not in q_of:
            raise GripperSpecError(f"joint {j['name']!r} mimics unknown joint {mimic['joint']!r}")
        ji = len(joints)
        joints.append(Joint(
            name=j["name"], type=j["type"], axis=np.asarray(j["axis"], dtype=float),
            limits=tuple(float(x) for x in j["limits"]),
            parent=new_index[j["parent"]], child=new_index[j["child"]], origin=_origin(j.get("origin")),
            q_index=q_of[mimic["joint"]] if mimic else q_of[j["name"]],
            multiplier=float(mimic.get("multiplier", 1.0)) if mimic else 1.0,
        ))
        links[new_index[j["child"]]].joint = ji

    c_link, c_pt, c_n = [], [], []
    for c in spec.get("contacts", []):
        if c["link"] not in new_index:
            raise GripperSpecError(f"contact on unknown link {c['link']!r}")
        n = np.asarray(c["normal"], dtype=float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-6:
            raise GripperSpecError("contact normal is not unit length")
        li, p = new_index[c["link"]], np.asarray(c["point"], dtype=float)
        if any(l == li and np.allclose(p, q, atol=1e-9) for l, q in zip(c_link, c_pt)):
            continue
        c_link.append(li)
        c_pt.append(p)
        c_n.append(n)
    if not c_link:
        raise GripperSpecError("gripper defines no contact candidates")

    tax = {}
    raw_tax = spec.get("taxonomies", {})
    for name, members in raw_tax.items():
        if not members:
            raise GripperSpecError(f"taxonomy {name!r} has an empty link mask")
        for m in members:
            if m not in new_index:
                raise GripperSpecError(f"taxonomy {name!r} names unknown link {m!r}")
        tax[name] = [new_index[m] for m in members]
    tax.setdefault("power", list(range(len(links))))

    return GripperModel(spec.get("name", "gripper"), links, joints, np.array(c_link, dtype=np.int64),
                        np.array(c_pt), np.array(c_n), tax)


def load_gripper_spec(path):
    """Load a gripper from a JSON description file or a bundled fixture name."""
    if str(path) in BUNDLED:
        text = resources.files("fcgrasp.data").joinpath(BUNDLED[str(path)]).read_text()
    else:
        text = Path(path).read_text()
    return parse_gripper_spec(json.loads(text))


# ---------------------------------------------------------------------------
# kinematics


@dataclass
class FkResult:
    link_rot: np.ndarray  # (..., L, 3, 3)
    link_pos: np.ndarray  # (..., L, 3)
    joint_axis: np.ndarray  # (..., J, 3) world frame
    joint_pos: np.ndarray  # (..., J, 3)
    wrist_pos: np.ndarray  # (..., 3)
    wrist_rot: np.ndarray  # (..., 3, 3)
    candidate_points: np.ndarray
    candidate_normals: np.ndarray
    sphere_centers: np.ndarray


def forward_kinematics(model, translation, quat, q):
    """World transforms of every link plus world contact candidates.

    Works on a single configuration or on leading batch dimensions.
    """
    t = np.asarray(translation, dtype=float)
    R0 = quat_to_matrix(np.asarray(quat, dtype=float))
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != model.n_q:
        raise ValueError(f"expected {model.n_q} joint values, got {q.shape[-1]}")
    batch = t.shape[:-1]
    L, J = len(model.links), len(model.joints)
    Rl = np.empty(batch + (L, 3, 3))
    pl = np.empty(batch + (L, 3))
    ja = np.empty(batch + (J, 3))
    jp = np.empty(batch + (J, 3))
    for i, link in enumerate(model.links):
        if link.parent < 0:
            Rp, pp = R0, t
        else:
            Rp, pp = Rl[..., link.parent, :, :], pl[..., link.parent, :]
        if link.joint >= 0:
            jt = model.joints[link.joint]
            Rj = Rp @ jt.origin[:3, :3]
            pj = pp + np.einsum("...ij,j->...i", Rp, jt.origin[:3, 3])
            axis_w = np.einsum("...ij,j->...i", Rj, jt.axis)
            ja[..., link.joint, :], jp[..., link.joint, :] = axis_w, pj
            val = jt.multiplier * q[..., jt.q_index]
            if jt.type == "revolute":
                Rp = Rj @ axis_angle_matrix(jt.axis, val)
                pp = pj
            else:
                Rp = Rj
                pp = pj + axis_w * val[..., None]
        R = Rp @ link.origin[:3, :3]
        Rl[..., i, :, :] = R
        pl[..., i, :] = pp + np.einsum("...ij,j->...i", Rp, link.origin[:3, 3])
    cl = model.contact_link
    cp = pl[..., cl, :] + np.einsum("...cij,cj->...ci", Rl[..., cl, :, :], model.contact_points)
    cn = np.einsum("...cij,cj->...ci", Rl[..., cl, :, :], model.contact_normals)
    sl = model.sphere_link
    sc = pl[..., sl, :] + np.einsum("...sij,sj->...si", Rl[..., sl, :, :], model.sphere_local)
    return FkResult(Rl, pl, ja, jp, t, R0, cp, cn, sc)


def point_jacobians(model, fk, points, links):
    """Jacobians of world points rigidly attached to ``links``.

    Columns are (translation 3, wrist rotation tangent 3, joints n_q).
    ``points`` has shape (..., P, 3) and ``links`` shape (P,).
    """
    points = np.asarray(points, dtype=float)
    shape = points.shape[:-1]
    J = np.zeros(shape + (3, 6 + model.n_q))
    J[..., :, 0:3] = np.eye(3)
    rel = points - fk.wrist_pos[..., None, :]
    J[..., :, 3:6] = -hat(rel) @ fk.wrist_rot[..., None, :, :]
    for ji, jt in enumerate(model.joints):
        mask = model.moves[links, ji]
        if not mask.any():
            continue
        a = fk.joint_axis[..., ji, :][..., None, :]
        if jt.type == "revolute":
            col = np.cross(a, points - fk.joint_pos[..., ji, :][..., None, :])
        else:
            col = np.broadcast_to(a, points.shape)
        J[..., :, :, 6 + jt.q_index] += jt.multiplier * col * mask[..., None]
    return J


def direction_jacobians(model, fk, dirs, links):
    """Jacobians of world directions rotating with ``links`` (no translation part)."""
    dirs = np.asarray(dirs, dtype=float)
    J = np.zeros(dirs.shape[:-1] + (3, 6 + model.n_q))
    J[..., :, 3:6] = -hat(dirs) @ fk.wrist_rot[..., None, :, :]
    for ji, jt in enumerate(model.joints):
        if jt.type != "revolute":
            continue
        mask = model.moves[links, ji]
        if not mask.any():
            continue
        a = fk.joint_axis[..., ji, :][..., None, :]
        J[..., :, :, 6 + jt.q_index] += jt.multiplier * np.cross(a, dirs) * mask[..., None]
    return J


def fk_jacobian(model, translation, quat, q, index):
    """3 x (6 + n_q) Jacobian of contact candidate ``index``'s world position."""
    fk = forward_kinematics(model, translation, quat, q)
    idx = np.atleast_1d(index)
    J = point_jacobians(model, fk, fk.candidate_points[idx], model.contact_link[idx])
    return J[0] if np.ndim(index) == 0 else J


# ---------------------------------------------------------------------------
# grasps


@dataclass
class Grasp:
    translation: np.ndarray
    quat: np.ndarray  # (w, x, y, z)
    q: np.ndarray
    contacts: np.ndarray
    tau_q: np.ndarray | None = None  # desired joint torques; carried but never optimized

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float)
        quat = np.asarray(self.quat, dtype=float)
        self.quat = quat / np.linalg.norm(quat)
        self.q = np.asarray(self.q, dtype=float)
        self.contacts = np.asarray(self.contacts, dtype=np.int64)

    def copy(self):
        return Grasp(self.translation.copy(), self.quat.copy(), self.q.copy(), self.contacts.copy(),
                     None if self.tau_q is None else self.tau_q.copy())


@dataclass
class GraspBatch:
    grasps: list
    rngs: list
    pool: np.ndarray

    def __len__(self):
        return len(self.grasps)

    def arrays(self):
        return (np.stack([g.translation for g in self.grasps]), np.stack([g.quat for g in self.grasps]),
                np.stack([g.q for g in self.grasps]), np.stack([g.contacts for g in self.grasps]))


def clamp_joints(model, q):
    return np.clip(q, model.lower, model.upper)


def select_grasp_type_contacts(model, taxonomy):
    if taxonomy not in model.taxonomies:
        raise KeyError(f"unknown grasp taxonomy {taxonomy!r}")
    links = model.taxonomies[taxonomy]
    if not links:
        raise ValueError(f"taxonomy {taxonomy!r} has an empty link mask")
    return np.flatnonzero(np.isin(model.contact_link, links))


def chain_rngs(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def sample_initial_grasp(model, obj, pool, n_contacts, rng):
    """One coarse seed: wrist on an inflated sphere around the object.

    The palm normal (wrist z) aims at a random surface point with a
    uniformly random roll about it; joints are uniform in the middle 60 %
    of their range; active contacts come from farthest point sampling.
    """
    radius = obj.circumradius + model.reach()
    d = rng.standard_normal(3)
    t = obj.com + radius * d / np.linalg.norm(d)
    target = obj.surface.points[rng.integers(len(obj.surface.points))]
    z = target - t
    z /= np.linalg.norm(z)
    helper = np.eye(3)[int(np.argmin(np.abs(z)))]
    x = helper - (helper @ z) * z
    x /= np.linalg.norm(x)
    roll = rng.uniform(0.0, 2 * np.pi)
    x = np.cos(roll) * x + np.sin(roll) * np.cross(z, x)
    R = np.stack([x, np.cross(z, x), z], axis=1)
    span = model.upper - model.lower
    q = model.lower + span * (0.2 + 0.6 * rng.random(model.n_q))
    quat = matrix_to_quat(R)
    fk = forward_kinematics(model, t, quat, q)
    k = min(n_contacts, len(pool))
    start = int(rng.integers(len(pool)))
    sel = farthest_point_sample(fk.candidate_points[pool], k, start=start)
    return Grasp(t, quat, q, pool[sel])


def initialize_grasps(model, obj, n_seeds, taxonomy="power", seed=0, n_contacts=4):
    if n_seeds <= 0:
        raise ValueError("n_seeds must be positive")
    pool = select_grasp_type_contacts(model, taxonomy)
    rngs = chain_rngs(seed, n_seeds)
    grasps = [sample_initial_grasp(model, obj, pool, n_contacts, r) for r in rngs]
    return GraspBatch(grasps, rngs, pool)


def resample_contact_indices(contacts, pool, rng, p_switch):
    """Swap one active contact for an inactive pool member with prob. ``p_switch``."""
    if rng.random() >= p_switch:
        return contacts
    free = np.setdiff1d(pool, contacts, assume_unique=False)
    if len(free) == 0:
        warnings.warn("contact pool has no inactive candidates; resampling skipped", stacklevel=2)
        return contacts
    out = contacts.copy()
    out[rng.integers(len(out))] = free[rng.integers(len(free))]
    return out


def resample_active_contacts(grasp, pool, rng, p_switch=0.25):
    new = resample_contact_indices(grasp.contacts, np.asarray(pool), rng, p_switch)
    if new is grasp.contacts:
        return grasp
    return replace(grasp.copy(), contacts=new)


def palm_clearance(obj, grasp):
    """Signed distance of the wrist origin to the object."""
    return float(sdf_eval(obj.sdf, grasp.translation[None]).distance[0])
