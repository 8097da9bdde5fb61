"""Triangle meshes, signed distance grids and surface point sampling.

All lengths are meters. Signed distances are negative inside the object.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

TARGET_SCALE = 0.08
MAX_SMALLEST_AXIS = 0.08
MIN_LARGEST_AXIS = 0.07
DEFAULT_GRID_DIVISIONS = 96
SDF_MAGIC = b"SDF1"


class MeshError(ValueError):
    pass


def vertex_normals(vertices, triangles):
    """Area-weighted vertex normals. Vertices touching no face get +z."""
    v0, v1, v2 = (vertices[triangles[:, i]] for i in range(3))
    face_n = np.cross(v1 - v0, v2 - v0)  # length = 2 * area
    normals = np.zeros_like(vertices)
    for i in range(3):
        np.add.at(normals, triangles[:, i], face_n)
    norm = np.linalg.norm(normals, axis=1)
    bad = norm < 1e-300
    normals[bad] = (0.0, 0.0, 1.0)
    norm[bad] = 1.0
    return normals / norm[:, None]


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray = None
    scale_normalized: bool = False

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or len(v) == 0:
            raise MeshError("mesh has no vertices")
        if t.ndim != 2 or t.shape[1] != 3 or len(t) == 0:
            raise MeshError("mesh has no triangles")
        if t.min() < 0 or t.max() >= len(v):
            raise MeshError("triangle index out of range")
        if not np.all(np.isfinite(v)):
            raise MeshError("non-finite vertex coordinates")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if self.normals is None:
            object.__setattr__(self, "normals", vertex_normals(v, t))
        for arr in (self.vertices, self.triangles, self.normals):
            arr.setflags(write=False)

    @property
    def triangle_areas(self):
        v0, v1, v2 = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)

    @property
    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def extents(self):
        lo, hi = self.bounds
        return hi - lo

    def transformed(self, scale=1.0, offset=(0.0, 0.0, 0.0), **kw):
        v = self.vertices * scale + np.asarray(offset, dtype=float)
        return replace(self, vertices=v, normals=None, **kw)

    def is_closed_manifold(self):
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))


def load_mesh(path):
    """Read an ASCII Wavefront OBJ file (``v`` and ``f`` records).

    Polygonal faces are fan-triangulated; ``v/vt/vn`` index forms and
    negative (relative) indices are accepted. Normals in the file are
    ignored and recomputed.
    """
    path = Path(path)
    verts, tris = [], []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = []
                    for tok in parts[1:]:
                        i = int(tok.split("/")[0])
                        idx.append(i - 1 if i > 0 else len(verts) + i)
                    for k in range(1, len(idx) - 1):
                        tris.append([idx[0], idx[k], idx[k + 1]])
            except (ValueError, IndexError) as exc:
                raise MeshError(f"{path}:{lineno}: cannot parse {line.strip()!r}") from exc
    if not verts or not tris:
        raise MeshError(f"{path}: no geometry found")
    mesh = TriangleMesh(np.array(verts), np.array(tris))
    if mesh.triangle_areas.max() <= 0.0:
        raise MeshError(f"{path}: all triangles are degenerate")
    return mesh


def save_obj(mesh, path):
    with Path(path).open("w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def icosphere(radius=1.0, subdivisions=3, center=(0.0, 0.0, 0.0)):
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [(-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
             (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
             (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center, dtype=float)
    return TriangleMesh(v, np.array(faces))


def box_mesh(extents=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)):
    h = np.asarray(extents, dtype=float) / 2.0
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float)
    faces = np.array([
        [0, 1, 3], [0, 3, 2],  # -x
        [4, 6, 7], [4, 7, 5],  # +x
        [0, 4, 5], [0, 5, 1],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [0, 2, 6], [0, 6, 4],  # -z
        [1, 5, 7], [1, 7, 3],  # +z
    ])
    return TriangleMesh(corners * h + np.asarray(center, dtype=float), faces)


def center_of_mass(mesh):
    """Volume centroid of a closed mesh; area centroid as a fallback."""
    v0, v1, v2 = (mesh.vertices[mesh.triangles[:, i]] for i in range(3))
    vol = np.einsum("ij,ij->i", v0, np.cross(v1, v2)) / 6.0
    total = vol.sum()
    if abs(total) > 1e-15 and mesh.is_closed_manifold():
        return (vol[:, None] * (v0 + v1 + v2) / 4.0).sum(axis=0) / total
    area = mesh.triangle_areas
    return (area[:, None] * (v0 + v1 + v2) / 3.0).sum(axis=0) / area.sum()


def normalize_object_scale(mesh):
    """Rescale a unit-cube-normalized asset to hand-object scale.

    The mesh is first scaled by 0.08. If its smallest bounding-box axis is
    still above 8 cm it is shrunk so that axis is exactly 8 cm; if its
    largest axis is below 7 cm it is grown so that axis is exactly 7 cm.
    Meshes already produced by this function are returned unchanged.
    """
    if mesh.scale_normalized:
        return mesh
    ext = mesh.extents
    if ext.max() <= 0.0:
        raise MeshError("zero-extent bounding box")
    scale = TARGET_SCALE
    ext = ext * scale
    if ext.min() > MAX_SMALLEST_AXIS:
        scale *= MAX_SMALLEST_AXIS / ext.min()
    elif ext.max() < MIN_LARGEST_AXIS:
        scale *= MIN_LARGEST_AXIS / ext.max()
    return mesh.transformed(scale=scale, scale_normalized=True)


# ---------------------------------------------------------------------------
# exact distance and inside tests (compiled kernels)


@njit(cache=True, inline="always")
def _closest_xyz(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    """Closest point on triangle abc to p (Ericson's region test)."""
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return ax + v * abx, ay + v * aby, az + v * abz
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return ax + w * acx, ay + w * acy, az + w * acz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return bx + w * (cx - bx), by + w * (cy - by), bz + w * (cz - bz)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w


@njit(cache=True)
def _closest_on_triangle(p, a, b, c):
    x, y, z = _closest_xyz(p[0], p[1], p[2], a[0], a[1], a[2], b[0], b[1], b[2], c[0], c[1], c[2])
    return np.array([x, y, z])


@njit(cache=True)
def _unsigned_distance(points, tri, centroids, radii, upper):
    n = points.shape[0]
    dist = np.empty(n)
    nearest = np.empty(n, dtype=np.int64)
    for i in range(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        best = upper[i] * upper[i] * (1.0 + 1e-12) + 1e-300
        best_t = -1
        for t in range(tri.shape[0]):
            dx = px - centroids[t, 0]
            dy = py - centroids[t, 1]
            dz = pz - centroids[t, 2]
            lb = math.sqrt(dx * dx + dy * dy + dz * dz) - radii[t]
            if lb > 0.0 and lb * lb > best:
                continue
            qx, qy, qz = _closest_xyz(px, py, pz, tri[t, 0], tri[t, 1], tri[t, 2], tri[t, 3], tri[t, 4],
                                      tri[t, 5], tri[t, 6], tri[t, 7], tri[t, 8])
            d2 = (px - qx) ** 2 + (py - qy) ** 2 + (pz - qz) ** 2
            if d2 < best or best_t < 0:
                best = d2
                best_t = t
        dist[i] = math.sqrt(best)
        nearest[i] = best_t
    return dist, nearest


@njit(cache=True)
def _winding_numbers(points, tri):
    out = np.zeros(points.shape[0])
    for i in range(points.shape[0]):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        total = 0.0
        for t in range(tri.shape[0]):
            ax, ay, az = tri[t, 0] - px, tri[t, 1] - py, tri[t, 2] - pz
            bx, by, bz = tri[t, 3] - px, tri[t, 4] - py, tri[t, 5] - pz
            cx, cy, cz = tri[t, 6] - px, tri[t, 7] - py, tri[t, 8] - pz
            la = math.sqrt(ax * ax + ay * ay + az * az)
            lb = math.sqrt(bx * bx + by * by + bz * bz)
            lc = math.sqrt(cx * cx + cy * cy + cz * cz)
            num = ax * (by * cz - bz * cy) - ay * (bx * cz - bz * cx) + az * (bx * cy - by * cx)
            den = la * lb * lc + (ax * bx + ay * by + az * bz) * lc + (ax * cx + ay * cy + az * cz) * lb \
                + (bx * cx + by * cy + bz * cz) * la
            total += 2.0 * math.atan2(num, den)
        out[i] = total / (4.0 * math.pi)
    return out


@njit(cache=True)
def _ray_parity(xs, ys, zs, tri_a, tri_b, tri_c, edge_tol):
    """Inside flags by +x ray parity along every (y, z) grid row.

    Rows whose ray grazes an edge or vertex are reported as ambiguous.
    """
    nx, ny, nz = xs.shape[0], ys.shape[0], zs.shape[0]
    inside = np.zeros((nx, ny, nz), dtype=np.bool_)
    ambiguous = np.zeros((ny, nz), dtype=np.bool_)
    hits = np.empty(tri_a.shape[0])
    for j in range(ny):
        y = ys[j]
        for k in range(nz):
            z = zs[k]
            nhit = 0
            bad = False
            for t in range(tri_a.shape[0]):
                a = tri_a[t]
                b = tri_b[t]
                c = tri_c[t]
                det = (b[1] - a[1]) * (c[2] - a[2]) - (c[1] - a[1]) * (b[2] - a[2])
                if abs(det) < 1e-300:
                    continue
                w1 = ((y - a[1]) * (c[2] - a[2]) - (c[1] - a[1]) * (z - a[2])) / det
                w2 = ((b[1] - a[1]) * (z - a[2]) - (y - a[1]) * (b[2] - a[2])) / det
                w0 = 1.0 - w1 - w2
                lo = min(w0, min(w1, w2))
                if lo < -edge_tol:
                    continue
                if lo < edge_tol:
                    bad = True
                hits[nhit] = w0 * a[0] + w1 * b[0] + w2 * c[0]
                nhit += 1
            ambiguous[j, k] = bad
            for i in range(nx):
                cnt = 0
                for h in range(nhit):
                    if hits[h] > xs[i]:
                        cnt += 1
                inside[i, j, k] = (cnt % 2) == 1
    return inside, ambiguous


def _triangle_arrays(mesh):
    tri = mesh.vertices[mesh.triangles]
    a, b, c = (np.ascontiguousarray(tri[:, i]) for i in range(3))
    centroids = (a + b + c) / 3.0
    radii = np.max(np.linalg.norm(tri - centroids[:, None, :], axis=2), axis=1)
    return a, b, c, centroids, radii


def _flat_triangles(mesh):
    return np.ascontiguousarray(mesh.vertices[mesh.triangles].reshape(-1, 9))


def point_mesh_distance(mesh, points):
    """Exact unsigned distance from points to the mesh surface.

    Returns (distance, nearest triangle index).
    """
    points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    _, _, _, centroids, radii = _triangle_arrays(mesh)
    upper, _ = cKDTree(mesh.vertices).query(points)
    return _unsigned_distance(points, _flat_triangles(mesh), centroids, radii, np.asarray(upper, dtype=np.float64))


def winding_number(mesh, points):
    points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    return _winding_numbers(points, _flat_triangles(mesh))


# ---------------------------------------------------------------------------
# signed distance grid


@dataclass(frozen=True)
class SdfGrid:
    origin: np.ndarray
    spacing: float
    dims: tuple
    values: np.ndarray
    sign_method: str = "ray_parity"
    boundary_tol: float = 1e-3

    def __post_init__(self):
        if not self.spacing > 0:
            raise ValueError("grid spacing must be positive")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        vals = np.asarray(self.values, dtype=np.float64).reshape(self.dims)
        if min(self.dims) < 2:
            raise ValueError("grid needs at least two samples per axis")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def upper(self):
        return self.origin + self.spacing * (np.asarray(self.dims) - 1)

    def coordinates(self):
        return [self.origin[i] + self.spacing * np.arange(self.dims[i]) for i in range(3)]


def build_sdf_grid(mesh, spacing=None, margin_cells=2):
    """Sample exact signed distances of ``mesh`` on a regular grid.

    Sign comes from +x ray parity; rows where the ray grazes an edge fall
    back to the generalized winding number. Meshes that are not closed
    2-manifolds use the nearest face's normal to pick the sign instead.
    """
    lo, hi = mesh.bounds
    ext = hi - lo
    if spacing is None:
        spacing = min(ext.max() / DEFAULT_GRID_DIVISIONS, ext.min() / 8.0)
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    if spacing > ext.min() / 8.0 + 1e-15:
        raise ValueError(f"spacing {spacing:g} exceeds smallest bbox axis / 8 ({ext.min() / 8:g})")
    margin = max(int(margin_cells), 2) * spacing
    origin = lo - margin
    dims = tuple(int(d) for d in np.ceil((ext + 2 * margin) / spacing).astype(int) + 1)
    xs, ys, zs = (origin[i] + spacing * np.arange(dims[i]) for i in range(3))
    pts = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
    dist, nearest = point_mesh_distance(mesh, pts)
    a, b, c, _, _ = _triangle_arrays(mesh)

    if mesh.is_closed_manifold():
        inside, ambiguous = _ray_parity(xs, ys, zs, a, b, c, 1e-9)
        method = "ray_parity"
        if ambiguous.any():
            jj, kk = np.nonzero(ambiguous)
            row_pts = np.stack([
                np.repeat(xs[None, :], len(jj), axis=0),
                np.repeat(ys[jj][:, None], dims[0], axis=1),
                np.repeat(zs[kk][:, None], dims[0], axis=1),
            ], axis=-1).reshape(-1, 3)
            w = _winding_numbers(np.ascontiguousarray(row_pts), _flat_triangles(mesh)).reshape(len(jj), dims[0])
            inside[:, jj, kk] = (w > 0.5).T
            method = "ray_parity+winding"
        inside = inside.reshape(-1)
    else:
        log.warning("mesh is not a closed 2-manifold; SDF sign from nearest-face normals")
        fn = np.cross(b - a, c - a)
        fn /= np.maximum(np.linalg.norm(fn, axis=1, keepdims=True), 1e-300)
        closest = np.array([_closest_on_triangle(p, a[t], b[t], c[t]) for p, t in zip(pts, nearest)])
        inside = np.einsum("ij,ij->i", pts - closest, fn[nearest]) < 0.0
        method = "normal_heuristic"
    values = np.where(inside, -dist, dist).reshape(dims)
    return SdfGrid(origin, float(spacing), dims, values, sign_method=method)


@dataclass
class SdfSample:
    distance: np.ndarray
    gradient: np.ndarray  # exact derivative of the interpolated field
    hessian: np.ndarray | None
    outside: np.ndarray  # query was outside the grid box
    near_face: np.ndarray  # within boundary_tol * spacing of a cell face

    @property
    def normal(self):
        n = np.linalg.norm(self.gradient, axis=-1, keepdims=True)
        return self.gradient / np.maximum(n, 1e-12)


def sdf_eval(grid, points, hessian=False):
    """Trilinear interpolation of the grid with exact derivatives.

    Points outside the grid box are clamped onto it and the distance is
    extended by the clamping offset, which keeps the value an upper bound
    of the true distance and never below the boundary value.
    """
    pts = np.asarray(points, dtype=np.float64)
    shape = pts.shape[:-1]
    pts = pts.reshape(-1, 3)
    h = grid.spacing
    dims = np.asarray(grid.dims)
    clamped = np.clip(pts, grid.origin, grid.upper)
    off = pts - clamped
    is_out = np.abs(off) > 0.0
    outside = is_out.any(axis=1)

    u = (clamped - grid.origin) / h
    idx = np.clip(np.floor(u).astype(np.int64), 0, dims - 2)
    f = np.clip(u - idx, 0.0, 1.0)
    V = grid.values
    i, j, k = idx[:, 0], idx[:, 1], idx[:, 2]
    c = np.empty((len(pts), 2, 2, 2))
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                c[:, di, dj, dk] = V[i + di, j + dj, k + dk]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    # interpolate along x, then y, then z, keeping partial differences
    cx = c[:, 0] * (1 - fx)[:, None, None] + c[:, 1] * fx[:, None, None]  # (n,2,2) over (y,z)
    dcx = c[:, 1] - c[:, 0]
    cxy = cx[:, 0] * (1 - fy)[:, None] + cx[:, 1] * fy[:, None]  # (n,2) over z
    d = cxy[:, 0] * (1 - fz) + cxy[:, 1] * fz

    dcx_y = dcx[:, 0] * (1 - fy)[:, None] + dcx[:, 1] * fy[:, None]
    gx = dcx_y[:, 0] * (1 - fz) + dcx_y[:, 1] * fz
    dcy = cx[:, 1] - cx[:, 0]  # (n,2) over z
    gy = dcy[:, 0] * (1 - fz) + dcy[:, 1] * fz
    gz = cxy[:, 1] - cxy[:, 0]
    grad = np.stack([gx, gy, gz], axis=1) / h

    hess = None
    if hessian:
        ddx_dy = dcx[:, 1] - dcx[:, 0]  # (n,2) over z
        hxy = ddx_dy[:, 0] * (1 - fz) + ddx_dy[:, 1] * fz
        hxz = dcx_y[:, 1] - dcx_y[:, 0]
        hyz = dcy[:, 1] - dcy[:, 0]
        hess = np.zeros((len(pts), 3, 3))
        hess[:, 0, 1] = hess[:, 1, 0] = hxy
        hess[:, 0, 2] = hess[:, 2, 0] = hxz
        hess[:, 1, 2] = hess[:, 2, 1] = hyz
        hess /= h * h

    if outside.any():
        rho = np.linalg.norm(off[outside], axis=1)
        e = off[outside] / rho[:, None]
        d[outside] += rho
        m = is_out[outside]
        grad[outside] = np.where(m, e, grad[outside])
        if hess is not None:
            ho = hess[outside]
            ho[m[:, :, None] | m[:, None, :]] = 0.0
            proj = (np.eye(3)[None] - e[:, :, None] * e[:, None, :]) / rho[:, None, None]
            both = m[:, :, None] & m[:, None, :]
            ho[both] = proj[both]
            hess[outside] = ho

    frac = np.minimum(f, 1.0 - f)
    near = (frac < grid.boundary_tol).any(axis=1) & ~outside
    out = SdfSample(d.reshape(shape), grad.reshape(shape + (3,)),
                    None if hess is None else hess.reshape(shape + (3, 3)),
                    outside.reshape(shape), near.reshape(shape))
    return out


def sdf_query(grid, p):
    """Signed distance at ``p`` and the outward unit normal estimate."""
    s = sdf_eval(grid, np.asarray(p, dtype=float)[None])
    return float(s.distance[0]), s.normal[0]


def save_sdf(grid, path):
    """Write the little-endian ``SDF1`` cache (f32 values, x fastest)."""
    with Path(path).open("wb") as fh:
        fh.write(SDF_MAGIC)
        fh.write(struct.pack("<3I", *grid.dims))
        fh.write(struct.pack("<3d", *grid.origin))
        fh.write(struct.pack("<d", grid.spacing))
        fh.write(np.asarray(grid.values, dtype="<f4").ravel(order="F").tobytes())


def load_sdf(path):
    data = Path(path).read_bytes()
    if data[:4] != SDF_MAGIC:
        raise ValueError(f"{path}: not an SDF1 file")
    dims = struct.unpack_from("<3I", data, 4)
    origin = struct.unpack_from("<3d", data, 16)
    (spacing,) = struct.unpack_from("<d", data, 40)
    n = dims[0] * dims[1] * dims[2]
    vals = np.frombuffer(data, dtype="<f4", count=n, offset=48)
    if len(data) != 48 + 4 * n:
        raise ValueError(f"{path}: truncated SDF payload")
    return SdfGrid(np.array(origin), spacing, dims, vals.reshape(dims, order="F").astype(np.float64))


# ---------------------------------------------------------------------------
# sampling


def farthest_point_sample(points, k, seed=None, start=None):
    """Greedy farthest point sampling; returns ``k`` indices into ``points``."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = len(pts)
    if n == 0:
        raise ValueError("no points to sample from")
    if k > n:
        raise ValueError(f"cannot pick {k} points out of {n}")
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    chosen = [int(start)]
    dmin = np.linalg.norm(pts - pts[start], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(dmin))
        chosen.append(nxt)
        dmin = np.minimum(dmin, np.linalg.norm(pts - pts[nxt], axis=1))
    return np.array(chosen, dtype=np.int64)


@dataclass(frozen=True)
class SurfaceSampleSet:
    points: np.ndarray
    normals: np.ndarray
    triangle_index: np.ndarray = field(default=None, repr=False)


def surface_sample(mesh, n=3000, seed=None):
    """Area-weighted uniform samples with barycentric-interpolated normals."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    area = mesh.triangle_areas
    tri = rng.choice(len(area), size=n, p=area / area.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    w = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
    ids = mesh.triangles[tri]
    pts = np.einsum("ij,ijk->ik", w, mesh.vertices[ids])
    nrm = np.einsum("ij,ijk->ik", w, mesh.normals[ids])
    nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-300)
    return SurfaceSampleSet(pts, nrm, tri)


@dataclass(frozen=True)
class RigidObject:
    """Everything the energy and metrics need to know about one object."""

    mesh: TriangleMesh
    sdf: SdfGrid
    com: np.ndarray
    surface: SurfaceSampleSet
    name: str = "object"

    @property
    def circumradius(self):
        return float(np.linalg.norm(self.mesh.vertices - self.com, axis=1).max())


def prepare_object(mesh, spacing=None, n_surface=3000, seed=0, name="object", sdf=None):
    if sdf is None:
        sdf = build_sdf_grid(mesh, spacing)
    return RigidObject(mesh, sdf, center_of_mass(mesh), surface_sample(mesh, n_surface, seed), name)
