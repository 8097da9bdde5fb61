import itertools

import numpy as np
import pytest

from fcgrasp.geometry import (MeshError, SdfGrid, box_mesh, build_sdf_grid, farthest_point_sample, icosphere,
                              load_mesh, load_sdf, normalize_object_scale, point_mesh_distance, save_obj,
                              save_sdf, sdf_eval, sdf_query, surface_sample)


@pytest.fixture(scope="module")
def unit_sphere_grid():
    mesh = icosphere(1.0, 3)
    return mesh, build_sdf_grid(mesh, spacing=0.1)


def _brute_distance(mesh, p):
    # dense barycentric sampling of every triangle; an upper bound that is
    # tight to the sampling resolution
    best = np.inf
    w = np.array([(a, b, 1 - a - b) for a in np.linspace(0, 1, 21) for b in np.linspace(0, 1, 21) if a + b <= 1])
    for tri in mesh.triangles:
        pts = w @ mesh.vertices[tri]
        best = min(best, np.linalg.norm(pts - p, axis=1).min())
    return best


def test_load_cube_obj(tmp_path):
    path = tmp_path / "cube.obj"
    save_obj(box_mesh(), path)
    mesh = load_mesh(path)
    assert mesh.vertices.shape == (8, 3)
    assert mesh.triangles.shape == (12, 3)


def test_load_icosphere_keeps_vertices_and_unit_normals(tmp_path):
    src = icosphere(1.0, 2)
    path = tmp_path / "ico.obj"
    save_obj(src, path)
    mesh = load_mesh(path)
    assert len(mesh.vertices) == len(src.vertices)
    np.testing.assert_allclose(np.linalg.norm(mesh.normals, axis=1), 1.0, atol=1e-6)


def test_load_quad_faces_and_slash_indices(tmp_path):
    path = tmp_path / "quad.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3 4/4/4\n")
    assert load_mesh(path).triangles.shape == (2, 3)


def test_empty_file_is_a_parse_error(tmp_path):
    path = tmp_path / "empty.obj"
    path.write_text("")
    with pytest.raises(MeshError):
        load_mesh(path)


def test_degenerate_mesh_rejected(tmp_path):
    path = tmp_path / "flat.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 2 0 0\nf 1 2 3\n")
    with pytest.raises(MeshError):
        load_mesh(path)


def test_bad_token_reports_line(tmp_path):
    path = tmp_path / "bad.obj"
    path.write_text("v 0 0 0\nv 1 x 0\n")
    with pytest.raises(MeshError, match=":2:"):
        load_mesh(path)


@pytest.mark.parametrize("side, expected", [(1.0, 0.08), (2.0, 0.08), (0.5, 0.07)])
def test_normalize_object_scale_cubes(side, expected):
    mesh = normalize_object_scale(box_mesh((side, side, side)))
    np.testing.assert_allclose(mesh.extents, expected, rtol=1e-12)


def test_normalize_object_scale_idempotent():
    once = normalize_object_scale(box_mesh((3.0, 1.0, 0.2)))
    twice = normalize_object_scale(once)
    assert np.abs(twice.extents - once.extents).max() < 1e-9


def test_normalize_zero_extent():
    from fcgrasp.geometry import TriangleMesh

    mesh = TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))
    with pytest.raises(MeshError):
        normalize_object_scale(mesh)


def test_sphere_sdf_center_and_outside(unit_sphere_grid):
    _, grid = unit_sphere_grid
    h = grid.spacing
    d, _ = sdf_query(grid, [0.0, 0.0, 0.0])
    assert abs(d + 1.0) < 2 * h
    d, _ = sdf_query(grid, [2.0, 0.0, 0.0])
    assert abs(d - 1.0) < 2 * h


def test_out_of_grid_query_is_flagged_and_above_boundary(unit_sphere_grid):
    _, grid = unit_sphere_grid
    p = np.array([[3.0, 0.2, -0.1]])
    s = sdf_eval(grid, p)
    boundary = sdf_eval(grid, np.clip(p, grid.origin, grid.upper))
    assert s.outside[0]
    assert s.distance[0] >= boundary.distance[0]


def test_sdf_query_half_radius(unit_sphere_grid):
    _, grid = unit_sphere_grid
    d, n = sdf_query(grid, [0.5, 0.0, 0.0])
    assert abs(d + 0.5) < 2 * grid.spacing
    # the nearest feature of the faceted sphere is a flat face, and the
    # trilinear gradient on a 0.1 grid tilts it further; within about 11 degrees
    assert n @ [1.0, 0.0, 0.0] > 0.98


def test_surface_point_distance_within_spacing(unit_sphere_grid):
    mesh, grid = unit_sphere_grid
    for v in mesh.vertices[::37]:
        d, _ = sdf_query(grid, v)
        assert abs(d) <= grid.spacing


def test_sdf_matches_brute_force_distance(unit_sphere_grid, rng):
    mesh, grid = unit_sphere_grid
    pts = rng.uniform(-1.2, 1.2, size=(15, 3))
    s = sdf_eval(grid, pts)
    for p, d in zip(pts, s.distance):
        ref = _brute_distance(mesh, p)
        assert abs(abs(d) - ref) < 1.5 * grid.spacing


def test_exact_distance_kernel_matches_brute_force(unit_sphere_grid, rng):
    mesh, _ = unit_sphere_grid
    pts = rng.uniform(-1.5, 1.5, size=(10, 3))
    exact, _ = point_mesh_distance(mesh, pts)
    for p, d in zip(pts, exact):
        ref = _brute_distance(mesh, p)
        assert d <= ref + 1e-12
        assert ref - d < 0.01  # sampling resolution of the brute force


def test_sdf_gradient_matches_finite_differences(unit_sphere_grid, rng):
    _, grid = unit_sphere_grid
    checked = 0
    h = 1e-6
    for p in rng.uniform(-1.1, 1.1, size=(60, 3)):
        s = sdf_eval(grid, p[None])
        if s.near_face[0] or s.outside[0]:
            continue
        fd = np.array([(sdf_eval(grid, (p + h * e)[None]).distance[0]
                        - sdf_eval(grid, (p - h * e)[None]).distance[0]) / (2 * h) for e in np.eye(3)])
        g = s.gradient[0]
        assert np.linalg.norm(fd - g) <= 1e-3 * max(np.linalg.norm(g), 1e-12)
        checked += 1
    assert checked > 30


def test_sdf_hessian_matches_gradient_differences(unit_sphere_grid, rng):
    _, grid = unit_sphere_grid
    h = 1e-6
    for p in rng.uniform(-0.9, 0.9, size=(10, 3)):
        s = sdf_eval(grid, p[None], hessian=True)
        if s.near_face[0]:
            continue
        fd = np.stack([(sdf_eval(grid, (p + h * e)[None]).gradient[0]
                        - sdf_eval(grid, (p - h * e)[None]).gradient[0]) / (2 * h) for e in np.eye(3)], axis=1)
        np.testing.assert_allclose(s.hessian[0], fd, atol=1e-5 * max(1.0, np.abs(fd).max()))


def test_spacing_validation():
    mesh = box_mesh((1.0, 1.0, 0.1))
    with pytest.raises(ValueError):
        build_sdf_grid(mesh, spacing=0.05)
    with pytest.raises(ValueError):
        build_sdf_grid(mesh, spacing=-1.0)


def test_grid_has_two_cell_margin():
    mesh = box_mesh((1.0, 1.0, 1.0))
    grid = build_sdf_grid(mesh, spacing=0.1)
    lo, hi = mesh.bounds
    assert np.all(grid.origin <= lo - 2 * grid.spacing + 1e-12)
    assert np.all(grid.upper >= hi + 2 * grid.spacing - 1e-12)


def test_open_mesh_uses_normal_heuristic():
    full = box_mesh((1.0, 1.0, 1.0))
    from fcgrasp.geometry import TriangleMesh

    open_mesh = TriangleMesh(full.vertices, full.triangles[:-2])
    grid = build_sdf_grid(open_mesh, spacing=0.1)
    assert grid.sign_method == "normal_heuristic"
    assert sdf_query(grid, [0.0, 0.0, 0.0])[0] < 0


def test_sdf_cache_roundtrip(tmp_path, unit_sphere_grid):
    _, grid = unit_sphere_grid
    path = tmp_path / "g.sdf"
    save_sdf(grid, path)
    raw = path.read_bytes()
    assert raw[:4] == b"SDF1"
    back = load_sdf(path)
    assert back.dims == grid.dims
    np.testing.assert_array_equal(back.origin, grid.origin)
    np.testing.assert_allclose(back.values, grid.values.astype(np.float32), rtol=0, atol=0)


def test_truncated_sdf_cache(tmp_path, unit_sphere_grid):
    _, grid = unit_sphere_grid
    path = tmp_path / "g.sdf"
    save_sdf(grid, path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_sdf(path)


def test_grid_validation():
    with pytest.raises(ValueError):
        SdfGrid(np.zeros(3), 0.0, (2, 2, 2), np.zeros(8))


def test_fps_forced_example():
    # indices of the points 0 and 10
    assert sorted(farthest_point_sample([0.0, 1.0, 10.0], 2, start=0)) == [0, 2]


def test_fps_all_points_and_errors(rng):
    pts = rng.normal(size=(12, 3))
    assert sorted(farthest_point_sample(pts, 12, seed=3)) == list(range(12))
    with pytest.raises(ValueError):
        farthest_point_sample(pts, 13)
    with pytest.raises(ValueError):
        farthest_point_sample(np.zeros((0, 3)), 1)


def test_fps_deterministic(rng):
    pts = rng.normal(size=(50, 3))
    assert list(farthest_point_sample(pts, 7, seed=9)) == list(farthest_point_sample(pts, 7, seed=9))


def _min_pairwise(p):
    return min(np.linalg.norm(a - b) for a, b in itertools.combinations(p, 2))


def test_fps_beats_random_subsets(rng):
    pts = rng.uniform(size=(100, 3))
    chosen = farthest_point_sample(pts, 10, seed=0)
    d_fps = _min_pairwise(pts[chosen])
    for _ in range(50):
        sub = rng.choice(100, 10, replace=False)
        assert d_fps >= _min_pairwise(pts[sub])


def test_surface_sample_cube_faces():
    mesh = box_mesh((1.0, 1.0, 1.0))
    s = surface_sample(mesh, 6000, seed=0)
    # each face of the unit cube lies on one of the planes |x_i| = 0.5
    axis = np.argmax(np.abs(s.points), axis=1)
    sign = np.sign(s.points[np.arange(6000), axis])
    counts = np.array([np.sum((axis == a) & (sign == sg)) for a in range(3) for sg in (-1, 1)])
    assert np.all(np.abs(counts - 1000) <= 100)


def test_surface_sample_single_point_on_surface():
    mesh = icosphere(1.0, 2)
    s = surface_sample(mesh, 1, seed=1)
    assert s.points.shape == (1, 3)
    d, _ = point_mesh_distance(mesh, s.points)
    assert d[0] < 1e-6


def test_surface_sample_sphere_centered():
    mesh = icosphere(1.0, 3)
    s = surface_sample(mesh, 3000, seed=2)
    assert np.linalg.norm(s.points.mean(axis=0)) < 0.05
    np.testing.assert_allclose(np.linalg.norm(s.normals, axis=1), 1.0, atol=1e-9)
    with pytest.raises(ValueError):
        surface_sample(mesh, 0)
