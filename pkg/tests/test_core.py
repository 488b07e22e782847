import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from nsf.geometry import Aabb, PointCloud, TriMesh, box_mesh, grid_mesh, icosphere
from nsf.io import ParseError, load_cloud_ply, load_mesh, load_obj, load_ply, save_cloud_ply, save_mesh, save_obj, save_ply
from nsf.knn import KnnIndex, build_knn_index
from nsf.metrics import (chamfer_uni, closest_point_on_triangles, iou_voxel, laplacian_energy, laplacian_matrix,
                         normal_consistency, point_to_mesh_distance, smooth_uniform, uniform_laplacian)
from nsf.normals import estimate_normals

DATA = os.path.join(os.path.dirname(__file__), "data")


def brute_knn(points, queries, k):
    d = np.linalg.norm(queries[:, None, :] - points[None, :, :], axis=2)
    out_d, out_i = [], []
    for row in d:
        order = np.lexsort((np.arange(len(row)), row))[:k]
        out_d.append(row[order])
        out_i.append(order)
    return np.array(out_d), np.array(out_i)


def brute_chamfer(a, b):
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return d.min(axis=1).mean()


def brute_nc(pa, na, pb, nb):
    d_ab = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1)
    ia = np.array([np.lexsort((np.arange(len(r)), r))[0] for r in d_ab])
    ib = np.array([np.lexsort((np.arange(len(r)), r))[0] for r in d_ab.T])
    return 0.5 * (np.mean([na[i] @ nb[ia[i]] for i in range(len(pa))]) +
                  np.mean([nb[i] @ na[ib[i]] for i in range(len(pb))]))


def unit_rows(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# -- types ---------------------------------------------------------------------------

def test_trimesh_rejects_out_of_range_and_degenerate_faces():
    v = np.zeros((3, 3))
    with pytest.raises(ValueError):
        TriMesh(v, [[0, 1, 3]])
    with pytest.raises(ValueError):
        TriMesh(v, [[0, 1, 1]])


def test_pointcloud_requires_unit_normals():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((1, 3)), [[0.0, 0.0, 2.0]])
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), [[0.0, 0.0, 1.0]])


def test_aabb_rejects_inverted_box():
    with pytest.raises(ValueError):
        Aabb(np.ones(3), np.zeros(3))


def test_icosphere_is_closed_genus_zero():
    m = icosphere(3)
    assert m.is_watertight() and m.is_consistently_oriented()
    assert m.euler_characteristic() == 2


# -- knn -----------------------------------------------------------------------------

def test_knn_single_point_returns_min_k():
    idx = build_knn_index([[1.0, 2.0, 3.0]])
    d, i = idx.query([[5.0, 5.0, 5.0]], k=3)
    assert i.shape == (1, 1) and i[0, 0] == 0


def test_knn_cube_corners_ties_sorted_by_index():
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    d, i = KnnIndex(corners).query([[0.5, 0.5, 0.5]], k=8)
    np.testing.assert_array_equal(i[0], np.arange(8))
    np.testing.assert_allclose(d[0], np.sqrt(0.75), rtol=0, atol=1e-15)


def test_knn_matches_brute_force_random():
    rng = np.random.default_rng(3)
    p, q = rng.random((1000, 3)), rng.random((100, 3))
    d, i = KnnIndex(p).query(q, 3)
    bd, bi = brute_knn(p, q, 3)
    np.testing.assert_array_equal(i, bi)
    np.testing.assert_array_equal(d, bd)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 40), k=st.integers(1, 10), seed=st.integers(0, 10_000), grid=st.booleans())
def test_knn_equals_brute_force_property(n, k, seed, grid):
    rng = np.random.default_rng(seed)
    # integer grids force many exact ties
    p = rng.integers(0, 3, size=(n, 3)).astype(float) if grid else rng.random((n, 3))
    q = rng.integers(0, 3, size=(7, 3)).astype(float) if grid else rng.random((7, 3))
    d, i = KnnIndex(p).query(q, k)
    bd, bi = brute_knn(p, q, min(k, n))
    np.testing.assert_array_equal(i, bi)
    np.testing.assert_array_equal(d, bd)


def test_knn_empty_set_rejected():
    with pytest.raises(ValueError):
        KnnIndex(np.zeros((0, 3)))


# -- normals -------------------------------------------------------------------------

def test_normals_plane_point_up():
    rng = np.random.default_rng(0)
    p = np.c_[rng.uniform(-1, 1, (500, 2)), np.zeros(500)]
    c = estimate_normals(p, viewpoint=(0, 0, 5))
    np.testing.assert_allclose(c.normals, np.tile([0, 0, 1.0], (len(c), 1)), atol=1e-3)


def test_normals_sphere_radial():
    p = unit_rows(np.random.default_rng(1), 5000)
    c = estimate_normals(p, viewpoint=(0, 0, 10))
    cosang = np.abs(np.einsum("ij,ij->i", c.normals, c.points))
    assert np.mean(cosang > np.cos(np.radians(5))) >= 0.99


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000))
def test_normals_unit_and_face_viewpoint(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(200, 3))
    view = rng.normal(size=3) * 5
    c = estimate_normals(p, view)
    np.testing.assert_allclose(np.linalg.norm(c.normals, axis=1), 1.0, atol=1e-12)
    assert np.all(np.einsum("ij,ij->i", c.normals, view - c.points) >= 0)


# -- chamfer / normal consistency -------------------------------------------------------

def test_chamfer_trivial_cases():
    a = np.random.default_rng(0).random((50, 3))
    assert chamfer_uni(a, a) == 0.0
    assert chamfer_uni([[0, 0, 0]], [[0, 0, 2]]) == 2.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_chamfer_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((500, 3)), rng.random((500, 3))
    assert abs(chamfer_uni(a, b) - brute_chamfer(a, b)) < 1e-9


@settings(max_examples=25, deadline=None)
@given(a=arrays(np.float64, (20, 3), elements=st.floats(-10, 10)),
       b=arrays(np.float64, (15, 3), elements=st.floats(-10, 10)),
       t=arrays(np.float64, (3,), elements=st.floats(-10, 10)))
def test_chamfer_nonnegative_translation_invariant(a, b, t):
    c = chamfer_uni(a, b)
    assert c >= 0
    assert chamfer_uni(a, a) == 0
    assert abs(chamfer_uni(a + t, b + t) - c) < 1e-9


def test_normal_consistency_trivial():
    rng = np.random.default_rng(0)
    p, n = rng.random((100, 3)), unit_rows(rng, 100)
    a = PointCloud(p, n)
    assert normal_consistency(a, a) == pytest.approx(1.0, abs=1e-12)
    assert normal_consistency(a, PointCloud(p, -n)) == pytest.approx(-1.0, abs=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_normal_consistency_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    pa, pb = rng.random((300, 3)), rng.random((250, 3))
    na, nb = unit_rows(rng, 300), unit_rows(rng, 250)
    got = normal_consistency(PointCloud(pa, na), PointCloud(pb, nb))
    assert abs(got - brute_nc(pa, na, pb, nb)) < 1e-9


# -- IoU ---------------------------------------------------------------------------------

def lens_iou(r, d):
    lens = np.pi * (4 * r + d) * (2 * r - d) ** 2 / 12
    ball = 4 / 3 * np.pi * r ** 3
    return lens / (2 * ball - lens)


def test_iou_trivial_cases():
    s = icosphere(3)
    assert iou_voxel(s, s, 32) == 1.0
    a, b = box_mesh((0, 0, 0), (1, 1, 1)), box_mesh((6, 0, 0), (7, 1, 1))
    assert iou_voxel(a, b, 64) == 0.0


@pytest.mark.parametrize("offset", [0.5, 0.8, 1.2])
def test_iou_matches_sphere_lens_formula(offset):
    a = icosphere(5)
    b = icosphere(5, center=(offset, 0, 0))
    assert abs(iou_voxel(a, b, 64) - lens_iou(1.0, offset)) < 0.02


def test_iou_monotone_as_meshes_separate():
    a = icosphere(3)
    vals = [iou_voxel(a, icosphere(3, center=(d, 0, 0)), 48) for d in (0.0, 0.3, 0.6, 1.0, 1.5, 2.5)]
    assert all(x >= y for x, y in zip(vals, vals[1:]))
    assert all(iou_voxel(a, a, r) == 1.0 for r in (8, 17, 40))


def test_iou_rejects_open_mesh():
    with pytest.raises(ValueError):
        iou_voxel(grid_mesh(4), icosphere(2), 16)


# -- point-to-mesh ---------------------------------------------------------------------------

def test_closest_point_on_triangle_matches_dense_sampling():
    rng = np.random.default_rng(0)
    a, b, c = rng.random((3, 3))
    u, v = np.meshgrid(np.linspace(0, 1, 801), np.linspace(0, 1, 801))
    keep = u + v <= 1
    samples = a + u[keep][:, None] * (b - a) + v[keep][:, None] * (c - a)
    for p in rng.normal(size=(20, 3)):
        q = closest_point_on_triangles(p[None], a[None], b[None], c[None])[0]
        brute = np.linalg.norm(samples - p, axis=1).min()
        assert np.linalg.norm(q - p) <= brute + 1e-12
        assert np.linalg.norm(q - p) >= brute - 2e-3


def test_point_to_mesh_sphere_distance():
    m = icosphere(4)
    p = unit_rows(np.random.default_rng(0), 200) * 1.5
    d, _ = point_to_mesh_distance(p, m)
    np.testing.assert_allclose(d, 0.5, atol=0.01)


# -- Laplacian --------------------------------------------------------------------------------

def test_laplacian_zero_on_planar_grid_interior():
    g = grid_mesh(6, 1.0)
    lap = uniform_laplacian(g)
    deg = np.asarray(g.adjacency().sum(axis=1)).ravel()
    interior = deg == deg.max()
    assert interior.any()
    np.testing.assert_allclose(lap[interior], 0.0, atol=1e-12)


def test_laplacian_single_triangle_by_hand():
    m = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    # 1-ring means: v0 -> (.5,.5,0), v1 -> (0,.5,0), v2 -> (.5,0,0); squared norms .5, 1.25, 1.25
    assert laplacian_energy(m) == pytest.approx((0.5 + 1.25 + 1.25) / 3, abs=1e-15)


def test_laplacian_icosphere_decreases_under_smoothing():
    m = icosphere(3)
    e0 = laplacian_energy(m)
    assert e0 > 0
    assert laplacian_energy(smooth_uniform(m)) < e0


def test_laplacian_matrix_matches_rows():
    m = icosphere(2)
    np.testing.assert_allclose(laplacian_matrix(m) @ m.vertices, uniform_laplacian(m), atol=1e-14)


# -- io ----------------------------------------------------------------------------------------

def random_mesh(seed=0, colors=True):
    rng = np.random.default_rng(seed)
    m = icosphere(2)
    v = (m.vertices + rng.normal(scale=0.01, size=m.vertices.shape)).astype(np.float32).astype(np.float64)
    c = rng.integers(0, 256, size=(len(v), 3)) / 255.0 if colors else None
    return TriMesh(v, m.faces, colors=c)


@pytest.mark.parametrize("ext", [".ply", ".obj"])
def test_mesh_round_trip(tmp_path, ext):
    m = random_mesh()
    path = str(tmp_path / f"m{ext}")
    save_mesh(path, m)
    back = load_mesh(path)
    np.testing.assert_array_equal(back.faces, m.faces)
    if ext == ".ply":
        np.testing.assert_array_equal(back.vertices, m.vertices)
        np.testing.assert_allclose(back.colors, m.colors, atol=1e-12)
    else:
        np.testing.assert_allclose(back.vertices, m.vertices, rtol=1e-8)
        np.testing.assert_allclose(back.colors, m.colors, atol=1e-6)


def test_cloud_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    p = rng.random((100, 3)).astype(np.float32).astype(np.float64)
    n = unit_rows(rng, 100).astype(np.float32).astype(np.float64)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    c = PointCloud(p, n)
    path = str(tmp_path / "c.ply")
    save_cloud_ply(path, c)
    back = load_cloud_ply(path)
    np.testing.assert_array_equal(back.points, p)
    np.testing.assert_allclose(back.normals, n, atol=1e-7)


def test_obj_quad_face_rejected(tmp_path):
    path = tmp_path / "quad.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(ParseError, match="non-triangular face"):
        load_obj(str(path))


def test_ply_matches_golden_bytes(tmp_path):
    mesh = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
                   colors=np.array([[255, 0, 0], [0, 255, 0], [0, 0, 255], [128, 128, 128]]) / 255.0)
    out = tmp_path / "t.ply"
    save_ply(str(out), mesh)
    with open(os.path.join(DATA, "tetra_colored.ply"), "rb") as fh:
        golden = fh.read()
    assert out.read_bytes() == golden
    # the fixture body is plain little-endian records
    vert = struct.unpack_from("<fffBBB", golden, golden.index(b"end_header\n") + 11)
    assert vert == (0.0, 0.0, 0.0, 255, 0, 0)


def test_ply_truncated_file_reports_error(tmp_path):
    with open(os.path.join(DATA, "tetra_colored.ply"), "rb") as fh:
        data = fh.read()
    path = tmp_path / "cut.ply"
    path.write_bytes(data[:-10])
    with pytest.raises(ParseError):
        load_ply(str(path))


def test_obj_round_trip_without_colors(tmp_path):
    m = random_mesh(colors=False)
    save_obj(str(tmp_path / "a.obj"), m)
    assert load_obj(str(tmp_path / "a.obj")).colors is None
