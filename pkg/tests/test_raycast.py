import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthforge.geometry import CameraIntrinsics, CameraPose, TriangleMesh, matrix_to_quat
from depthforge.raycast import (
    MeshDistance,
    _closest_on_triangles,
    cast_pixels,
    closest_points,
    locate_2d,
    vertical_heights,
)
from depthforge.synth import look_at, uv_sphere
from oracles import ray_sphere

INTR = CameraIntrinsics(100.0, 100.0, 32.0, 24.0, 64, 48)


def camera_at(center, target=(0.0, 0.0, 0.0)):
    return CameraPose(0, matrix_to_quat(look_at(center, target)), center)


def brute_locate(tri2d, queries):
    """Barycentric inside test for every (query, triangle) pair."""
    hits = set()
    for t, (a, b, c) in enumerate(tri2d):
        m = np.array([b - a, c - a]).T
        if abs(np.linalg.det(m)) < 1e-12:
            continue
        st_ = np.linalg.solve(m, (queries - a).T).T
        inside = (st_[:, 0] >= -1e-9) & (st_[:, 1] >= -1e-9) & (st_.sum(axis=1) <= 1 + 1e-9)
        hits.update((int(q), t) for q in np.nonzero(inside)[0])
    return hits


def dense_triangle_samples(a, b, c, n=120):
    i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    keep = i + j <= n
    s, t = i[keep] / n, j[keep] / n
    return a + s[:, None] * (b - a) + t[:, None] * (c - a)


def random_mesh(rng, n_tri=60, spread=20.0):
    verts = rng.uniform(-spread, spread, (3 * n_tri, 3))
    return TriangleMesh(verts, np.arange(3 * n_tri).reshape(-1, 3))


def test_locate_matches_brute(rng):
    tri = rng.uniform(0, 10, (40, 3, 2))
    q = rng.uniform(0, 10, (500, 2))
    qi, ti, w = locate_2d(tri, q)
    got = set(zip(qi.tolist(), ti.tolist()))
    expected = brute_locate(tri, q)
    # pairs within 1e-9 of an edge may go either way; none exist for random data
    assert got == expected
    recon = np.einsum("ki,kij->kj", w, tri[ti])
    np.testing.assert_allclose(recon, q[qi], atol=1e-9)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_locate_shared_edge_counts_both():
    tri = np.array([[[0, 0], [1, 0], [0, 1]], [[1, 0], [1, 1], [0, 1]]], dtype=float)
    qi, ti, _ = locate_2d(tri, np.array([[0.5, 0.5], [2.0, 2.0]]))
    assert sorted(ti.tolist()) == [0, 1]
    assert np.all(qi == 0)


def test_locate_skips_degenerate():
    tri = np.array([[[0, 0], [1, 1], [2, 2]]], dtype=float)
    qi, _, _ = locate_2d(tri, np.array([[1.0, 1.0]]))
    assert len(qi) == 0


def test_vertical_heights_on_plane(rng):
    g = np.linspace(-10, 10, 11)
    x, y = np.meshgrid(g, g, indexing="ij")
    verts = np.stack([x.ravel(), y.ravel(), 0.3 * x.ravel() - 0.2 * y.ravel() + 5], axis=1)
    tris = []
    for i in range(10):
        for j in range(10):
            a, b, c, d = i * 11 + j, (i + 1) * 11 + j, i * 11 + j + 1, (i + 1) * 11 + j + 1
            tris += [[a, b, d], [a, d, c]]
    mesh = TriangleMesh(verts, np.array(tris))
    xy = rng.uniform(-10, 10, (300, 2))
    z = vertical_heights(mesh, np.vstack([xy, [[50.0, 50.0]]]))
    np.testing.assert_allclose(z[:-1], 0.3 * xy[:, 0] - 0.2 * xy[:, 1] + 5, atol=1e-9)
    assert np.isnan(z[-1])


def test_vertical_heights_takes_top_surface():
    mesh = uv_sphere(64, 32)
    mesh = TriangleMesh(mesh.vertices * 30.0, mesh.triangles)
    z = vertical_heights(mesh, np.array([[0.0, 0.0], [5.0, 3.0]]))
    assert z[0] == pytest.approx(30.0)
    assert z[1] > 0 and abs(z[1] - np.sqrt(900 - 34)) < 0.5


def test_closest_on_triangle_against_dense_sampling(rng):
    for _ in range(30):
        a, b, c = rng.uniform(-5, 5, (3, 3))
        p = rng.uniform(-10, 10, (50, 3))
        cp = _closest_on_triangles(p, np.tile(a, (50, 1)), np.tile(b, (50, 1)), np.tile(c, (50, 1)))
        d = np.linalg.norm(p - cp, axis=1)
        dense = dense_triangle_samples(a, b, c)
        dmin = np.min(np.linalg.norm(p[:, None] - dense[None], axis=2), axis=1)
        spacing = max(np.linalg.norm(b - a), np.linalg.norm(c - a), np.linalg.norm(c - b)) / 120
        assert np.all(d <= dmin + 1e-9)
        assert np.all(d >= dmin - spacing)
        # the closest point lies on the triangle: barycentric weights are valid
        m = np.array([b - a, c - a]).T
        st_, *_ = np.linalg.lstsq(m, (cp - a).T, rcond=None)
        assert np.all(st_ >= -1e-9) and np.all(st_.sum(axis=0) <= 1 + 1e-9)


def test_mesh_distance_matches_all_pairs(rng):
    mesh = random_mesh(rng, 80)
    pts = rng.uniform(-40, 40, (400, 3))
    d, p, t = MeshDistance(mesh).query(pts)
    c = mesh.corners
    n, m = len(pts), len(c)
    cp = _closest_on_triangles(np.repeat(pts, m, axis=0), np.tile(c[:, 0], (n, 1)),
                               np.tile(c[:, 1], (n, 1)), np.tile(c[:, 2], (n, 1)))
    dist = np.linalg.norm(np.repeat(pts, m, axis=0) - cp, axis=1).reshape(n, m)
    np.testing.assert_allclose(d, dist.min(axis=1), rtol=0, atol=1e-12)
    assert np.array_equal(t, dist.argmin(axis=1))
    np.testing.assert_allclose(np.linalg.norm(pts - p, axis=1), d, atol=1e-12)


def test_mesh_distance_ties_go_to_lower_index():
    tri = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    mesh = TriangleMesh(np.vstack([tri, tri]), np.array([[0, 1, 2], [3, 4, 5]]))
    _, _, t = closest_points(mesh, np.array([[0.2, 0.2, 1.0], [5.0, 5.0, -3.0]]))
    assert np.all(t == 0)


def test_mesh_distance_rejects_empty_mesh():
    with pytest.raises(ValueError):
        MeshDistance(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int)))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_points_on_mesh_have_zero_distance(seed):
    rng = np.random.default_rng(seed)
    mesh = random_mesh(rng, 20)
    t = rng.integers(0, 20, 30)
    w = rng.dirichlet(np.ones(3), 30)
    pts = np.einsum("ki,kij->kj", w, mesh.corners[t])
    d, _, _ = closest_points(mesh, pts)
    assert np.all(d < 1e-9)


def test_cast_single_triangle_exact():
    # a large triangle in the plane z = 100 facing a camera at the origin
    verts = np.array([[-500.0, -500, 100], [500, -500, 100], [0, 500, 100]])
    mesh = TriangleMesh(verts, np.array([[0, 1, 2]]))
    pose = CameraPose(0, [0, 0, 0, 1.0], [0, 0, 0])
    px = np.array([[32.0, 24.0], [10.0, 5.0], [60.5, 40.25]])
    dist, tri = cast_pixels(mesh, INTR, pose, px)
    rays = INTR.pixel_rays(px[:, 0], px[:, 1])
    np.testing.assert_allclose(dist, 100 * np.linalg.norm(rays, axis=1), rtol=1e-12)
    assert np.all(tri == 0)


def test_cast_keeps_nearest_surface():
    near = np.array([[-500.0, -500, 50], [500, -500, 50], [0, 500, 50]])
    far = near + [0, 0, 50]
    mesh = TriangleMesh(np.vstack([far, near]), np.array([[0, 1, 2], [3, 4, 5]]))
    dist, tri = cast_pixels(mesh, INTR, CameraPose(0, [0, 0, 0, 1.0], [0, 0, 0]), np.array([[32.0, 24.0]]))
    assert dist[0] == pytest.approx(50.0)
    assert tri[0] == 1


def test_cast_behind_camera_misses():
    verts = np.array([[-500.0, -500, -100], [500, -500, -100], [0, 500, -100]])
    mesh = TriangleMesh(verts, np.array([[0, 1, 2]]))
    dist, tri = cast_pixels(mesh, INTR, CameraPose(0, [0, 0, 0, 1.0], [0, 0, 0]), np.array([[32.0, 24.0]]))
    assert np.isinf(dist[0]) and tri[0] == -1


def test_cast_matches_analytic_sphere():
    unit = uv_sphere(128, 64)
    mesh = TriangleMesh(unit.vertices * 50.0, unit.triangles)
    center = np.array([150.0, -60.0, 80.0])
    pose = camera_at(center)
    u, v = np.meshgrid(np.arange(INTR.width), np.arange(INTR.height))
    px = np.stack([u.ravel(), v.ravel()], axis=1).astype(float)
    dist, _ = cast_pixels(mesh, INTR, pose, px)
    rays = INTR.pixel_rays(px[:, 0], px[:, 1]) @ pose.matrix.T
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    exact = ray_sphere(center, rays, np.zeros(3), 50.0)
    both = np.isfinite(dist) & np.isfinite(exact)
    assert both.sum() > 0.5 * np.isfinite(exact).sum()
    assert np.mean(np.abs(dist[both] - exact[both]) <= 0.5) >= 0.99
    # a hit on the tessellated sphere implies the analytic sphere is hit too
    assert np.all(np.isfinite(exact[np.isfinite(dist)]))
