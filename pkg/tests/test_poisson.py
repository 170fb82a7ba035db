import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthforge.errors import ConvergenceError, PreconditionError
from depthforge.geometry import PointCloud
from depthforge.poisson import (
    GridSpec,
    ScalarField,
    VectorField,
    bspline_weights,
    divergence,
    extract_isosurface,
    grid_for_cloud,
    largest_component,
    laplacian,
    poisson_reconstruct,
    poisson_residual,
    poisson_surface,
    select_isovalue,
    solve_indicator,
    splat_vector_field,
)
from conftest import sphere_points


def bump(grid, radius):
    """phi = (1 - r^2/R^2)^4 inside R, with its analytic gradient."""
    x = grid.node_positions()
    c = grid.origin + 0.5 * grid.cell_size * (np.array(grid.dims) - 1)
    d = x - c
    s = 1.0 - np.sum(d * d, axis=-1) / radius**2
    inside = s > 0
    phi = np.where(inside, s, 0.0) ** 4
    grad = np.where(inside[..., None], -8.0 * (np.where(inside, s, 0.0) ** 3)[..., None] * d / radius**2, 0.0)
    return phi, grad


def manufactured(n=64, h=1.0):
    grid = GridSpec(np.zeros(3), h, (n, n, n))
    phi, grad = bump(grid, 0.35 * n * h)
    chi, info = solve_indicator(VectorField(grid, grad))
    return phi, chi, info


def test_bspline_partition_of_unity(rng):
    w = bspline_weights(rng.uniform(0, 1, 1000))
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(w >= 0)


def test_single_point_splat():
    grid = GridSpec(np.zeros(3), 1.0, (12, 12, 12))
    v = splat_vector_field(PointCloud(np.array([[5.0, 5.0, 5.0]]), np.array([[0.0, 0.0, 1.0]])), grid)
    nz = np.argwhere(np.abs(v.values[..., 2]) > 0)
    assert np.all(nz >= 4) and np.all(nz <= 7)
    assert np.all(v.values[..., 2] >= 0)
    assert v.values[..., 2].sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(v.values[..., :2] == 0)


def test_empty_splat_is_zero():
    grid = GridSpec(np.zeros(3), 1.0, (10, 10, 10))
    v = splat_vector_field(PointCloud(np.zeros((0, 3))), grid)
    assert not v.values.any()


def test_splat_mass_conserved(sphere_cloud):
    grid = grid_for_cloud(sphere_cloud)
    v = splat_vector_field(sphere_cloud, grid)
    assert v.density.sum() == pytest.approx(len(sphere_cloud), rel=1e-9)
    np.testing.assert_allclose(v.values.reshape(-1, 3).sum(axis=0), sphere_cloud.normals.sum(axis=0), atol=1e-8)
    # nothing reaches the Dirichlet shell
    shell = np.ones(grid.dims, bool)
    shell[1:-1, 1:-1, 1:-1] = False
    assert np.abs(v.values[shell]).sum() < 1e-6 * v.density.sum()


def test_splat_outside_grid_names_point():
    grid = GridSpec(np.zeros(3), 1.0, (10, 10, 10))
    cloud = PointCloud(np.array([[5.0, 5, 5], [0.5, 5, 5]]), np.tile([0, 0, 1.0], (2, 1)))
    with pytest.raises(PreconditionError, match="point 1"):
        splat_vector_field(cloud, grid)


def test_grid_padding(sphere_cloud):
    grid = grid_for_cloud(sphere_cloud, 64, 4)
    assert max(grid.dims) == 64
    lo, hi = sphere_cloud.bounds()
    g_lo = grid.origin
    g_hi = grid.origin + grid.cell_size * (np.array(grid.dims) - 1)
    assert np.all(lo - g_lo >= 4 * grid.cell_size - 1e-9)
    assert np.all(g_hi - hi >= 4 * grid.cell_size - 1e-9)


def test_zero_field_gives_zero():
    grid = GridSpec(np.zeros(3), 1.0, (10, 10, 10))
    chi, info = solve_indicator(VectorField(grid, np.zeros((10, 10, 10, 3))))
    assert not chi.values.any()
    assert info.residual == 0.0


def test_manufactured_solution():
    phi, chi, info = manufactured()
    err = np.linalg.norm(chi.values - phi) / np.linalg.norm(phi)
    assert err < 0.05
    assert info.residual < 1e-8


def test_plain_cg_agrees_with_preconditioned():
    grid = GridSpec(np.zeros(3), 1.0, (24, 24, 24))
    _, grad = bump(grid, 8.0)
    a, ia = solve_indicator(VectorField(grid, grad), "fst")
    b, ib = solve_indicator(VectorField(grid, grad), "none")
    assert ia.residual < 1e-8 and ib.residual < 1e-8
    assert ib.iterations > ia.iterations
    np.testing.assert_allclose(a.values, b.values, atol=1e-6 * np.abs(a.values).max())


def test_iteration_cap_raises():
    grid = GridSpec(np.zeros(3), 1.0, (24, 24, 24))
    _, grad = bump(grid, 8.0)
    with pytest.raises(ConvergenceError) as exc:
        solve_indicator(VectorField(grid, grad), "none", max_iter=3)
    assert exc.value.residual > 1e-8


def test_residual_matches_laplacian(sphere_cloud):
    grid = grid_for_cloud(sphere_cloud, 32)
    v = splat_vector_field(sphere_cloud, grid)
    chi, info = solve_indicator(VectorField(grid, -v.values))
    div = divergence(VectorField(grid, -v.values))
    r = laplacian(chi.values, grid.cell_size) - div
    assert np.linalg.norm(r[1:-1, 1:-1, 1:-1]) / np.linalg.norm(div) < 1e-8
    assert poisson_residual(chi.values, div, grid.cell_size) == pytest.approx(info.residual)


def test_sphere_indicator_changes_sign(sphere_cloud):
    res = poisson_surface(sphere_cloud, 48)
    inner = select_isovalue(res.chi, PointCloud(sphere_cloud.points * 0.5))
    outer = select_isovalue(res.chi, PointCloud(sphere_cloud.points * 1.1))
    assert inner > res.isovalue > outer


def test_isovalue_constant_and_linear():
    grid = GridSpec(np.zeros(3), 1.0, (10, 10, 10))
    const = ScalarField(grid, np.full(grid.dims, 3.5))
    assert select_isovalue(const, PointCloud(np.array([[2.0, 3, 4]]))) == pytest.approx(3.5)
    z = grid.node_positions()[..., 2]
    lin = ScalarField(grid, 2 * z - 8)
    pts = np.array([[3.0, 3.0, 3.0], [5.0, 6.0, 5.0]])
    assert select_isovalue(lin, PointCloud(pts)) == pytest.approx(2 * 4.0 - 8)


def test_linear_field_gives_plane():
    grid = GridSpec(np.array([0, 0, -4.5]), 1.0, (10, 10, 10))
    z = grid.node_positions()[..., 2]
    mesh = extract_isosurface(ScalarField(grid, z), 0.0)
    assert len(mesh.triangles) > 0
    assert np.all(np.abs(mesh.vertices[:, 2]) < 1e-9)


def test_sdf_sphere_closed_and_outward():
    grid = GridSpec(np.full(3, -64.0), 2.0, (65, 65, 65))
    sdf = 50.0 - np.linalg.norm(grid.node_positions(), axis=-1)
    mesh = extract_isosurface(ScalarField(grid, sdf), 0.0)
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.all(np.abs(r - 50) <= grid.cell_size)
    assert mesh.boundary_edge_count() == 0
    # triangle normals point toward decreasing values, i.e. outward
    c = mesh.corners
    volume = np.einsum("ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])).sum() / 6
    assert volume == pytest.approx(4 / 3 * np.pi * 50**3, rel=0.01)


def test_isovalue_out_of_range_gives_empty():
    grid = GridSpec(np.zeros(3), 1.0, (10, 10, 10))
    mesh = extract_isosurface(ScalarField(grid, np.ones(grid.dims)), 0.0)
    assert len(mesh.triangles) == 0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_marching_cubes_watertight(seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(12, 12, 12))
    v[0, :, :] = v[-1, :, :] = v[:, 0, :] = v[:, -1, :] = v[:, :, 0] = v[:, :, -1] = -5.0
    mesh = extract_isosurface(ScalarField(GridSpec(np.zeros(3), 1.0, v.shape), v), float(rng.uniform(-0.5, 0.5)))
    assert mesh.boundary_edge_count() == 0
    _, counts = mesh.edge_use_counts()
    assert np.all(counts == 2)


def test_largest_component_picks_biggest():
    grid = GridSpec(np.full(3, -40.0), 1.0, (81, 81, 81))
    x = grid.node_positions()
    big = 20.0 - np.linalg.norm(x - [-10, 0, 0], axis=-1)
    small = 6.0 - np.linalg.norm(x - [25, 0, 0], axis=-1)
    mesh = extract_isosurface(ScalarField(grid, np.maximum(big, small)), 0.0)
    kept, n = largest_component(mesh)
    assert n == 2
    assert np.all(np.abs(np.linalg.norm(kept.vertices - [-10, 0, 0], axis=1) - 20) < 1.0)


def test_clean_sphere_reconstruction(sphere_cloud):
    res = poisson_surface(sphere_cloud, 64)
    r = np.linalg.norm(res.mesh.vertices, axis=1)
    assert res.mesh.is_closed()
    assert np.sqrt(np.mean((r - 50) ** 2)) < 1.5
    assert abs(r.mean() - 50) < 2 * res.chi.grid.cell_size
    assert res.components >= 1
    assert res.solve.residual < 1e-8


def test_translation_equivariance(sphere_cloud):
    offset = np.array([12.5, -7.25, 3.0])
    a = poisson_reconstruct(sphere_cloud, 32)
    b = poisson_reconstruct(PointCloud(sphere_cloud.points + offset, sphere_cloud.normals), 32)
    assert np.array_equal(a.triangles, b.triangles)
    assert np.max(np.abs(b.vertices - offset - a.vertices)) < 1e-9


def test_needs_hundred_points():
    p, n = sphere_points(99)
    with pytest.raises(PreconditionError):
        poisson_reconstruct(PointCloud(p, n))
