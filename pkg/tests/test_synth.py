import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthforge.errors import ParameterError, PreconditionError
from depthforge.geometry import PointCloud, Trajectory, matrix_to_quat
from depthforge.raycast import closest_points
from depthforge.synth import (
    CorruptionSpec,
    OrbitSpec,
    build_scene,
    corrupt,
    corrupt_with_transform,
    liver_preset,
    look_at,
    make_primitive,
    noisy_trajectory,
    orbit_trajectory,
    philox,
    sample_visible_points,
    sphere_preset,
    uv_sphere,
)


@pytest.fixture(scope="module")
def small_sphere_scene():
    spec = sphere_preset(orbit=OrbitSpec(radius=200.0, elevation_min=-60, elevation_max=60, n_frames=40))
    mesh = make_primitive(spec)
    traj = orbit_trajectory(spec)
    cloud = sample_visible_points(mesh, traj, spec.intrinsics, spec.points_per_frame, spec.seed)
    return spec, mesh, traj, cloud


def test_philox_streams_are_independent_and_repeatable():
    a = philox(42, 1).random(5)
    assert np.array_equal(a, philox(42, 1).random(5))
    assert not np.array_equal(a, philox(42, 2).random(5))
    assert not np.array_equal(a, philox(43, 1).random(5))


def test_uv_sphere_is_closed_unit_and_outward():
    m = uv_sphere(32, 16)
    np.testing.assert_allclose(np.linalg.norm(m.vertices, axis=1), 1.0, atol=1e-12)
    assert m.is_closed()
    c = m.corners.mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", m.face_normals(), c) > 0)


def test_sphere_primitive_radius():
    mesh = make_primitive(sphere_preset())
    np.testing.assert_allclose(np.linalg.norm(mesh.vertices, axis=1), 50.0, atol=1e-9)


def test_liver_extent_is_140mm():
    mesh = make_primitive(liver_preset())
    ext = mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)
    assert ext[0] == 140.0
    np.testing.assert_array_equal(ext, [140.0, 100.0, 80.0])
    v = mesh.vertices / [70.0, 50.0, 40.0]
    np.testing.assert_allclose(np.sum(v * v, axis=1), 1.0, atol=1e-12)


def test_orbit_shape():
    spec = liver_preset()
    traj = orbit_trajectory(spec)
    assert len(traj) == 900
    assert np.array_equal(traj.frame_ids, np.arange(900))
    np.testing.assert_allclose(np.linalg.norm(traj.translations, axis=1), 220.0, rtol=1e-12)
    el = np.degrees(np.arcsin(traj.translations[:, 2] / 220.0))
    assert el.min() >= 30 - 1e-9 and el.max() <= 70 + 1e-9
    # every camera looks at the orbit centre along +z of its frame
    forward = np.array([p.matrix[:, 2] for p in traj])
    to_center = -traj.translations / np.linalg.norm(traj.translations, axis=1, keepdims=True)
    np.testing.assert_allclose(np.einsum("ij,ij->i", forward, to_center), 1.0, atol=1e-12)


def test_look_at_frame_is_right_handed():
    R = look_at([100.0, 20.0, 50.0], [0, 0, 0])
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)
    assert R[2, 1] < 0  # image "down" points toward world -z


def test_look_at_rejects_vertical_view():
    with pytest.raises(ParameterError):
        look_at([0, 0, 100.0], [0, 0, 0])


def test_samples_lie_on_mesh(small_sphere_scene):
    _, mesh, _, cloud = small_sphere_scene
    d, _, _ = closest_points(mesh, cloud.points)
    assert np.all(d < 1e-6)
    assert cloud.has_normals


def test_every_frame_gets_its_points(small_sphere_scene):
    spec, _, traj, cloud = small_sphere_scene
    frames, counts = np.unique(cloud.source_frame, return_counts=True)
    assert len(frames) >= 0.95 * len(traj)
    assert np.mean(counts == spec.points_per_frame) >= 0.95


def test_samples_visible_from_their_frame(small_sphere_scene):
    _, _, traj, cloud = small_sphere_scene
    cam = traj.translations[traj.nearest_index(cloud.source_frame)]
    assert np.all(np.einsum("ij,ij->i", cloud.normals, cam - cloud.points) > 0)


def test_sampling_is_deterministic(small_sphere_scene):
    spec, mesh, traj, cloud = small_sphere_scene
    again = sample_visible_points(mesh, traj, spec.intrinsics, spec.points_per_frame, spec.seed)
    assert np.array_equal(again.points, cloud.points)
    other = sample_visible_points(mesh, traj, spec.intrinsics, spec.points_per_frame, spec.seed + 1)
    assert not np.array_equal(other.points, cloud.points)


def test_frame_stream_independent_of_other_frames(small_sphere_scene):
    spec, mesh, traj, cloud = small_sphere_scene
    part = sample_visible_points(mesh, traj.subset(np.array([5, 6])), spec.intrinsics, spec.points_per_frame, spec.seed)
    np.testing.assert_array_equal(part.points, cloud.points[np.isin(cloud.source_frame, [5, 6])])


def test_skip_frames(small_sphere_scene):
    spec, mesh, traj, _ = small_sphere_scene
    cloud = sample_visible_points(mesh, traj, spec.intrinsics, 5, spec.seed, skip_frames=30)
    assert cloud.source_frame.min() >= 30


def test_looking_away_sees_nothing():
    spec = sphere_preset()
    mesh = make_primitive(spec)
    c = np.array([200.0, 0, 0])
    traj = Trajectory([0], [matrix_to_quat(look_at(c, [400.0, 0, 0]))], [c])
    with pytest.raises(PreconditionError):
        sample_visible_points(mesh, traj, spec.intrinsics, 10, 0)


def test_zero_corruption_is_identity(small_sphere_scene):
    _, _, traj, cloud = small_sphere_scene
    out, t = corrupt_with_transform(cloud, traj, CorruptionSpec())
    assert np.array_equal(out.points, cloud.points)
    assert t.scale == 1.0


def test_global_scale_halves_distances(small_sphere_scene):
    _, _, traj, cloud = small_sphere_scene
    out = corrupt(cloud, traj, CorruptionSpec(global_scale=0.5))
    d0 = np.linalg.norm(cloud.points[1:] - cloud.points[:-1], axis=1)
    d1 = np.linalg.norm(out.points[1:] - out.points[:-1], axis=1)
    np.testing.assert_allclose(d1, 0.5 * d0, rtol=1e-12)


def test_ray_noise_statistics(small_sphere_scene):
    _, _, traj, cloud = small_sphere_scene
    out = corrupt(cloud, traj, CorruptionSpec(sigma_ray=2.0, seed=3))
    cam = traj.translations[traj.nearest_index(cloud.source_frame)]
    ray = cloud.points - cam
    ray /= np.linalg.norm(ray, axis=1, keepdims=True)
    delta = out.points - cloud.points
    along = np.einsum("ij,ij->i", delta, ray)
    assert 1.9 <= along.std() <= 2.1
    np.testing.assert_allclose(np.linalg.norm(delta - along[:, None] * ray, axis=1), 0, atol=1e-9)


def test_outliers_preserve_count_and_provenance(small_sphere_scene):
    _, _, traj, cloud = small_sphere_scene
    out = corrupt(cloud, traj, CorruptionSpec(outlier_fraction=0.05, seed=9))
    assert len(out) == len(cloud)
    assert np.array_equal(out.source_frame, cloud.source_frame)
    moved = np.any(out.points != cloud.points, axis=1)
    assert moved.sum() == round(0.05 * len(cloud))
    lo, hi = cloud.bounds()
    mid, half = (lo + hi) / 2, 0.75 * (hi - lo)
    assert np.all(np.abs(out.points[moved] - mid) <= half + 1e-9)


@settings(max_examples=20, deadline=None)
@given(scale=st.floats(0.05, 20.0), seed=st.integers(0, 1000))
def test_scene_transform_maps_truth_to_estimate(scale, seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(30, 3)) * 40
    cloud = PointCloud(pts, None, np.zeros(30, dtype=np.int64))
    traj = Trajectory([0], [[0, 0, 0, 1.0]], [[0, 0, 300.0]])
    out, t = corrupt_with_transform(cloud, traj, CorruptionSpec(global_scale=scale, seed=seed))
    np.testing.assert_allclose(out.points, t.apply_points(pts), atol=1e-9)


def test_noisy_trajectory_sigma():
    traj = orbit_trajectory(liver_preset())
    noisy = noisy_trajectory(traj, 1.0, 0)
    d = noisy.translations - traj.translations
    assert np.sqrt(np.mean(np.sum(d * d, axis=1))) == pytest.approx(1.0, rel=0.1)
    assert noisy_trajectory(traj, 0.0, 0) is traj


def test_build_scene_noiseless_estimate_is_similarity():
    spec = sphere_preset(orbit=OrbitSpec(radius=200.0, elevation_min=-60, elevation_max=60, n_frames=12))
    scene = build_scene(spec, CorruptionSpec(global_scale=0.37))
    np.testing.assert_allclose(scene.estimated_trajectory.translations,
                               scene.transform.apply_points(scene.trajectory.translations), atol=1e-12)
    np.testing.assert_allclose(scene.cloud.points, scene.transform.apply_points(scene.clean.points), atol=1e-12)
