import numpy as np
import pytest

from m3dm_lite import geometry
from m3dm_lite.errors import BadArity, DegenerateScene
from m3dm_lite.geometry import OrganizedScene, PatchGrid


def plane_scene(size=32, depth=0.5, lifted=None):
    v, u = np.mgrid[0:size, 0:size]
    x, y = (u + 1.0) * 0.001, (v + 1.0) * 0.001
    z = np.full((size, size), depth)
    if lifted is not None:
        z[lifted] = depth - 0.1
    coords = np.stack([x, y, z], axis=-1)
    return OrganizedScene.from_grids(coords, np.full((size, size, 3), 0.5))


def test_preprocess_removes_whole_plane():
    scene = plane_scene()
    result = geometry.preprocess_scene(scene, dist_thresh=0.005, iters=50, target_size=32)
    assert not np.any(result.valid)
    assert np.all(result.coords == 0) and np.all(result.rgb == 0)


def test_preprocess_keeps_exactly_the_cube():
    cube = (slice(10, 20), slice(8, 18))
    scene = plane_scene(lifted=cube)
    result = geometry.preprocess_scene(scene, dist_thresh=0.005, iters=100, target_size=32, seed=3)

    expected = np.zeros((32, 32), dtype=bool)
    expected[cube] = True
    np.testing.assert_array_equal(result.valid, expected)
    assert np.all(result.rgb[~expected] == 0)


def test_preprocess_is_deterministic_and_idempotent():
    scene = plane_scene(lifted=(slice(5, 15), slice(5, 25)))
    first = geometry.preprocess_scene(scene, dist_thresh=0.005, iters=100, target_size=32, seed=11)
    second = geometry.preprocess_scene(scene, dist_thresh=0.005, iters=100, target_size=32, seed=11)
    np.testing.assert_array_equal(first.coords, second.coords)

    points, _ = scene.points()
    plane = geometry.fit_background_plane(points, 0.005, 100, seed=11)
    again = geometry.preprocess_scene(first, dist_thresh=0.005, target_size=32, plane=plane)
    np.testing.assert_array_equal(again.valid, first.valid)


def test_preprocess_needs_three_points():
    coords = np.zeros((8, 8, 3))
    coords[0, 0] = (0.1, 0.1, 0.5)
    coords[0, 1] = (0.2, 0.1, 0.5)
    with pytest.raises(DegenerateScene):
        geometry.preprocess_scene(OrganizedScene.from_grids(coords, np.zeros((8, 8, 3))), target_size=8)


def test_resize_erodes_validity():
    scene = plane_scene(size=8)
    valid = scene.valid.copy()
    valid[0, 0] = False
    scene = OrganizedScene(coords=np.where(valid[..., None], scene.coords, 0.0), rgb=scene.rgb, valid=valid)

    resized = geometry.resize_scene(scene, 16)
    assert resized.shape == (16, 16)
    assert not resized.valid[0, 0] and not resized.valid[1, 1]
    assert resized.valid[15, 15] and resized.valid[4, 4]
    assert np.all(resized.coords[~resized.valid] == 0)


def test_fps_exhaustion_is_permutation():
    points = np.random.default_rng(0).random((12, 3))
    selected = geometry.farthest_point_sampling(points, 12, seed_index=4)
    assert selected[0] == 4
    assert sorted(selected.tolist()) == list(range(12))


def test_fps_square_picks_diagonal():
    square = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    np.testing.assert_array_equal(geometry.farthest_point_sampling(square, 2, seed_index=0), [0, 3])


def test_fps_matches_greedy_rule(rng):
    for _ in range(10):
        points = rng.random((30, 3))
        selected = geometry.farthest_point_sampling(points, 5, seed_index=0)

        oracle = [0]
        while len(oracle) < 5:
            best, best_dist = None, -1.0
            for ii in range(30):
                if ii in oracle:
                    continue
                dist = min(np.sum((points[ii] - points[jj]) ** 2) for jj in oracle)
                if dist > best_dist:
                    best, best_dist = ii, dist
            oracle.append(best)
        assert selected.tolist() == oracle


def test_fps_bad_arity():
    with pytest.raises(BadArity):
        geometry.farthest_point_sampling(np.zeros((3, 3)), 4)
    with pytest.raises(BadArity):
        geometry.farthest_point_sampling(np.zeros((0, 3)), 1)


def test_knn_group_limits(rng):
    points = rng.random((9, 3))
    single = geometry.knn_group(points, [2, 5], 1)
    np.testing.assert_array_equal(single.groups, [[2], [5]])

    full = geometry.knn_group(points, [2, 5], 9)
    assert all(sorted(row) == list(range(9)) for row in full.groups.tolist())
    assert full.groups[0, 0] == 2 and full.groups[1, 0] == 5


def test_knn_group_collinear_ends():
    line = np.stack([np.arange(10.0), np.zeros(10), np.zeros(10)], axis=1)
    group_set = geometry.knn_group(line, [0, 9], 3)
    np.testing.assert_array_equal(group_set.groups, [[0, 1, 2], [9, 8, 7]])
    np.testing.assert_array_equal(group_set.centers, line[[0, 9]])
    with pytest.raises(BadArity):
        geometry.knn_group(line, [0], 11)


def test_sample_groups_clamps():
    points = np.random.default_rng(1).random((20, 3))
    group_set = geometry.sample_groups(points, 50, 40)
    assert group_set.groups.shape == (20, 20)


def test_interpolation_single_center(rng):
    feature = rng.normal(size=(1, 4))
    result = geometry.interpolate_to_points(feature, rng.random((1, 3)), rng.random((7, 3)))
    np.testing.assert_array_equal(result, np.repeat(feature, 7, axis=0))


def test_interpolation_equidistant_point():
    u, v = np.array([1.0, 2.0]), np.array([3.0, -2.0])
    centers = np.array([[-1.0, 0, 0], [1.0, 0, 0]])
    result = geometry.interpolate_to_points(np.stack([u, v]), centers, np.array([[0.0, 0.5, 0.0]]))
    np.testing.assert_allclose(result[0], (u + v) / 2, rtol=1e-12)


def test_interpolation_weights_sum_to_one(rng):
    for _ in range(100):
        m, n = rng.integers(1, 6), rng.integers(1, 10)
        result = geometry.interpolate_to_points(np.ones((m, 1)), rng.random((m, 3)), rng.random((n, 3)))
        assert np.max(np.abs(result - 1.0)) < 1e-6


def test_interpolation_matches_loop_oracle(rng):
    features, centers, points = rng.normal(size=(2, 3)), rng.random((2, 3)), rng.random((5, 3))
    result = geometry.interpolate_to_points(features, centers, points, eps=1e-8)
    for jj in range(5):
        weights = [1.0 / (np.sqrt(np.sum((centers[ii] - points[jj]) ** 2)) + 1e-8) for ii in range(2)]
        expected = sum(w * f for w, f in zip(weights, features)) / sum(weights)
        np.testing.assert_allclose(result[jj], expected, rtol=1e-6)


def test_interpolation_reproduces_centers(rng):
    features, centers = rng.normal(size=(6, 3)), rng.random((6, 3))
    result = geometry.interpolate_to_points(features, centers, centers, eps=1e-12)
    np.testing.assert_allclose(result, features, rtol=1e-4, atol=1e-8)


def test_interpolation_bad_arity(rng):
    with pytest.raises(BadArity):
        geometry.interpolate_to_points(rng.normal(size=(3, 2)), rng.random((2, 3)), rng.random((4, 3)))


def test_projection_cases():
    empty = geometry.project_to_plane(np.zeros((0, 2)), np.zeros(0, dtype=int), 4, 5)
    assert not np.any(empty.occupancy) and np.all(empty.data == 0)

    u = np.array([[1.0, -2.0]])
    single = geometry.project_to_plane(u, [3 * 5 + 4], 4, 5)
    assert single.occupancy.sum() == 1 and single.occupancy[3, 4]
    np.testing.assert_array_equal(single.data[3, 4], u[0])
    assert np.count_nonzero(single.data) == 2

    pair = geometry.project_to_plane(np.array([[1.0, 0.0], [3.0, 2.0]]), [6, 6], 4, 5)
    np.testing.assert_array_equal(pair.data[1, 1], [2.0, 1.0])

    with pytest.raises(BadArity):
        geometry.project_to_plane(u, [20], 4, 5)


def test_average_pool_cases(rng):
    grid = PatchGrid(data=rng.normal(size=(4, 6, 3)), occupancy=np.ones((4, 6), dtype=bool))
    identity = geometry.average_pool(grid, 4, 6)
    np.testing.assert_array_equal(identity.data, grid.data)

    constant = PatchGrid(data=np.tile([1.0, 2.0], (4, 4, 1)), occupancy=np.ones((4, 4), dtype=bool))
    pooled = geometry.average_pool(constant, 2, 2)
    np.testing.assert_allclose(pooled.data, np.tile([1.0, 2.0], (2, 2, 1)))

    sparse = np.zeros((4, 4, 2))
    sparse[3, 0] = (5.0, -1.0)
    occupancy = np.zeros((4, 4), dtype=bool)
    occupancy[3, 0] = True
    pooled = geometry.average_pool(PatchGrid(data=sparse, occupancy=occupancy), 2, 2)
    np.testing.assert_array_equal(pooled.occupancy, [[False, False], [True, False]])
    np.testing.assert_array_equal(pooled.data[1, 0], [5.0, -1.0])
    assert np.all(pooled.data[0] == 0) and np.all(pooled.data[1, 1] == 0)

    with pytest.raises(BadArity):
        geometry.average_pool(grid, 3, 4)


def test_average_pool_preserves_window_means(rng):
    occupancy = rng.random((8, 8)) < 0.6
    data = np.where(occupancy[..., None], rng.normal(size=(8, 8, 2)), 0.0)
    pooled = geometry.average_pool(PatchGrid(data=data, occupancy=occupancy), 4, 4)
    for gi in range(4):
        for gj in range(4):
            window = (slice(2 * gi, 2 * gi + 2), slice(2 * gj, 2 * gj + 2))
            if occupancy[window].any():
                np.testing.assert_allclose(pooled.data[gi, gj], data[window][occupancy[window]].mean(axis=0),
                                           atol=1e-6)


def test_align_point_features_shapes(rng):
    scene = plane_scene(size=16, lifted=(slice(4, 12), slice(4, 12)))
    processed = geometry.preprocess_scene(scene, iters=50, target_size=16)
    points, pixel_of_point = processed.points()
    group_set = geometry.sample_groups(points, 8, 4)
    group_set.group_features = rng.normal(size=(8, 5))

    grid = geometry.align_point_features(group_set, points, pixel_of_point, processed.shape, (4, 4))
    assert grid.data.shape == (4, 4, 5)
    np.testing.assert_array_equal(grid.occupancy, geometry.pool_validity(processed.valid, (4, 4)))
