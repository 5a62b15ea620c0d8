import numpy as np
import pytest

from m3dm_lite import features
from m3dm_lite.errors import BadArity, FormatError, SizeMismatch, DataError
from m3dm_lite.geometry import PointGroupSet, PatchGrid
from m3dm_lite.utils import tensor_file


def test_tensor_zeros_roundtrip(tmp_path):
    path = str(tmp_path / 'zeros.t')
    tensor_file.save_tensor(path, (2, 3), np.zeros(6))
    dims, values = tensor_file.load_tensor(path)
    assert dims == (2, 3)
    np.testing.assert_array_equal(values, np.zeros(6, dtype=np.float32))


def test_tensor_payload_is_bit_exact(tmp_path, rng):
    path = str(tmp_path / 'image.t')
    image = rng.random((224, 224, 3)).astype(np.float32)
    tensor_file.save_array(path, image)
    with open(path, 'rb') as f:
        raw = f.read()
    assert raw[:8] == b'M3DMTNSR'
    np.testing.assert_array_equal(np.frombuffer(raw[:32], dtype='<u4', offset=8), [1, 3, 224, 224, 3, 0])
    assert raw[32:] == image.astype('<f4').tobytes()
    assert tensor_file.load_array(path).tobytes() == image.tobytes()


def test_double_tensor_keeps_every_bit(tmp_path, rng):
    path = str(tmp_path / 'weights.t')
    weights = rng.normal(size=(5, 7)) / 3.0
    tensor_file.save_array(path, weights, dtype_tag=tensor_file.FLOAT64)
    with open(path, 'rb') as f:
        raw = f.read()
    np.testing.assert_array_equal(np.frombuffer(raw[:24], dtype='<u4', offset=8), [1, 2, 5, 7])
    assert np.frombuffer(raw, dtype='<u4', count=1, offset=24)[0] == 1
    loaded = tensor_file.load_array(path)
    assert loaded.dtype == np.float64 and loaded.tobytes() == weights.tobytes()

    with pytest.raises(FormatError):
        tensor_file.save_array(path, weights, dtype_tag=7)


def test_tensor_header_errors(tmp_path):
    path = str(tmp_path / 'bad.t')
    tensor_file.save_tensor(path, (4, ), np.arange(4))
    with open(path, 'rb') as f:
        raw = f.read()

    with open(path, 'wb') as f:
        f.write(b'NOTMAGIC' + raw[8:])
    with pytest.raises(FormatError):
        tensor_file.load_tensor(path)

    with open(path, 'wb') as f:
        f.write(raw[:8] + np.array([2], dtype='<u4').tobytes() + raw[12:])
    with pytest.raises(FormatError):
        tensor_file.load_tensor(path)

    with open(path, 'wb') as f:
        f.write(raw[:-4])
    with pytest.raises(SizeMismatch):
        tensor_file.load_tensor(path)

    with pytest.raises(DataError):
        tensor_file.load_tensor(str(tmp_path / 'missing.t'))
    with pytest.raises(SizeMismatch):
        tensor_file.save_tensor(path, (2, 2), np.zeros(3))
    with pytest.raises(BadArity):
        tensor_file.save_tensor(path, (), np.zeros(1))


def test_rgb_extractor_constant_image():
    grid = features.toy_rgb_extractor(np.full((32, 32, 3), 0.4), 4, 4, d_out=8, seed=1)
    assert grid.data.shape == (4, 4, 8)
    assert np.all(grid.occupancy)
    np.testing.assert_array_equal(grid.data, np.broadcast_to(grid.data[0, 0], grid.data.shape))
    assert np.all(np.abs(grid.data) <= 1.0)


def test_rgb_extractor_is_local(rng):
    image = rng.random((32, 32, 3))
    changed = image.copy()
    changed[8:16, 16:24] = rng.random((8, 8, 3))
    first = features.toy_rgb_extractor(image, 4, 4, d_out=8)
    second = features.toy_rgb_extractor(changed, 4, 4, d_out=8)
    differs = np.any(first.data != second.data, axis=-1)
    expected = np.zeros((4, 4), dtype=bool)
    expected[1, 2] = True
    np.testing.assert_array_equal(differs, expected)


def test_rgb_extractor_deterministic_and_seeded(rng):
    image = rng.random((64, 64, 3))
    first = features.toy_rgb_extractor(image, 8, 8, d_out=16, seed=3)
    second = features.toy_rgb_extractor(image, 8, 8, d_out=16, seed=3)
    other = features.toy_rgb_extractor(image, 8, 8, d_out=16, seed=4)
    assert first.data.tobytes() == second.data.tobytes()
    assert first.data.tobytes() != other.data.tobytes()
    with pytest.raises(BadArity):
        features.toy_rgb_extractor(image, 5, 8)


def _group(points):
    n = points.shape[0]
    return PointGroupSet(centers=points[:1], center_indices=np.array([0]), groups=np.arange(n)[None, :])


def test_point_extractor_translation_invariant(rng):
    points = rng.normal(scale=0.01, size=(32, 3))
    shifted = points + np.array([1.0, 2.0, 3.0])
    first = features.toy_point_extractor(_group(points), points, d_out=8)
    second = features.toy_point_extractor(_group(shifted), shifted, d_out=8)
    np.testing.assert_allclose(first, second, atol=1e-6)


def test_point_descriptor_of_coincident_points():
    points = np.tile([0.1, 0.2, 0.3], (16, 1))
    descriptor = features.point_group_descriptor(_group(points), points)
    np.testing.assert_allclose(descriptor[0, :9], 0.0, atol=1e-12)


def test_point_descriptor_disk_versus_shell(rng):
    n = 4000
    direction = rng.normal(size=(n, 3))
    shell = direction / np.linalg.norm(direction, axis=1, keepdims=True)
    angle, radius = rng.uniform(0, 2 * np.pi, n), np.sqrt(rng.uniform(0, 1, n))
    disk = np.stack([radius * np.cos(angle), radius * np.sin(angle), np.zeros(n)], axis=1)

    shell_eig = features.point_group_descriptor(_group(shell), shell, length_scale=1.0)[0, 6:9]
    disk_eig = features.point_group_descriptor(_group(disk), disk, length_scale=1.0)[0, 6:9]
    # uniform shell: 1/3 per axis, uniform disk: 1/4, 1/4, 0
    np.testing.assert_allclose(shell_eig, [1 / 3] * 3, rtol=0.1)
    np.testing.assert_allclose(disk_eig[:2], [0.25, 0.25], rtol=0.1)
    assert disk_eig[2] < 1e-12


def test_grid_roundtrip(tmp_path, rng):
    occupancy = rng.random((4, 4)) < 0.5
    grid = PatchGrid(data=np.where(occupancy[..., None], rng.normal(size=(4, 4, 3)), 0.0), occupancy=occupancy)
    path = str(tmp_path / 'grid' / 'scene_rgb.t')
    features.save_grid(path, grid)
    loaded = features.load_grid(path)
    np.testing.assert_array_equal(loaded.occupancy, occupancy)
    np.testing.assert_array_equal(loaded.data, grid.data.astype(np.float32))
