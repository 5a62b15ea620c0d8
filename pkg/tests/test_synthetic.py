import json
import os

import numpy as np
import pytest

from m3dm_lite import synthetic, geometry
from m3dm_lite.errors import BadParam, DataError
from conftest import tree_bytes


def test_spec_validation():
    with pytest.raises(BadParam):
        synthetic.SyntheticDatasetSpec(n_train=-1)
    with pytest.raises(BadParam):
        synthetic.SyntheticDatasetSpec(image_size=16)
    with pytest.raises(BadParam):
        synthetic.SyntheticDatasetSpec(anomaly_kinds=('scratch', ))


def test_no_anomalies_gives_nominal_test_set():
    spec = synthetic.SyntheticDatasetSpec(n_train=2, n_test_good=3, n_test_anomalous=0, image_size=32)
    test = [s for s in synthetic.generate_synthetic(spec) if s.split == 'test']
    assert len(test) == 3
    assert all(s.label == 0 and not np.any(s.mask) for s in test)


def test_anomalies_are_modality_isolated():
    spec = synthetic.SyntheticDatasetSpec(n_train=0, n_test_good=3, n_test_anomalous=6, image_size=48, seed=5)
    samples = synthetic.generate_synthetic(spec)
    good = {s.scene_id: s for s in samples if s.label == 0}
    anomalous = [s for s in samples if s.label == 1]
    assert sorted({s.kind for s in anomalous}) == list(synthetic.ANOMALY_KINDS)

    for sample in anomalous:
        twin = good[sample.twin]
        assert np.any(sample.mask)
        rgb_diff = np.any(sample.scene.rgb != twin.scene.rgb, axis=-1)
        coords_diff = np.any(sample.scene.coords != twin.scene.coords, axis=-1)
        if sample.kind == 'geometry':
            assert not np.any(rgb_diff)
            assert np.any(coords_diff) and not np.any(coords_diff & ~sample.mask)
        elif sample.kind == 'color':
            assert not np.any(coords_diff)
            assert np.any(rgb_diff) and not np.any(rgb_diff & ~sample.mask)
        else:
            assert np.any(rgb_diff) and np.any(coords_diff)


def test_geometry_anomaly_survives_plane_removal():
    spec = synthetic.SyntheticDatasetSpec(n_train=0, n_test_good=1, n_test_anomalous=3, image_size=64,
                                          anomaly_kinds=('geometry', ), seed=2)
    for sample in synthetic.generate_synthetic(spec):
        processed = geometry.preprocess_scene(sample.scene, iters=200, target_size=64)
        assert np.all(processed.valid[sample.mask])


def test_dataset_is_bit_identical(tmp_path):
    spec = synthetic.SyntheticDatasetSpec(n_train=2, n_test_good=2, n_test_anomalous=2, image_size=32, seed=9)
    synthetic.write_dataset(synthetic.generate_synthetic(spec), str(tmp_path / 'a'), spec=spec)
    synthetic.write_dataset(synthetic.generate_synthetic(spec), str(tmp_path / 'b'), spec=spec)
    assert tree_bytes(str(tmp_path / 'a')) == tree_bytes(str(tmp_path / 'b'))


def test_dataset_layout(small_dataset):
    manifest = synthetic.read_manifest(small_dataset)
    assert [e['id'] for e in manifest['train']] == ['0000', '0001', '0002', '0003']
    assert [e['label'] for e in manifest['test']] == [0, 0, 0, 1, 1, 1]
    assert os.path.isfile(os.path.join(small_dataset, 'test', '0004_mask.t'))
    assert not os.path.exists(os.path.join(small_dataset, 'train', '0000_mask.t'))

    scene = synthetic.load_scene(small_dataset, 'test', '0004')
    assert scene.shape == (64, 64) and np.all(scene.valid)
    assert synthetic.load_mask(small_dataset, '0004').any()
    assert not synthetic.load_mask(small_dataset, '0000').any()

    with open(os.path.join(small_dataset, 'manifest.json')) as f:
        assert json.load(f)['spec']['seed'] == 7


def test_missing_manifest(tmp_path):
    with pytest.raises(DataError):
        synthetic.read_manifest(str(tmp_path))
