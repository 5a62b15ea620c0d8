import os

import numpy as np
import pytest

from m3dm_lite import config, synthetic
from m3dm_lite.geometry import PatchGrid

DESK = dict(
    image_size=64, grid=(16, 16), groups=(128, 32), ransac_iters=100, d_rgb=32, d_pt=16,
    uff_embed=16, uff_steps=40, uff_warmup=10, uff_batch=64, uff_lr=1e-3,
    coreset_ratio=0.25, dlf_epochs=100, dlf_lr=1e-3, dlf_nu=0.5, blur_sigma=2.0,
)


@pytest.fixture(autouse=True)
def single_process(monkeypatch):
    monkeypatch.setattr(config, 'NUMBER_OF_PROCESSES', 1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


@pytest.fixture
def desk_config(tmp_path):
    def factory(**kwargs):
        values = dict(DESK, dataset_dir=str(tmp_path / 'dataset'), work_dir=str(tmp_path / 'work'))
        values.update(kwargs)
        return config.PipelineConfig(**values)
    return factory


@pytest.fixture
def small_dataset(tmp_path):
    """Tiny synthetic dataset written to disk, returns its root."""
    spec = synthetic.SyntheticDatasetSpec(n_train=4, n_test_good=3, n_test_anomalous=3, image_size=64, seed=7)
    root = str(tmp_path / 'dataset')
    synthetic.write_dataset(synthetic.generate_synthetic(spec), root, spec=spec)
    return root


def random_grid(rng, shape=(4, 5), dim=3, fill=0.7):
    occupancy = rng.random(shape) < fill
    occupancy.flat[0] = True
    data = np.where(occupancy[..., None], rng.normal(size=shape + (dim, )), 0.0)
    return PatchGrid(data=data, occupancy=occupancy)


def files_equal(first, second):
    with open(first, 'rb') as f1, open(second, 'rb') as f2:
        return f1.read() == f2.read()


def tree_bytes(root):
    """Relative path -> file content of every file below root."""
    result = {}
    for dirpath, _, filenames in os.walk(root):
        for name in filenames:
            path = os.path.join(dirpath, name)
            with open(path, 'rb') as f:
                result[os.path.relpath(path, root)] = f.read()
    return result
