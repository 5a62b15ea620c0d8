"""
Synthetic multimodal dataset mirroring the structure of an industrial RGB + 3D anomaly benchmark: one object category,
nominal training scenes and a test split with geometry, colour and joint defects.

Every anomalous test scene is rendered from the parameters of a nominal twin, geometry defects leave the colours
untouched and colour defects leave the coordinates untouched.
"""
import json
import os
from dataclasses import dataclass, field

import numpy as np

from m3dm_lite.errors import BadParam, DataError
from m3dm_lite.geometry import OrganizedScene
from m3dm_lite.utils.tensor_file import save_array, load_array

ANOMALY_KINDS = ('color', 'geometry', 'joint')

SCENE_SPAN = 0.1  # physical width of the image [m]
BASE_DEPTH = 0.5  # distance of the background plane from the camera [m]
OBJECT_RADIUS = 0.35  # object footprint radius as a fraction of the image width
OBJECT_HEIGHT = 0.025  # object lift above the background plane [m]
HEIGHT_TERMS = 3
HEIGHT_AMPLITUDE = 0.002  # amplitude of each cosine term of the height map [m]
BASE_COLOR = (0.55, 0.45, 0.35)
COLOR_JITTER = 0.05
COLOR_FIELD_AMPLITUDE = 0.04
BACKGROUND_COLOR = 0.15
COLOR_NOISE = 0.01
DEPTH_NOISE = 0.0002
ANOMALY_RADIUS = (0.05, 0.15)  # fraction of the image width
ANOMALY_AMPLITUDE = (0.004, 0.008)  # [m], dents stay clear of the plane removal threshold
ANOMALY_COLOR_SHIFT = 0.35


@dataclass
class SyntheticDatasetSpec:
    n_train: int = 30
    n_test_good: int = 30
    n_test_anomalous: int = 30
    image_size: int = 64
    anomaly_kinds: tuple = ANOMALY_KINDS
    seed: int = 0

    def __post_init__(self):
        self.anomaly_kinds = tuple(sorted(set(self.anomaly_kinds)))
        if min(self.n_train, self.n_test_good, self.n_test_anomalous) < 0:
            raise BadParam('Sample counts cannot be negative.')
        if self.image_size < 32:
            raise BadParam(f'Image size has to be at least 32, got {self.image_size}.')
        unknown = [k for k in self.anomaly_kinds if k not in ANOMALY_KINDS]
        if len(unknown) > 0:
            raise BadParam(f'Unknown anomaly kinds {unknown}, use a subset of {ANOMALY_KINDS}.')
        if self.n_test_anomalous > 0 and len(self.anomaly_kinds) == 0:
            raise BadParam('Anomalous samples requested without any anomaly kind.')


@dataclass
class SyntheticSample:
    scene_id: str
    split: str
    scene: OrganizedScene
    mask: np.ndarray
    label: int
    kind: str = 'good'
    twin: str = None
    params: dict = field(default=None, repr=False)


def draw_nominal_params(rng):
    """
    Random parameters of a defect-free scene.

    :param rng: numpy.random.Generator;
    :return: dict
    """
    return {
        'tilt': rng.uniform(-0.05, 0.05, size=2),
        'height_freq': rng.uniform(0.5, 1.5, size=(HEIGHT_TERMS, 2)) * rng.choice([-1, 1], size=(HEIGHT_TERMS, 2)),
        'height_phase': rng.uniform(0, 2 * np.pi, size=HEIGHT_TERMS),
        'color': np.asarray(BASE_COLOR) + rng.uniform(-COLOR_JITTER, COLOR_JITTER, size=3),
        'color_freq': rng.uniform(0.5, 1.5, size=(3, 2)),
        'color_phase': rng.uniform(0, 2 * np.pi, size=3),
        'noise_seed': int(rng.integers(0, 2**63 - 1)),
    }


def draw_anomaly_params(rng, kind):
    """
    Random anomaly footprint inside the object.

    :param rng: numpy.random.Generator;
    :param kind: str; `geometry`, `color` or `joint`
    :return: dict
    """
    angle, offset = rng.uniform(0, 2 * np.pi), rng.uniform(0, 0.6 * OBJECT_RADIUS)
    radius = rng.uniform(*ANOMALY_RADIUS)
    direction = rng.normal(size=3)
    return {
        'kind': kind,
        'center': 0.5 + offset * np.array([np.sin(angle), np.cos(angle)]),
        'radius': radius,
        'aspect': rng.uniform(0.6, 1.0),
        'rotation': rng.uniform(0, np.pi),
        'amplitude': rng.uniform(*ANOMALY_AMPLITUDE) * rng.choice([-1, 1]),
        'color_shift': ANOMALY_COLOR_SHIFT * direction / np.linalg.norm(direction),
    }


def anomaly_profile(anomaly, size):
    """
    Compactly supported bell over the anomaly ellipse: 1 at the center, exactly 0 on and outside the ellipse.

    :return: numpy.array; (size, size)
    """
    v, u = (np.mgrid[0:size, 0:size] + 0.5) / size
    dv, du = v - anomaly['center'][0], u - anomaly['center'][1]
    cos, sin = np.cos(anomaly['rotation']), np.sin(anomaly['rotation'])
    a = (cos * du + sin * dv) / anomaly['radius']
    b = (-sin * du + cos * dv) / (anomaly['radius'] * anomaly['aspect'])
    rho2 = a ** 2 + b ** 2
    floor = np.exp(-2.0)
    return np.where(rho2 < 1.0, (np.exp(-2.0 * rho2) - floor) / (1.0 - floor), 0.0)


def render_scene(params, size, anomaly=None):
    """
    Renders organized scene and its ground truth mask.

    :param params: dict; from `draw_nominal_params`
    :param size: int; image side in pixels
    :param anomaly: dict; from `draw_anomaly_params` or None
    :return: Tuple[OrganizedScene, numpy.array]
    """
    noise = np.random.default_rng(params['noise_seed'])
    v, u = (np.mgrid[0:size, 0:size] + 0.5) / size
    x, y = (u - 0.5) * SCENE_SPAN, (v - 0.5) * SCENE_SPAN

    footprint = (u - 0.5) ** 2 + (v - 0.5) ** 2 < OBJECT_RADIUS ** 2
    height = OBJECT_HEIGHT + HEIGHT_AMPLITUDE * sum(
        np.cos(2 * np.pi * (f[0] * u + f[1] * v) + p) for f, p in zip(params['height_freq'], params['height_phase']))
    color = params['color'][None, None, :] + COLOR_FIELD_AMPLITUDE * np.stack(
        [np.cos(2 * np.pi * (f[0] * u + f[1] * v) + p) for f, p in zip(params['color_freq'], params['color_phase'])],
        axis=-1)
    depth_noise = noise.normal(0, DEPTH_NOISE, size=(size, size))
    color_noise = noise.normal(0, COLOR_NOISE, size=(size, size, 3))

    mask = np.zeros((size, size), dtype=bool)
    if anomaly is not None:
        profile = anomaly_profile(anomaly, size)
        mask = profile > 0
        if anomaly['kind'] in ('geometry', 'joint'):
            height = height + anomaly['amplitude'] * profile
        if anomaly['kind'] in ('color', 'joint'):
            alpha = np.clip(1.5 * profile, 0.0, 1.0)[..., None]
            color = color + alpha * anomaly['color_shift']

    plane_z = BASE_DEPTH + params['tilt'][0] * x + params['tilt'][1] * y
    z = plane_z - np.where(footprint, height, 0.0) + depth_noise
    rgb = np.where(footprint[..., None], color, BACKGROUND_COLOR) + color_noise
    coords = np.stack([x, y, z], axis=-1)
    scene = OrganizedScene(coords=coords, rgb=np.clip(rgb, 0.0, 1.0), valid=np.ones((size, size), dtype=bool))
    return scene, mask & footprint


def generate_synthetic(spec):
    """
    Generates the whole dataset from the seeded PRNG of `spec`.

    :param spec: SyntheticDatasetSpec;
    :return: List[SyntheticSample]; train samples followed by good and anomalous test samples
    """
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    samples = []

    for ii in range(spec.n_train):
        params = draw_nominal_params(rng)
        scene, mask = render_scene(params, size)
        samples.append(SyntheticSample(f'{ii:04d}', 'train', scene, mask, 0, params=params))

    good = []
    for ii in range(spec.n_test_good):
        params = draw_nominal_params(rng)
        scene, mask = render_scene(params, size)
        good.append(SyntheticSample(f'{ii:04d}', 'test', scene, mask, 0, params=params))
    samples.extend(good)

    for jj in range(spec.n_test_anomalous):
        kind = spec.anomaly_kinds[jj % len(spec.anomaly_kinds)]
        if len(good) > 0:
            twin = good[jj % len(good)]
            params, twin_id = twin.params, twin.scene_id
        else:
            params, twin_id = draw_nominal_params(rng), None
        anomaly = draw_anomaly_params(rng, kind)
        scene, mask = render_scene(params, size, anomaly=anomaly)
        samples.append(SyntheticSample(f'{spec.n_test_good + jj:04d}', 'test', scene, mask, 1, kind=kind,
                                       twin=twin_id, params=params))

    return samples


def write_dataset(samples, root, spec=None):
    """
    Writes dataset in the directory layout `train/<id>_{coords,rgb}.t`, `test/<id>_{coords,rgb,mask}.t` and
    `manifest.json`.

    :param samples: List[SyntheticSample];
    :param root: str;
    :param spec: SyntheticDatasetSpec; recorded in the manifest if given
    :return: None
    """
    manifest = {'train': [], 'test': []}
    if spec is not None:
        manifest['spec'] = {'n_train': spec.n_train, 'n_test_good': spec.n_test_good,
                            'n_test_anomalous': spec.n_test_anomalous, 'image_size': spec.image_size,
                            'anomaly_kinds': list(spec.anomaly_kinds), 'seed': spec.seed}

    for sample in samples:
        prefix = os.path.join(root, sample.split, sample.scene_id)
        save_array(f'{prefix}_coords.t', sample.scene.coords)
        save_array(f'{prefix}_rgb.t', sample.scene.rgb)
        entry = {'id': sample.scene_id, 'label': int(sample.label)}
        if sample.split == 'test':
            save_array(f'{prefix}_mask.t', sample.mask.astype(np.float32))
            entry.update(kind=sample.kind, twin=sample.twin)
        manifest[sample.split].append(entry)

    with open(os.path.join(root, 'manifest.json'), 'w') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def read_manifest(root):
    path = os.path.join(root, 'manifest.json')
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise DataError(f'Dataset manifest {path} does not exist.')
    except json.JSONDecodeError as e:
        raise DataError(f'Dataset manifest {path} is corrupted: {e}')


def load_scene(root, split, scene_id):
    """
    Loads scene from the dataset directory. Validity is derived from the coordinates (missing points are zero).

    :return: OrganizedScene
    """
    prefix = os.path.join(root, split, scene_id)
    return OrganizedScene.from_grids(load_array(f'{prefix}_coords.t'), load_array(f'{prefix}_rgb.t'))


def load_mask(root, scene_id):
    """Ground truth mask of a test scene; only evaluation reads these."""
    return load_array(os.path.join(root, 'test', f'{scene_id}_mask.t')) > 0.5
