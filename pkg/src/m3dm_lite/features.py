"""
Feature provisioning: deterministic toy extractors standing in for pretrained image and point backbones, and patch
grid persistence on top of the TensorFile format.
"""
import numpy as np

from m3dm_lite import config
from m3dm_lite.errors import BadArity
from m3dm_lite.geometry import PatchGrid
from m3dm_lite.utils.tensor_file import save_array, load_array

HISTOGRAM_EDGES = (1.0 / 3.0, 2.0 / 3.0)
RGB_DESCRIPTOR_DIM = 9
POINT_DESCRIPTOR_DIM = 11


def random_map(n_in, d_out, seed, gain=1.0):
    """
    Fixed random linear map shared by every call with the same seed.

    :return: Tuple[numpy.array, numpy.array]; (n_in, d_out) weights and (d_out, ) bias
    """
    rng = np.random.default_rng(seed)
    weights = rng.normal(0.0, gain / np.sqrt(n_in), size=(n_in, d_out))
    bias = rng.normal(0.0, 0.1, size=d_out)
    return weights, bias


def rgb_patch_descriptor(rgb, gh, gw):
    """
    Per-patch colour statistics: channel means (3), channel variances (3) and the fraction of pixels in each of three
    intensity levels (3).

    :param rgb: numpy.array; (H, W, 3)
    :param gh: int;
    :param gw: int;
    :return: numpy.array; (gh, gw, 9)
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise BadArity(f'RGB image has to be (H, W, 3), got {rgb.shape}.')
    h, w, _ = rgb.shape
    if gh <= 0 or gw <= 0 or h % gh or w % gw:
        raise BadArity(f'Image {h}x{w} is not divisible into {gh}x{gw} patches.')

    windows = rgb.reshape(gh, h // gh, gw, w // gw, 3).transpose(0, 2, 1, 3, 4).reshape(gh, gw, -1, 3)
    mean = windows.mean(axis=2)
    variance = windows.var(axis=2)
    level = np.digitize(windows.mean(axis=3), HISTOGRAM_EDGES)
    histogram = np.stack([(level == ii).mean(axis=2) for ii in range(3)], axis=-1)
    return np.concatenate([mean, variance, histogram], axis=-1)


def toy_rgb_extractor(rgb, gh, gw, d_out=None, seed=0):
    """
    Deterministic image patch features: colour statistics of every window mapped to `d_out` dims by a seeded random
    linear map and squashed by tanh. Every patch depends on its own window only.

    :param rgb: numpy.array; (H, W, 3)
    :param gh: int;
    :param gw: int;
    :param d_out: int; `config.D_RGB` by default
    :param seed: int;
    :return: PatchGrid; fully occupied (gh, gw, d_out) grid
    """
    d_out = config.D_RGB if d_out is None else d_out
    descriptor = rgb_patch_descriptor(rgb, gh, gw)
    # centering keeps tanh away from saturation for mid-grey inputs
    descriptor[..., :3] -= 0.5
    weights, bias = random_map(RGB_DESCRIPTOR_DIM, d_out, seed, gain=2.0)
    return PatchGrid(data=np.tanh(descriptor @ weights + bias), occupancy=np.ones((gh, gw), dtype=bool))


def point_group_descriptor(group_set, points, length_scale=None):
    """
    Rigid-translation invariant shape statistics of every group: centroid-relative second moments
    (xx, yy, zz, xy, xz, yz), covariance eigenvalues in descending order, mean radius and the height span divided by
    the group size.

    :param group_set: geometry.PointGroupSet;
    :param points: numpy.array; (N, 3)
    :param length_scale: float; coordinates are expressed in this unit, `config.POINT_LENGTH_SCALE` by default
    :return: numpy.array; (M, 11)
    """
    length_scale = config.POINT_LENGTH_SCALE if length_scale is None else length_scale
    points = np.asarray(points, dtype=np.float64)
    groups = np.asarray(group_set.groups)
    if groups.ndim != 2 or groups.size == 0 or groups.max() >= points.shape[0] or groups.min() < 0:
        raise BadArity(f'Groups {groups.shape} do not index {points.shape[0]} points.')

    members = points[groups] / length_scale
    centered = members - members.mean(axis=1, keepdims=True)
    covariance = np.einsum('msi,msj->mij', centered, centered) / groups.shape[1]
    moments = covariance[:, [0, 1, 2, 0, 0, 1], [0, 1, 2, 1, 2, 2]]
    eigenvalues = np.clip(np.linalg.eigvalsh(covariance)[:, ::-1], 0.0, None)
    radius = np.linalg.norm(centered, axis=2).mean(axis=1)
    span = np.ptp(members[..., 2], axis=1) / groups.shape[1]
    return np.concatenate([moments, eigenvalues, radius[:, None], span[:, None]], axis=1)


def toy_point_extractor(group_set, points, d_out=None, seed=0, length_scale=None):
    """
    Deterministic point group features, the group shape descriptor mapped linearly to `d_out` dims.

    :return: numpy.array; (M, d_out)
    """
    d_out = config.D_PT if d_out is None else d_out
    weights, _ = random_map(POINT_DESCRIPTOR_DIM, d_out, seed)
    return point_group_descriptor(group_set, points, length_scale=length_scale) @ weights


def save_grid(path, grid):
    """
    Stores patch grid as two tensors, `path` with the features and `path` + `.occ` with the occupancy.

    :param path: str;
    :param grid: PatchGrid;
    :return: None
    """
    save_array(path, grid.data)
    save_array(path + '.occ', grid.occupancy.astype(np.float32))


def load_grid(path):
    return PatchGrid(data=load_array(path), occupancy=load_array(path + '.occ') > 0.5)
