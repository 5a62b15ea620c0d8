"""
Scene preprocessing and point feature alignment.

An organized scene stores camera-frame coordinates and colours on the same H x W pixel grid. Point features computed
on groups of points are interpolated back to every point, projected to the pixel of that point and average pooled to
the patch grid shared with the image features.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
from loguru import logger
from scipy.ndimage import map_coordinates
from scipy.spatial.distance import cdist

from m3dm_lite import config
from m3dm_lite.errors import BadArity, BadParam, DegenerateScene

_CHUNK = 4096  # rows of distance matrices evaluated at once


@dataclass
class OrganizedScene:
    """
    Pixel-registered colored point cloud.

    :param coords: numpy.array; (H, W, 3) camera-frame coordinates in meters, (0, 0, 0) where no point exists
    :param rgb: numpy.array; (H, W, 3) intensities in [0, 1]
    :param valid: numpy.array; (H, W) bool
    """
    coords: np.ndarray
    rgb: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        h, w = self.valid.shape
        if self.coords.shape != (h, w, 3) or self.rgb.shape != (h, w, 3):
            raise BadArity(f'Scene grids disagree: coords {self.coords.shape}, rgb {self.rgb.shape}, '
                           f'valid {self.valid.shape}.')

    @classmethod
    def from_grids(cls, coords, rgb):
        """Scene whose validity is read from the coordinates, a point is missing where all three are zero."""
        coords = np.asarray(coords, dtype=np.float64)
        return cls(coords=coords, rgb=rgb, valid=np.any(coords != 0, axis=-1))

    @property
    def shape(self):
        return self.valid.shape

    def points(self):
        """
        Unorganized view of the valid points.

        :return: Tuple[numpy.array, numpy.array]; (N, 3) coordinates and (N, ) flat pixel indices (raster order)
        """
        pixel_of_point = np.flatnonzero(self.valid)
        return self.coords.reshape(-1, 3)[pixel_of_point], pixel_of_point


@dataclass
class PointGroupSet:
    """
    :param centers: numpy.array; (M, 3)
    :param center_indices: numpy.array; (M, ) indices into the valid point list
    :param groups: numpy.array; (M, S) point indices, each row starts with its center
    :param group_features: numpy.array; optional (M, D_pt)
    """
    centers: np.ndarray
    center_indices: np.ndarray
    groups: np.ndarray
    group_features: Optional[np.ndarray] = None


@dataclass
class PatchGrid:
    """
    :param data: numpy.array; (Gh, Gw, D) features, zero where not occupied
    :param occupancy: numpy.array; (Gh, Gw) bool
    """
    data: np.ndarray
    occupancy: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.occupancy = np.asarray(self.occupancy, dtype=bool)
        if self.data.ndim != 3 or self.data.shape[:2] != self.occupancy.shape:
            raise BadArity(f'Patch grid data {self.data.shape} does not match occupancy {self.occupancy.shape}.')
        if min(self.data.shape) <= 0:
            raise BadArity(f'Patch grid has an empty dimension: {self.data.shape}.')

    @property
    def shape(self):
        return self.occupancy.shape

    @property
    def dim(self):
        return self.data.shape[2]

    def flat(self):
        """:return: Tuple[numpy.array, numpy.array]; (Gh*Gw, D) features and (Gh*Gw, ) occupancy"""
        return self.data.reshape(-1, self.dim), self.occupancy.reshape(-1)

    def masked(self, occupancy):
        """Copy restricted to `occupancy`; cells dropped from occupancy are zeroed."""
        occupancy = np.logical_and(self.occupancy, occupancy)
        return PatchGrid(data=np.where(occupancy[..., None], self.data, 0.0), occupancy=occupancy)


# ___________________________________PREPROCESSING_____________________________________________________________________

def plane_through(p1, p2, p3):
    """
    Plane through three points as unit normal and offset, n . p + d = 0.

    :return: Tuple[numpy.array, float]; None if the points are collinear
    """
    normal = np.cross(p2 - p1, p3 - p1)
    norm = np.linalg.norm(normal)
    if norm < 1e-12:
        return None
    normal = normal / norm
    return normal, -float(normal @ p1)


def fit_background_plane(points, dist_thresh, iters, seed=0):
    """
    RANSAC estimate of the dominant plane. Every iteration draws 3 distinct points, the plane with the most points
    within `dist_thresh` wins, ties keep the first found.

    :param points: numpy.array; (N, 3)
    :param dist_thresh: float; inlier distance in meters
    :param iters: int; number of sampled planes
    :param seed: int;
    :return: Tuple[numpy.array, float]; unit normal and offset
    """
    n_points = points.shape[0]
    if n_points < 3:
        raise DegenerateScene(f'At least 3 valid points are required to fit a plane, got {n_points}.')

    rng = np.random.default_rng(seed)
    best, best_count = None, -1
    for _ in range(iters):
        sample = rng.choice(n_points, size=3, replace=False)
        plane = plane_through(*points[sample])
        if plane is None:
            continue
        count = int(np.count_nonzero(np.abs(points @ plane[0] + plane[1]) <= dist_thresh))
        if count > best_count:
            best, best_count = plane, count

    if best is None:
        raise DegenerateScene('All sampled point triples are collinear, background plane cannot be estimated.')
    logger.debug(f'Background plane with {best_count}/{n_points} inliers.')
    return best


def remove_plane(scene, plane, dist_thresh):
    """
    Invalidates points within `dist_thresh` of `plane` and zeroes their coordinates and colours.

    :param scene: OrganizedScene;
    :param plane: Tuple[numpy.array, float]; (normal, offset)
    :param dist_thresh: float;
    :return: OrganizedScene
    """
    normal, offset = plane
    distance = np.abs(scene.coords @ normal + offset)
    valid = scene.valid & (distance > dist_thresh)
    return OrganizedScene(
        coords=np.where(valid[..., None], scene.coords, 0.0),
        rgb=np.where(valid[..., None], scene.rgb, 0.0),
        valid=valid,
    )


def resize_scene(scene, target_size):
    """
    Bilinear resize of both grids to target_size x target_size (pixel centers aligned). A resized pixel is valid
    only if every source pixel with a non-zero interpolation weight is valid.

    :param scene: OrganizedScene;
    :param target_size: int;
    :return: OrganizedScene
    """
    h, w = scene.shape
    if (h, w) == (target_size, target_size):
        return scene

    rows = (np.arange(target_size) + 0.5) * h / target_size - 0.5
    cols = (np.arange(target_size) + 0.5) * w / target_size - 0.5
    coordinates = np.stack(np.meshgrid(rows, cols, indexing='ij'))

    def bilinear(channel):
        return map_coordinates(channel, coordinates, order=1, mode='nearest')

    invalid = bilinear((~scene.valid).astype(np.float64))
    valid = invalid == 0.0
    coords = np.stack([bilinear(scene.coords[..., c]) for c in range(3)], axis=-1)
    rgb = np.stack([bilinear(scene.rgb[..., c]) for c in range(3)], axis=-1)
    return OrganizedScene(
        coords=np.where(valid[..., None], coords, 0.0),
        rgb=np.where(valid[..., None], rgb, 0.0),
        valid=valid,
    )


def preprocess_scene(scene, dist_thresh=None, iters=None, target_size=None, seed=0, plane=None):
    """
    Removes the background plane and resizes the scene to a square grid.

    :param scene: OrganizedScene;
    :param dist_thresh: float; plane distance below which points are removed, `config.RANSAC_DIST` by default
    :param iters: int; RANSAC iterations, `config.RANSAC_ITERS` by default
    :param target_size: int; output grid side, `config.IMAGE_SIZE` by default
    :param seed: int; RANSAC seed
    :param plane: Tuple[numpy.array, float]; reuse a known plane instead of estimating it
    :return: OrganizedScene
    """
    dist_thresh = config.RANSAC_DIST if dist_thresh is None else dist_thresh
    iters = config.RANSAC_ITERS if iters is None else iters
    target_size = config.IMAGE_SIZE if target_size is None else target_size
    if not dist_thresh > 0:
        raise BadParam(f'Plane distance threshold has to be positive, got {dist_thresh}.')

    points, _ = scene.points()
    if plane is None:
        plane = fit_background_plane(points, dist_thresh, iters, seed=seed)
    return resize_scene(remove_plane(scene, plane, dist_thresh), target_size)


# ___________________________________SAMPLING_AND_GROUPING_____________________________________________________________

def farthest_point_sampling(points, m, seed_index=0):
    """
    Greedy max-min selection of `m` points starting from `seed_index`, ties resolved towards the lowest index.

    :param points: numpy.array; (N, 3)
    :param m: int;
    :param seed_index: int;
    :return: numpy.array; (m, ) indices in selection order
    """
    points = np.asarray(points, dtype=np.float64)
    n_points = points.shape[0]
    if n_points == 0 or not 1 <= m <= n_points:
        raise BadArity(f'Cannot sample {m} points out of {n_points}.')
    if not 0 <= seed_index < n_points:
        raise BadArity(f'Seed index {seed_index} out of range.')

    selected = np.empty(m, dtype=np.int64)
    selected[0] = seed_index
    min_dist = np.sum((points - points[seed_index]) ** 2, axis=1)
    min_dist[seed_index] = -1.0
    for ii in range(1, m):
        farthest = int(np.argmax(min_dist))
        selected[ii] = farthest
        # selected points keep -1 through the minimum
        min_dist = np.minimum(min_dist, np.sum((points - points[farthest]) ** 2, axis=1))
        min_dist[farthest] = -1.0
    return selected


def knn_group(points, center_indices, s):
    """
    Groups the `s` nearest points around every center (Euclidean, ties by the lowest index). The center itself is
    always the first member of its group.

    :param points: numpy.array; (N, 3)
    :param center_indices: numpy.array; (M, )
    :param s: int;
    :return: PointGroupSet
    """
    points = np.asarray(points, dtype=np.float64)
    center_indices = np.asarray(center_indices, dtype=np.int64)
    n_points = points.shape[0]
    if not 1 <= s <= n_points:
        raise BadArity(f'Group size {s} does not fit {n_points} points.')

    groups = np.empty((center_indices.size, s), dtype=np.int64)
    for start in range(0, center_indices.size, _CHUNK // 16):
        idx = center_indices[start: start + _CHUNK // 16]
        dist = cdist(points[idx], points, 'sqeuclidean')
        dist[np.arange(idx.size), idx] = -1.0
        groups[start: start + idx.size] = np.argsort(dist, axis=1, kind='stable')[:, :s]

    return PointGroupSet(centers=points[center_indices], center_indices=center_indices, groups=groups)


def sample_groups(points, m, s, seed_index=0):
    """
    FPS centers plus kNN grouping, `m` and `s` clamped to the number of points.

    :return: PointGroupSet
    """
    n_points = points.shape[0]
    if m > n_points or s > n_points:
        logger.warning(f'Requested {m} groups of {s} points, scene has only {n_points} valid points; clamping.')
    m, s = min(m, n_points), min(s, n_points)
    return knn_group(points, farthest_point_sampling(points, m, seed_index=seed_index % n_points), s)


# ___________________________________POINT_FEATURE_ALIGNMENT___________________________________________________________

def interpolate_to_points(group_features, centers, points, eps=None):
    """
    Inverse distance weighted interpolation of group features to points; weights 1/(|c_i - p_j| + eps) are
    normalised per point.

    :param group_features: numpy.array; (M, D)
    :param centers: numpy.array; (M, 3)
    :param points: numpy.array; (N, 3)
    :param eps: float; `config.IDW_EPS` by default
    :return: numpy.array; (N, D)
    """
    eps = config.IDW_EPS if eps is None else eps
    group_features = np.asarray(group_features, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if group_features.ndim != 2 or centers.ndim != 2 or centers.shape[1] != 3 \
            or group_features.shape[0] != centers.shape[0] or centers.shape[0] < 1:
        raise BadArity(f'Group features {group_features.shape} and centers {centers.shape} do not match.')
    if not eps > 0:
        raise BadParam(f'`eps` has to be positive, got {eps}.')

    result = np.empty((points.shape[0], group_features.shape[1]))
    for start in range(0, points.shape[0], _CHUNK):
        weights = 1.0 / (cdist(points[start: start + _CHUNK], centers) + eps)
        weights /= weights.sum(axis=1, keepdims=True)
        result[start: start + _CHUNK] = weights @ group_features
    return result


def project_to_plane(point_features, pixel_of_point, h, w):
    """
    Scatters point features to their pixels. Pixels shared by several points hold the mean of their features,
    pixels without a point are zero and unoccupied.

    :param point_features: numpy.array; (N, D)
    :param pixel_of_point: numpy.array; (N, ) flat pixel indices
    :param h: int;
    :param w: int;
    :return: PatchGrid; full resolution (h, w, D) grid
    """
    point_features = np.asarray(point_features, dtype=np.float64)
    pixel_of_point = np.asarray(pixel_of_point, dtype=np.int64).reshape(-1)
    if point_features.ndim != 2 or point_features.shape[0] != pixel_of_point.size:
        raise BadArity(f'{point_features.shape[0]} features for {pixel_of_point.size} pixels.')
    if pixel_of_point.size and (pixel_of_point.min() < 0 or pixel_of_point.max() >= h * w):
        raise BadArity(f'Pixel index out of the {h}x{w} grid.')

    sums = np.zeros((h * w, point_features.shape[1]))
    np.add.at(sums, pixel_of_point, point_features)
    counts = np.bincount(pixel_of_point, minlength=h * w)
    occupied = counts > 0
    sums[occupied] /= counts[occupied, None]
    return PatchGrid(data=sums.reshape(h, w, -1), occupancy=occupied.reshape(h, w))


def average_pool(grid, gh, gw):
    """
    Average pools the grid to (gh, gw) patches over occupied cells only.

    :param grid: PatchGrid;
    :param gh: int;
    :param gw: int;
    :return: PatchGrid
    """
    h, w = grid.shape
    if gh <= 0 or gw <= 0 or h % gh or w % gw:
        raise BadArity(f'Grid {h}x{w} cannot be pooled to {gh}x{gw}.')

    data = grid.data.reshape(gh, h // gh, gw, w // gw, grid.dim).sum(axis=(1, 3))
    counts = grid.occupancy.reshape(gh, h // gh, gw, w // gw).sum(axis=(1, 3))
    occupied = counts > 0
    data[occupied] /= counts[occupied, None]
    return PatchGrid(data=data, occupancy=occupied)


def align_point_features(group_set, points, pixel_of_point, image_shape, grid, eps=None):
    """
    Point feature alignment: interpolation to points, projection to the image plane and pooling to patches.

    :param group_set: PointGroupSet; with `group_features`
    :param points: numpy.array; (N, 3) valid points of the scene
    :param pixel_of_point: numpy.array; (N, ) flat pixel index of every point
    :param image_shape: Tuple[int, int];
    :param grid: Tuple[int, int]; (gh, gw)
    :param eps: float;
    :return: PatchGrid
    """
    point_features = interpolate_to_points(group_set.group_features, group_set.centers, points, eps=eps)
    full = project_to_plane(point_features, pixel_of_point, *image_shape)
    return average_pool(full, *grid)


def pool_validity(valid, grid):
    """Patch occupancy of a pixel mask: a patch is occupied if any of its pixels is."""
    h, w = valid.shape
    gh, gw = grid
    if h % gh or w % gw:
        raise BadArity(f'Mask {h}x{w} cannot be pooled to {gh}x{gw}.')
    return valid.reshape(gh, h // gh, gw, w // gw).any(axis=(1, 3))
