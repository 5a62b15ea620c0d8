"""
Memory banks of nominal patch features and the score functions over them.

phi (scene score) takes the patch farthest from the bank, s* = max_patches min_bank |f - m|, and re-weights it by
eta = 1 - exp(s*) / sum_m exp(|f* - m|) over the `b` bank neighbours of the nearest bank vector m*.
psi (segmentation) is the per-patch nearest bank distance.
"""
import json
import os
from dataclasses import dataclass, field

import numpy as np
from loguru import logger
from scipy.ndimage import gaussian_filter, map_coordinates
from scipy.spatial.distance import cdist

from m3dm_lite import config
from m3dm_lite.errors import BadArity, BadParam, EmptyData, DataError, NonFinite
from m3dm_lite.utils.tensor_file import FLOAT64, save_array, load_array

_CHUNK = 2048  # query rows per distance matrix
BLUR_TRUNCATE = 4.0


@dataclass
class MemoryBank:
    """
    :param vectors: numpy.array; (K, D)
    :param source: List[Tuple[str, int]]; (scene id, flat patch index) of every vector
    :param coreset_ratio: float;
    :param seed: int; seed of the first coreset pick
    """
    vectors: np.ndarray
    source: list = field(default_factory=list)
    coreset_ratio: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise EmptyData(f'Memory bank needs at least one vector, got shape {self.vectors.shape}.')
        if not np.all(np.isfinite(self.vectors)):
            raise NonFinite('Memory bank vectors contain non-finite values.')
        self.source = [(str(scene), int(patch)) for scene, patch in self.source]
        if len(self.source) > 0 and len(set(self.source)) != len(self.source):
            raise BadArity('Memory bank provenance contains duplicates.')

    @property
    def size(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]


def coreset_indices(features, k, seed=0):
    """
    Greedy k-center selection: the first center is drawn from the seeded PRNG, every next one is the feature farthest
    from all centers chosen so far (ties to the lowest index).

    :param features: numpy.array; (n, D)
    :param k: int;
    :param seed: int;
    :return: numpy.array; (k, ) indices in selection order
    """
    n = features.shape[0]
    selected = np.empty(k, dtype=np.int64)
    selected[0] = np.random.default_rng(seed).integers(n)
    min_dist = cdist(features, features[selected[0]][None, :]).ravel()
    for ii in range(1, k):
        selected[ii] = int(np.argmax(min_dist))
        min_dist = np.minimum(min_dist, cdist(features, features[selected[ii]][None, :]).ravel())
    return selected


def coreset_select(features, ratio=None, seed=0, source=None):
    """
    Builds memory bank of ceil(ratio * n) features selected by greedy k-center. The full set is kept as is for
    ratio 1.

    :param features: numpy.array; (n, D) or list of D-vectors
    :param ratio: float; (0, 1], `config.CORESET_RATIO` by default
    :param seed: int;
    :param source: List[Tuple[str, int]]; provenance of every feature
    :return: MemoryBank
    """
    ratio = config.CORESET_RATIO if ratio is None else ratio
    if not 0 < ratio <= 1:
        raise BadParam(f'Coreset ratio has to be in (0, 1], got {ratio}.')
    features = np.asarray(features, dtype=np.float64)
    if features.size == 0:
        raise EmptyData('Cannot build a memory bank without features.')
    features = features.reshape(features.shape[0], -1)
    source = [(str(ii), 0) for ii in range(features.shape[0])] if source is None else list(source)
    if len(source) != features.shape[0]:
        raise BadArity(f'{len(source)} provenance entries for {features.shape[0]} features.')

    n = features.shape[0]
    k = min(n, int(np.ceil(ratio * n)))
    if k == n:
        selected = np.arange(n)
    else:
        selected = coreset_indices(features, k, seed=seed)
    logger.debug(f'Coreset of {k}/{n} features.')
    return MemoryBank(vectors=features[selected], source=[source[ii] for ii in selected], coreset_ratio=ratio,
                      seed=seed)


def build_bank(grids, ratio=None, seed=0):
    """
    Memory bank of all occupied patches of the given grids.

    :param grids: Dict[str, geometry.PatchGrid]; keyed by scene id, scenes are taken in sorted order
    :param ratio: float;
    :param seed: int;
    :return: MemoryBank
    """
    features, source = [], []
    for scene_id in sorted(grids):
        data, occupancy = grids[scene_id].flat()
        patches = np.flatnonzero(occupancy)
        features.append(data[patches])
        source.extend((scene_id, int(p)) for p in patches)
    if len(source) == 0:
        raise EmptyData('No occupied patch to build a memory bank from.')
    return coreset_select(np.concatenate(features), ratio=ratio, seed=seed, source=source)


def _distances(bank, queries):
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != bank.dim:
        raise BadArity(f'Queries of shape {queries.shape} do not match bank dimension {bank.dim}.')
    return cdist(queries, bank.vectors)


def nearest(bank, query, k=1):
    """
    Exact Euclidean k nearest bank vectors, ties by the lower bank index.

    :param bank: MemoryBank;
    :param query: numpy.array; (D, )
    :param k: int; 1 <= k <= K
    :return: Tuple[numpy.array, numpy.array]; ascending distances and bank indices
    """
    if not 1 <= k <= bank.size:
        raise BadArity(f'Cannot return {k} neighbours out of {bank.size} bank vectors.')
    dist = _distances(bank, np.reshape(query, (1, -1)))[0]
    order = np.argsort(dist, kind='stable')[:k]
    return dist[order], order


def nearest_distances(bank, queries):
    """
    Distance of every query to its nearest bank vector.

    :param bank: MemoryBank;
    :param queries: numpy.array; (Q, D)
    :return: Tuple[numpy.array, numpy.array]; (Q, ) distances and (Q, ) bank indices
    """
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, bank.dim)
    dist = np.empty(queries.shape[0])
    index = np.empty(queries.shape[0], dtype=np.int64)
    for start in range(0, queries.shape[0], _CHUNK):
        block = _distances(bank, queries[start: start + _CHUNK])
        index[start: start + block.shape[0]] = np.argmin(block, axis=1)
        dist[start: start + block.shape[0]] = block[np.arange(block.shape[0]), index[start: start + block.shape[0]]]
    return dist, index


def psi_map(bank, grid):
    """
    Patch level score map: nearest bank distance of every occupied patch, 0 elsewhere.

    :param bank: MemoryBank;
    :param grid: geometry.PatchGrid;
    :return: numpy.array; (Gh, Gw)
    """
    data, occupancy = grid.flat()
    result = np.zeros(occupancy.size)
    if np.any(occupancy):
        result[occupancy], _ = nearest_distances(bank, data[occupancy])
    return result.reshape(grid.shape)


def phi_components(bank, grid, b=None):
    """
    Scene score together with its ingredients.

    :param bank: MemoryBank;
    :param grid: geometry.PatchGrid;
    :param b: int; re-weighting neighbourhood, `config.REWEIGHT_NEIGHBOURS` by default
    :return: Tuple[float, float, int]; score eta * s*, s* and the flat index of the patch f*
    """
    b = config.REWEIGHT_NEIGHBOURS if b is None else b
    data, occupancy = grid.flat()
    patches = np.flatnonzero(occupancy)
    if patches.size == 0:
        raise EmptyData('Scene has no occupied patch to score.')
    if not 1 <= b <= bank.size:
        raise BadArity(f'Cannot re-weight over {b} neighbours of a bank with {bank.size} vectors.')

    dist, index = nearest_distances(bank, data[patches])
    worst = int(np.argmax(dist))
    s_star = float(dist[worst])
    f_star = data[patches[worst]]

    _, neighbours = nearest(bank, bank.vectors[index[worst]], k=b)
    neighbour_dist = _distances(bank, f_star[None, :])[0, neighbours]
    # exp(s*) / sum exp(d) evaluated relative to s*
    eta = 1.0 - 1.0 / np.sum(np.exp(neighbour_dist - s_star))
    return float(eta * s_star), s_star, int(patches[worst])


def phi_score(bank, grid, b=None):
    """
    Scene level anomaly score of the grid against the bank.

    :return: float
    """
    return phi_components(bank, grid, b=b)[0]


def upsample_smooth(score_map, h, w, sigma=None):
    """
    Bilinear upsampling of a patch map (pixel centers aligned) followed by Gaussian blur truncated at 4 sigma.

    :param score_map: numpy.array; (Gh, Gw)
    :param h: int;
    :param w: int;
    :param sigma: float; in output pixels, `config.BLUR_SIGMA` by default, 0 disables the blur
    :return: numpy.array; (h, w)
    """
    sigma = config.BLUR_SIGMA if sigma is None else sigma
    score_map = np.asarray(score_map, dtype=np.float64)
    if score_map.ndim != 2:
        raise BadArity(f'Score map has to be 2D, got {score_map.shape}.')
    gh, gw = score_map.shape
    if h < gh or w < gw:
        raise BadArity(f'Cannot upsample {gh}x{gw} map to {h}x{w}.')
    if sigma < 0:
        raise BadParam(f'Blur sigma cannot be negative, got {sigma}.')

    rows = (np.arange(h) + 0.5) * gh / h - 0.5
    cols = (np.arange(w) + 0.5) * gw / w - 0.5
    upsampled = map_coordinates(score_map, np.stack(np.meshgrid(rows, cols, indexing='ij')), order=1, mode='nearest')
    if sigma == 0:
        return upsampled
    return gaussian_filter(upsampled, sigma=sigma, mode='reflect', truncate=BLUR_TRUNCATE)


def save_bank(bank, directory):
    """
    Stores bank as `manifest.json` (D, K, ratio, seed, provenance) and `vectors.t`.

    :param bank: MemoryBank;
    :param directory: str;
    :return: None
    """
    os.makedirs(directory, exist_ok=True)
    save_array(os.path.join(directory, 'vectors.t'), bank.vectors, dtype_tag=FLOAT64)
    manifest = {'D': bank.dim, 'K': bank.size, 'ratio': bank.coreset_ratio, 'seed': bank.seed,
                'source': [list(item) for item in bank.source]}
    with open(os.path.join(directory, 'manifest.json'), 'w') as f:
        json.dump(manifest, f, sort_keys=True)


def load_bank(directory):
    path = os.path.join(directory, 'manifest.json')
    try:
        with open(path) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise DataError(f'Memory bank {path} does not exist.')
    vectors = load_array(os.path.join(directory, 'vectors.t')).reshape(manifest['K'], manifest['D'])
    return MemoryBank(vectors=vectors, source=[tuple(item) for item in manifest['source']],
                      coreset_ratio=manifest['ratio'], seed=manifest['seed'])
