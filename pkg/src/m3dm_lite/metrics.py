"""
Evaluation metrics: image and pixel level AUROC and the area under the per-region overlap curve (AUPRO).
"""
import csv
import json
import os
from dataclasses import dataclass, asdict

import numpy as np
from scipy import ndimage
from sklearn.metrics import roc_auc_score

from m3dm_lite import config
from m3dm_lite.errors import OneClassOnly, NoAnomaly, BadArity, BadParam, EmptyData

MAX_EXACT_THRESHOLDS = 10000
N_QUANTILE_THRESHOLDS = 1000
EIGHT_CONNECTIVITY = np.ones((3, 3), dtype=int)


@dataclass
class EvalReport:
    i_auroc: float
    p_auroc: float
    aupro: float
    fpr_limit: float
    n_scenes: int

    def __post_init__(self):
        if not 0 < self.fpr_limit <= 1:
            raise BadParam(f'FPR limit has to be in (0, 1], got {self.fpr_limit}.')
        for name in ('i_auroc', 'p_auroc', 'aupro'):
            value = getattr(self, name)
            if value is not None and not 0 <= value <= 1:
                raise BadParam(f'{name} = {value} outside [0, 1].')

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path):
        with open(path, 'w') as f:
            f.write(self.to_json())


def auroc(scores, labels):
    """
    Area under the ROC curve, equal to the Mann-Whitney statistic with ties counted as one half.

    :param scores: array-like; larger means positive
    :param labels: array-like; binary
    :return: float
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.size != labels.size:
        raise BadArity(f'{scores.size} scores for {labels.size} labels.')
    if np.all(labels) or not np.any(labels):
        raise OneClassOnly('AUROC needs both positive and negative samples.')
    return float(roc_auc_score(labels, scores))


def connected_components(mask):
    """
    8-connected components labeled in raster scan order.

    :param mask: numpy.array; (H, W) bool
    :return: Tuple[numpy.array, int]; labels (0 background, 1..n components) and n
    """
    labeled, n_components = ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT_CONNECTIVITY)
    return labeled, int(n_components)


def sweep_thresholds(scores):
    """
    All unique scores when there are at most `MAX_EXACT_THRESHOLDS` of them, evenly spaced quantiles otherwise.

    :return: numpy.array; descending thresholds
    """
    unique = np.unique(scores)
    if unique.size > MAX_EXACT_THRESHOLDS:
        unique = np.unique(np.quantile(scores, np.linspace(0.0, 1.0, N_QUANTILE_THRESHOLDS)))
    return unique[::-1]


def pro_curve(seg_maps, gt_masks):
    """
    Per-region overlap against false positive rate over a descending threshold sweep; a pixel is predicted
    anomalous when its score is >= threshold.

    :param seg_maps: List[numpy.array]; (H, W) maps
    :param gt_masks: List[numpy.array]; (H, W) bool masks
    :return: Tuple[numpy.array, numpy.array, numpy.array]; fpr, pro and thresholds
    """
    if len(seg_maps) != len(gt_masks) or len(seg_maps) == 0:
        raise BadArity(f'{len(seg_maps)} maps for {len(gt_masks)} masks.')

    regions, normal = [], []
    for seg_map, mask in zip(seg_maps, gt_masks):
        seg_map, mask = np.asarray(seg_map, dtype=np.float64), np.asarray(mask, dtype=bool)
        if seg_map.shape != mask.shape:
            raise BadArity(f'Map {seg_map.shape} does not match mask {mask.shape}.')
        labeled, n_components = connected_components(mask)
        regions.extend(np.sort(seg_map[labeled == label]) for label in range(1, n_components + 1))
        normal.append(seg_map[~mask])

    if len(regions) == 0:
        raise NoAnomaly('PRO needs at least one anomalous region.')
    normal = np.sort(np.concatenate(normal))
    if normal.size == 0:
        raise EmptyData('PRO needs anomaly-free pixels to measure false positives.')

    thresholds = sweep_thresholds(np.concatenate([normal] + regions))
    fpr = (normal.size - np.searchsorted(normal, thresholds, side='left')) / normal.size
    pro = np.mean([(region.size - np.searchsorted(region, thresholds, side='left')) / region.size
                   for region in regions], axis=0)
    return fpr, pro, thresholds


def aupro(seg_maps, gt_masks, fpr_limit=None):
    """
    Area under the PRO curve up to `fpr_limit` (trapezoid rule, endpoint interpolated), normalised by `fpr_limit`.

    :param seg_maps: List[numpy.array];
    :param gt_masks: List[numpy.array];
    :param fpr_limit: float; (0, 1], `config.FPR_LIMIT` by default
    :return: float
    """
    fpr_limit = config.FPR_LIMIT if fpr_limit is None else fpr_limit
    if not 0 < fpr_limit <= 1:
        raise BadParam(f'FPR limit has to be in (0, 1], got {fpr_limit}.')

    fpr, pro, _ = pro_curve(seg_maps, gt_masks)
    fpr, pro = np.concatenate([[0.0], fpr]), np.concatenate([[0.0], pro])

    inside = fpr <= fpr_limit
    x, y = fpr[inside], pro[inside]
    beyond = np.flatnonzero(~inside)
    if beyond.size > 0:
        jj = beyond[0]
        y_limit = pro[jj - 1] + (pro[jj] - pro[jj - 1]) * (fpr_limit - fpr[jj - 1]) / (fpr[jj] - fpr[jj - 1])
        x, y = np.append(x, fpr_limit), np.append(y, y_limit)
    area = np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0)
    return float(np.clip(area / fpr_limit, 0.0, 1.0))


def evaluate(scene_scores, labels, seg_maps, gt_masks, fpr_limit=None):
    """
    Full report over a test set. Image AUROC ranks the scene scores, pixel AUROC ranks every pixel of every map.

    :param scene_scores: List[float];
    :param labels: List[int];
    :param seg_maps: List[numpy.array];
    :param gt_masks: List[numpy.array];
    :param fpr_limit: float;
    :return: EvalReport
    """
    fpr_limit = config.FPR_LIMIT if fpr_limit is None else fpr_limit
    pixels = np.concatenate([np.ravel(m) for m in seg_maps])
    pixel_labels = np.concatenate([np.ravel(m) for m in gt_masks]).astype(bool)
    return EvalReport(
        i_auroc=auroc(scene_scores, labels),
        p_auroc=auroc(pixels, pixel_labels),
        aupro=aupro(seg_maps, gt_masks, fpr_limit=fpr_limit),
        fpr_limit=fpr_limit,
        n_scenes=len(scene_scores),
    )


def write_scene_csv(path, rows):
    """
    Per-scene table with columns id, label, kind, a, max_S.

    :param path: str;
    :param rows: List[dict];
    :return: None
    """
    dirname = os.path.dirname(path)
    if dirname:
        os.makedirs(dirname, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=['id', 'label', 'kind', 'a', 'max_S'])
        writer.writeheader()
        for row in rows:
            writer.writerow({key: (repr(float(value)) if key in ('a', 'max_S') else value)
                             for key, value in row.items()})
