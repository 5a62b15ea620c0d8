import csv
import json

import numpy as np
import pytest

from m3dm_lite import metrics
from m3dm_lite.errors import OneClassOnly, NoAnomaly, BadParam


def pairwise_auroc(scores, labels):
    positives, negatives = scores[labels == 1], scores[labels == 0]
    wins = (positives[:, None] > negatives[None, :]).sum() + 0.5 * (positives[:, None] == negatives[None, :]).sum()
    return wins / (positives.size * negatives.size)


def flood_fill_count(mask):
    seen = np.zeros_like(mask, dtype=bool)
    components = []
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        stack, members = [start], set()
        seen[start] = True
        while stack:
            ii, jj = stack.pop()
            members.add((ii, jj))
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    ni, nj = ii + di, jj + dj
                    if 0 <= ni < mask.shape[0] and 0 <= nj < mask.shape[1] and mask[ni, nj] and not seen[ni, nj]:
                        seen[ni, nj] = True
                        stack.append((ni, nj))
        components.append(members)
    return components


def truncated_area(fpr, pro, limit):
    area = 0.0
    for x0, y0, x1, y1 in zip(fpr[:-1], pro[:-1], fpr[1:], pro[1:]):
        if x0 >= limit:
            break
        if x1 > limit:
            y1 = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            x1 = limit
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area / limit


def test_auroc_examples():
    assert metrics.auroc([0.1, 0.9], [0, 1]) == 1.0
    assert metrics.auroc([0.5, 0.5, 0.5], [0, 1, 1]) == 0.5
    assert metrics.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)
    with pytest.raises(OneClassOnly):
        metrics.auroc([0.1, 0.2], [1, 1])


def test_auroc_matches_pairwise_count(rng):
    for _ in range(200):
        n = int(rng.integers(2, 30))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 6, n).astype(float)
        assert metrics.auroc(scores, labels) == pytest.approx(pairwise_auroc(scores, labels), abs=1e-12)


def test_auroc_invariant_to_monotone_transform(rng):
    scores, labels = rng.normal(size=50), np.arange(50) % 2
    assert metrics.auroc(np.exp(scores) * 3.0 + 1.0, labels) == metrics.auroc(scores, labels)


def test_connected_components():
    assert metrics.connected_components(np.zeros((4, 4), dtype=bool))[1] == 0
    diagonal = np.eye(3, dtype=bool)
    labeled, n_components = metrics.connected_components(diagonal)
    assert n_components == 1 and np.all(labeled[diagonal] == 1)


def test_connected_components_match_flood_fill(rng):
    for _ in range(30):
        mask = rng.random((16, 16)) < 0.3
        labeled, n_components = metrics.connected_components(mask)
        components = flood_fill_count(mask)
        assert n_components == len(components)
        for members in components:
            assert len({labeled[p] for p in members}) == 1
        np.testing.assert_array_equal(labeled > 0, mask)


def test_aupro_perfect_and_constant_maps():
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:4, 2:5] = True
    assert metrics.aupro([mask.astype(float)], [mask], fpr_limit=0.3) == pytest.approx(1.0)
    assert metrics.aupro([np.full((8, 8), 0.4)], [mask], fpr_limit=0.3) == pytest.approx(0.15)


def test_pro_averages_regions():
    mask = np.zeros((8, 8), dtype=bool)
    mask[0:2, 0:2] = True
    mask[5:7, 5:7] = True
    seg_map = np.zeros((8, 8))
    seg_map[0:2, 0:2] = 1.0
    fpr, pro, thresholds = metrics.pro_curve([seg_map], [mask])
    assert thresholds[0] == 1.0
    assert fpr[0] == 0.0 and pro[0] == 0.5
    assert fpr[-1] == 1.0 and pro[-1] == 1.0


def test_pro_curve_matches_brute_force(rng):
    for _ in range(20):
        seg_maps, gt_masks = [], []
        for _ in range(int(rng.integers(1, 4))):
            mask = np.zeros((8, 8), dtype=bool)
            top, left = rng.integers(0, 6, 2)
            mask[top:top + int(rng.integers(1, 3)), left:left + int(rng.integers(1, 3))] = True
            seg_maps.append(rng.random((8, 8)) + mask * rng.random())
            gt_masks.append(mask)

        fpr, pro, thresholds = metrics.pro_curve(seg_maps, gt_masks)
        normal = np.concatenate([m[~g] for m, g in zip(seg_maps, gt_masks)])
        regions = []
        for seg_map, mask in zip(seg_maps, gt_masks):
            labeled, n_components = metrics.connected_components(mask)
            regions.extend(seg_map[labeled == label] for label in range(1, n_components + 1))
        for index, threshold in enumerate(thresholds):
            assert fpr[index] == pytest.approx(np.mean(normal >= threshold), abs=1e-12)
            assert pro[index] == pytest.approx(np.mean([np.mean(r >= threshold) for r in regions]), abs=1e-12)
        assert np.all(np.diff(fpr) >= 0)

        expected = truncated_area(np.concatenate([[0.0], fpr]), np.concatenate([[0.0], pro]), 0.3)
        assert metrics.aupro(seg_maps, gt_masks, fpr_limit=0.3) == pytest.approx(expected, abs=1e-9)


def test_aupro_errors(rng):
    with pytest.raises(NoAnomaly):
        metrics.aupro([rng.random((4, 4))], [np.zeros((4, 4), dtype=bool)])
    with pytest.raises(BadParam):
        metrics.aupro([rng.random((4, 4))], [np.ones((4, 4), dtype=bool)], fpr_limit=0.0)


def test_evaluate_report(tmp_path, rng):
    masks = [np.zeros((8, 8), dtype=bool) for _ in range(4)]
    masks[2][1:3, 1:3] = True
    masks[3][4:7, 2:4] = True
    seg_maps = [rng.random((8, 8)) for _ in range(4)]
    report = metrics.evaluate([0.1, 0.2, 0.9, 0.8], [0, 0, 1, 1], seg_maps, masks, fpr_limit=0.3)

    assert report.i_auroc == 1.0 and report.n_scenes == 4
    pixels = np.concatenate([m.ravel() for m in seg_maps])
    labels = np.concatenate([m.ravel() for m in masks])
    assert report.p_auroc == metrics.auroc(pixels, labels)

    path = str(tmp_path / 'report.json')
    report.save(path)
    with open(path) as f:
        content = json.load(f)
    assert list(content) == sorted(content)
    assert content['aupro'] == report.aupro and content['fpr_limit'] == 0.3


def test_scene_csv(tmp_path):
    path = str(tmp_path / 'eval' / 'scenes.csv')
    metrics.write_scene_csv(path, [{'id': '0000', 'label': 0, 'kind': 'good', 'a': 0.25, 'max_S': 1.5},
                                   {'id': '0001', 'label': 1, 'kind': 'color', 'a': 2.0, 'max_S': 3.0}])
    with open(path, newline='') as f:
        rows = list(csv.DictReader(f))
    assert [r['id'] for r in rows] == ['0000', '0001']
    assert float(rows[0]['a']) == 0.25 and rows[1]['kind'] == 'color'
