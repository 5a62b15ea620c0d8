"""
Pipeline stages on top of the dataset and work directories.

Work directory layout::

    config.json
    features/manifest.json, features/<split>/<id>_{rgb,pt}.t (+ .occ)
    uff/                   fusion network checkpoint
    banks/<rgb|pt|fs>/     memory banks
    heads/scene.json, heads/segment.json
    scores.db              inference registry
    report.json, scenes.csv, ablation.json
"""
import json
import os
from dataclasses import dataclass

import numpy as np
from loguru import logger

from m3dm_lite import geometry, features, fusion, memory, decision, metrics, dtb, synthetic
from m3dm_lite.errors import DataError, DegenerateScene, EmptyData
from m3dm_lite.utils.multiproc import multiprocess_eval

SPLITS = ('train', 'test')
HEAD_NAMES = ('scene', 'segment')

DEFAULT_ABLATION = (
    ('rgb', ('rgb', ), None, None),
    ('pt', ('pt', ), None, None),
    ('rgb+pt', ('rgb', 'pt'), None, None),
    ('rgb+pt+fs', ('rgb', 'pt', 'fs'), None, None),
)
FULL_ABLATION = (
    ('pt', ('pt', ), None, 'dlf'),
    ('rgb', ('rgb', ), None, 'dlf'),
    ('fs w/o uff', ('fs', ), 'concat', 'dlf'),
    ('fs', ('fs', ), 'uff', 'dlf'),
    ('rgb+pt w/o dlf', ('rgb', 'pt'), None, 'sum'),
    ('rgb+pt', ('rgb', 'pt'), None, 'dlf'),
    ('rgb+pt+fs', ('rgb', 'pt', 'fs'), 'uff', 'dlf'),
)


@dataclass
class TrainedModel:
    """
    Everything inference needs.

    :param banks: Dict[str, memory.MemoryBank]; keyed by bank name, used in `cfg.banks` order
    :param net: fusion.FusionNetwork; None in `concat` fusion mode or without the fused bank
    :param heads: Tuple[decision.DecisionHead, decision.DecisionHead]; None in `sum` decision mode
    """
    banks: dict
    net: fusion.FusionNetwork = None
    heads: tuple = None


# ___________________________________PATHS_____________________________________________________________________________

def feature_path(cfg, split, scene_id, modality):
    return os.path.join(cfg.work_dir, 'features', split, f'{scene_id}_{modality}.t')


def uff_dir(cfg):
    return os.path.join(cfg.work_dir, 'uff')


def bank_dir(cfg, name):
    return os.path.join(cfg.work_dir, 'banks', name)


def head_path(cfg, name):
    return os.path.join(cfg.work_dir, 'heads', f'{name}.json')


def registry_path(cfg):
    return os.path.join(cfg.work_dir, 'scores.db')


def write_json(path, content):
    dirname = os.path.dirname(path)
    if dirname:
        os.makedirs(dirname, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(content, f, indent=2, sort_keys=True)


def read_json(path, what='File'):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise DataError(f'{what} {path} does not exist, run the previous stage first.')


# ___________________________________EXTRACTION________________________________________________________________________

def extract_grids(scene, cfg):
    """
    Preprocesses scene and computes its image and point patch grids.

    :param scene: geometry.OrganizedScene;
    :param cfg: config.PipelineConfig;
    :return: Tuple[geometry.PatchGrid, geometry.PatchGrid]; (rgb, pt)
    """
    processed = geometry.preprocess_scene(scene, dist_thresh=cfg.ransac_dist, iters=cfg.ransac_iters,
                                          target_size=cfg.image_size, seed=cfg.ransac_seed)
    points, pixel_of_point = processed.points()
    if points.shape[0] < 3:
        raise DegenerateScene(f'Only {points.shape[0]} points left after background removal.')

    rgb = features.toy_rgb_extractor(processed.rgb, *cfg.grid, d_out=cfg.d_rgb, seed=cfg.extractor_seed)
    rgb = rgb.masked(geometry.pool_validity(processed.valid, cfg.grid))

    group_set = geometry.sample_groups(points, *cfg.groups, seed_index=cfg.fps_seed)
    group_set.group_features = features.toy_point_extractor(group_set, points, d_out=cfg.d_pt,
                                                            seed=cfg.extractor_seed,
                                                            length_scale=cfg.point_length_scale)
    pt = geometry.align_point_features(group_set, points, pixel_of_point, processed.shape, cfg.grid, eps=cfg.idw_eps)
    return rgb, pt


def extract_scene(item, cfg):
    """
    Worker of the `extract` stage, writes both grids of one scene.

    :param item: Tuple[str, str]; (split, scene id)
    :param cfg: config.PipelineConfig;
    :return: dict; scene record of the features manifest
    """
    split, scene_id = item
    scene = synthetic.load_scene(cfg.dataset_dir, split, scene_id)
    rgb, pt = extract_grids(scene, cfg)
    features.save_grid(feature_path(cfg, split, scene_id, 'rgb'), rgb)
    features.save_grid(feature_path(cfg, split, scene_id, 'pt'), pt)
    return {'split': split, 'id': scene_id, 'shape': list(scene.shape), 'occupied': int(pt.occupancy.sum())}


def extract(cfg):
    """
    Stage `extract`: patch grids of every dataset scene.

    :param cfg: config.PipelineConfig;
    :return: dict; features manifest
    """
    dataset = synthetic.read_manifest(cfg.dataset_dir)
    items = [(split, entry['id']) for split in SPLITS for entry in dataset[split]]
    logger.info(f'Extracting features of {len(items)} scenes.')
    records = multiprocess_eval(items, extract_scene, (cfg, ))

    manifest = {split: [r['id'] for r in records if r['split'] == split] for split in SPLITS}
    manifest['shapes'] = {f"{r['split']}/{r['id']}": r['shape'] for r in records}
    manifest.update({'grid': list(cfg.grid), 'd_rgb': cfg.d_rgb, 'd_pt': cfg.d_pt})
    write_json(os.path.join(cfg.work_dir, 'features', 'manifest.json'), manifest)
    return manifest


def features_manifest(cfg):
    return read_json(os.path.join(cfg.work_dir, 'features', 'manifest.json'), 'Features manifest')


def load_split_grids(cfg, split):
    """:return: Dict[str, Tuple[geometry.PatchGrid, geometry.PatchGrid]]; (rgb, pt) grids by scene id"""
    ids = features_manifest(cfg)[split]
    return {iden: (features.load_grid(feature_path(cfg, split, iden, 'rgb')),
                   features.load_grid(feature_path(cfg, split, iden, 'pt'))) for iden in ids}


# ___________________________________TRAINING__________________________________________________________________________

def uses_network(cfg):
    return 'fs' in cfg.banks and cfg.fusion_mode == 'uff'


def train_fusion(train_grids, cfg):
    """:return: fusion.FusionNetwork; None if the configuration does not use one"""
    if not uses_network(cfg):
        return None
    logger.info('Training fusion network.')
    return fusion.uff_train([train_grids[iden] for iden in sorted(train_grids)],
                            fusion.TrainConfig.from_pipeline(cfg), embed_dim=cfg.uff_embed)


def bank_grids(grids, cfg, net=None):
    """
    Grids of the selected banks for one scene.

    :param grids: Tuple[geometry.PatchGrid, geometry.PatchGrid]; (rgb, pt)
    :param cfg: config.PipelineConfig;
    :param net: fusion.FusionNetwork;
    :return: Dict[str, geometry.PatchGrid]
    """
    rgb, pt = grids
    available = {'rgb': rgb, 'pt': pt}
    if 'fs' in cfg.banks:
        available['fs'] = fusion.fuse_grid(net if cfg.fusion_mode == 'uff' else None, rgb, pt)
    return {name: available[name] for name in cfg.banks}


def build_banks(train_grids, cfg, net=None):
    """
    :param train_grids: Dict[str, Tuple[geometry.PatchGrid, geometry.PatchGrid]];
    :param cfg: config.PipelineConfig;
    :param net: fusion.FusionNetwork;
    :return: Dict[str, memory.MemoryBank]
    """
    per_scene = {iden: bank_grids(train_grids[iden], cfg, net) for iden in sorted(train_grids)}
    banks = {}
    for name in cfg.banks:
        banks[name] = memory.build_bank({iden: grids[name] for iden, grids in per_scene.items()},
                                        ratio=cfg.coreset_ratio, seed=cfg.bank_seed)
        logger.info(f'Memory bank `{name}`: {banks[name].size} vectors of dimension {banks[name].dim}.')
    return banks


def score_scene(grids, model, cfg):
    """
    Bank scores of one scene.

    :param grids: Tuple[geometry.PatchGrid, geometry.PatchGrid]; (rgb, pt)
    :param model: TrainedModel;
    :param cfg: config.PipelineConfig;
    :return: Tuple[numpy.array, numpy.array, numpy.array]; (B, ) phi, (B, Gh, Gw) psi and (Gh, Gw) union occupancy
    """
    per_bank = bank_grids(grids, cfg, model.net)
    phi = np.array([memory.phi_score(model.banks[name], per_bank[name], b=cfg.reweight_neighbours)
                    for name in cfg.banks])
    psi = np.stack([memory.psi_map(model.banks[name], per_bank[name]) for name in cfg.banks])
    occupancy = np.any([per_bank[name].occupancy for name in cfg.banks], axis=0)
    return phi, psi, occupancy


def train_heads(train_grids, model, cfg):
    """
    Fits the scene head on per-scene phi vectors and the segmentation head on per-patch psi vectors of the
    training scenes.

    :return: Tuple[decision.DecisionHead, decision.DecisionHead]; None in `sum` decision mode
    """
    if cfg.decision_mode == 'sum':
        return None
    scene_samples, patch_samples = [], []
    for iden in sorted(train_grids):
        phi, psi, occupancy = score_scene(train_grids[iden], model, cfg)
        scene_samples.append(phi)
        patch_samples.append(psi[:, occupancy].T)

    patch_samples = decision.subsample(np.concatenate(patch_samples), cfg.dlf_segment_cap, seed=cfg.dlf_seed)
    logger.info(f'Fitting decision heads on {len(scene_samples)} scenes and {patch_samples.shape[0]} patches.')
    kwargs = dict(nu=cfg.dlf_nu, lr=cfg.dlf_lr, steps=cfg.dlf_epochs, seed=cfg.dlf_seed)
    return decision.ocsvm_train(np.array(scene_samples), **kwargs), decision.ocsvm_train(patch_samples, **kwargs)


def train_pipeline(train_grids, cfg, net=None):
    """
    Two stage training: fusion network and memory banks, then decision heads on the scores of the training scenes.

    :param train_grids: Dict[str, Tuple[geometry.PatchGrid, geometry.PatchGrid]]; nominal training scenes
    :param cfg: config.PipelineConfig;
    :param net: fusion.FusionNetwork; already trained network, trained here if None and needed
    :return: TrainedModel
    """
    if len(train_grids) == 0:
        raise EmptyData('Training requires at least one nominal scene.')
    if net is None:
        net = train_fusion(train_grids, cfg)
    model = TrainedModel(banks=build_banks(train_grids, cfg, net), net=net)
    model.heads = train_heads(train_grids, model, cfg)
    return model


def infer_scene(grids, model, cfg, shape):
    """
    :return: Tuple[float, numpy.array, numpy.array]; scene score, (H, W) segmentation map and the patch map
    """
    phi, psi, _ = score_scene(grids, model, cfg)
    score, seg_map = decision.dlf_infer_scene(model.heads, phi, psi, *shape, sigma=cfg.blur_sigma)
    if model.heads is None:
        patch_map = psi.sum(axis=0)
    else:
        patch_map = decision.ocsvm_score(model.heads[1], psi.reshape(psi.shape[0], -1).T).reshape(psi.shape[1:])
    return score, seg_map, patch_map


# ___________________________________STAGES____________________________________________________________________________

def train_uff_stage(cfg):
    """Stage `train-uff`: trains and stores the fusion network."""
    if not uses_network(cfg):
        logger.info('Configuration does not use a fusion network, nothing to train.')
        return None
    net = train_fusion(load_split_grids(cfg, 'train'), cfg)
    fusion.save_network(net, uff_dir(cfg), manifest={
        'lr': cfg.uff_lr, 'warmup': cfg.uff_warmup, 'steps': cfg.uff_steps, 'batch': cfg.uff_batch,
        'temperature': cfg.uff_temperature, 'weight_decay': cfg.uff_weight_decay, 'seed': cfg.uff_seed,
    })
    return net


def load_stage_network(cfg):
    return fusion.load_network(uff_dir(cfg)) if uses_network(cfg) else None


def build_banks_stage(cfg):
    """Stage `build-banks`: memory banks from the training grids."""
    banks = build_banks(load_split_grids(cfg, 'train'), cfg, load_stage_network(cfg))
    for name, bank in banks.items():
        memory.save_bank(bank, bank_dir(cfg, name))
    return banks


def load_model(cfg, with_heads=True):
    model = TrainedModel(banks={name: memory.load_bank(bank_dir(cfg, name)) for name in cfg.banks},
                         net=load_stage_network(cfg))
    if with_heads and cfg.decision_mode == 'dlf':
        model.heads = tuple(decision.load_head(head_path(cfg, name)) for name in HEAD_NAMES)
    return model


def train_dlf_stage(cfg):
    """Stage `train-dlf`: decision heads from the stored banks."""
    model = load_model(cfg, with_heads=False)
    heads = train_heads(load_split_grids(cfg, 'train'), model, cfg)
    if heads is None:
        logger.info('Decision mode `sum` has no heads to train.')
        return None
    for name, head in zip(HEAD_NAMES, heads):
        decision.save_head(head, head_path(cfg, name))
    return heads


def infer_worker(scene_id, model, cfg, shapes):
    grids = (features.load_grid(feature_path(cfg, 'test', scene_id, 'rgb')),
             features.load_grid(feature_path(cfg, 'test', scene_id, 'pt')))
    return infer_scene(grids, model, cfg, tuple(shapes[f'test/{scene_id}']))


def infer_stage(cfg):
    """
    Stage `infer`: scores every test scene and stores the results in the registry. Scenes already present in the
    registry are skipped. Ground truth masks are never read here.

    :return: int; number of newly scored scenes
    """
    manifest = features_manifest(cfg)
    dataset = {entry['id']: entry for entry in synthetic.read_manifest(cfg.dataset_dir)['test']}
    db_name = registry_path(cfg)
    todo = dtb.search_for_breakpoint(db_name, sorted(manifest['test']))
    if len(todo) < len(manifest['test']):
        logger.info(f'Resuming inference, {len(manifest["test"]) - len(todo)} scenes already scored.')

    dtb.create_scores_db(db_name)
    model = load_model(cfg)

    def store(chunk_ids, chunk_results):
        for iden, (score, seg_map, patch_map) in zip(chunk_ids, chunk_results):
            entry = dataset.get(iden, {})
            dtb.insert_scene_scores(db_name, iden, entry.get('label', -1), entry.get('kind', 'good'),
                                    score, seg_map, patch_map)

    multiprocess_eval(todo, infer_worker, (model, cfg, manifest['shapes']), on_chunk=store)
    return len(todo)


def select_scenes(records, kinds=None):
    """Scenes evaluated for the given anomaly kinds: every nominal scene plus anomalies of those kinds."""
    if kinds is None:
        return list(records)
    return [r for r in records if r['label'] == 0 or r['kind'] in kinds]


def eval_stage(cfg, kinds=None):
    """
    Stage `eval`: metrics over the registry, written to `report.json` and `scenes.csv`.

    :param cfg: config.PipelineConfig;
    :param kinds: Iterable[str]; restrict the anomalous scenes to these kinds
    :return: metrics.EvalReport
    """
    records = select_scenes(dtb.get_scores(registry_path(cfg)), kinds)
    masks = [synthetic.load_mask(cfg.dataset_dir, r['id']) for r in records]
    report = metrics.evaluate([r['score'] for r in records], [r['label'] for r in records],
                              [r['seg_map'] for r in records], masks, fpr_limit=cfg.fpr_limit)
    report.save(os.path.join(cfg.work_dir, 'report.json'))
    metrics.write_scene_csv(os.path.join(cfg.work_dir, 'scenes.csv'), [
        {'id': r['id'], 'label': r['label'], 'kind': r['kind'], 'a': r['score'], 'max_S': np.max(r['seg_map'])}
        for r in records])
    logger.info(f'I-AUROC {report.i_auroc:.4f}, P-AUROC {report.p_auroc:.4f}, AUPRO {report.aupro:.4f}')
    return report


def run_all(cfg, kinds=None):
    """Every stage from feature extraction to evaluation."""
    extract(cfg)
    train_uff_stage(cfg)
    build_banks_stage(cfg)
    train_dlf_stage(cfg)
    infer_stage(cfg)
    return eval_stage(cfg, kinds=kinds)


# ___________________________________ABLATION__________________________________________________________________________

def ablate(cfg, full=False, kinds=None):
    """
    Trains and evaluates every bank / fusion / decision combination of the ablation table on the extracted features.
    The fusion network is trained once and shared by all rows using it.

    :param cfg: config.PipelineConfig; base configuration, its modes fill unspecified row settings
    :param full: bool; all seven rows instead of the four bank subsets
    :param kinds: Iterable[str]; restrict the anomalous test scenes to these kinds
    :return: List[dict]; one row per combination with `name`, `banks`, `fusion_mode`, `decision_mode`, `i_auroc`,
             `p_auroc` and `aupro`
    """
    manifest = features_manifest(cfg)
    train_grids = load_split_grids(cfg, 'train')
    dataset = {entry['id']: entry for entry in synthetic.read_manifest(cfg.dataset_dir)['test']}
    records = select_scenes([{'id': iden, 'label': dataset[iden]['label'], 'kind': dataset[iden].get('kind', 'good')}
                             for iden in sorted(manifest['test'])], kinds)
    ids = [r['id'] for r in records]
    masks = [synthetic.load_mask(cfg.dataset_dir, iden) for iden in ids]

    net = None
    rows = []
    for name, banks, fusion_mode, decision_mode in (FULL_ABLATION if full else DEFAULT_ABLATION):
        row_cfg = cfg.with_banks(banks, fusion_mode=fusion_mode or cfg.fusion_mode,
                                 decision_mode=decision_mode or cfg.decision_mode)
        if uses_network(row_cfg) and net is None:
            net = train_fusion(train_grids, row_cfg)
        logger.info(f'Ablation row `{name}`.')
        model = train_pipeline(train_grids, row_cfg, net=net if uses_network(row_cfg) else None)
        results = multiprocess_eval(ids, infer_worker, (model, row_cfg, manifest['shapes']))
        report = metrics.evaluate([r[0] for r in results], [r['label'] for r in records], [r[1] for r in results],
                                  masks, fpr_limit=cfg.fpr_limit)
        rows.append({'name': name, 'banks': list(banks), 'fusion_mode': row_cfg.fusion_mode,
                     'decision_mode': row_cfg.decision_mode, 'i_auroc': report.i_auroc, 'p_auroc': report.p_auroc,
                     'aupro': report.aupro})

    write_json(os.path.join(cfg.work_dir, 'ablation.json'), rows)
    return rows
