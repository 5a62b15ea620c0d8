import json
import os
from dataclasses import dataclass, field, fields, asdict, replace

from m3dm_lite.errors import ConfigError

NUMBER_OF_PROCESSES = os.cpu_count()
# NUMBER_OF_PROCESSES = 1
CHUNKSIZE = 64  # scenes handed to the pool at once
LOG_EVERY = 50  # training steps between debug loss lines

BANK_NAMES = ('rgb', 'pt', 'fs')
FUSION_MODES = ('uff', 'concat')
DECISION_MODES = ('dlf', 'sum')

# ______________________________PREPROCESSING__________________________________
IMAGE_SIZE = 224  # square resize target of coords and rgb
RANSAC_DIST = 0.005  # points closer than this to the background plane are removed [m]
RANSAC_ITERS = 500

# ______________________________POINT_FEATURE_ALIGNMENT________________________
GRID = (56, 56)  # patch grid (gh, gw)
GROUPS = (1024, 128)  # (number of point groups M, points per group S)
IDW_EPS = 1e-8
POINT_LENGTH_SCALE = 0.01  # coordinates are divided by this before computing group moments [m]

# ______________________________FEATURES_______________________________________
D_RGB = 768
D_PT = 128

# ______________________________UNSUPERVISED_FEATURE_FUSION____________________
UFF_EMBED = 128  # output dimension of both projection heads
UFF_LR = 3e-3
UFF_WARMUP = 250
UFF_STEPS = 750
UFF_BATCH = 256
UFF_TEMPERATURE = 0.07
UFF_WEIGHT_DECAY = 1e-2
UFF_CLIP_NORM = 1.0

# ______________________________MEMORY_BANKS___________________________________
CORESET_RATIO = 0.1
REWEIGHT_NEIGHBOURS = 3  # b, neighbours of m* entering the re-weight softmax
BLUR_SIGMA = 4.0

# ______________________________DECISION_LAYER_FUSION__________________________
DLF_NU = 0.5
DLF_LR = 1e-4
DLF_EPOCHS = 1000
DLF_SEGMENT_CAP = 200000  # max per-patch triples used to fit the segmentation head

# ______________________________EVALUATION_____________________________________
FPR_LIMIT = 0.3

SEEDS = ('ransac_seed', 'fps_seed', 'extractor_seed', 'uff_seed', 'bank_seed', 'dlf_seed', 'synth_seed')


@dataclass
class PipelineConfig:
    """
    All settings of one pipeline run. Defaults are read from the module constants at construction time, so
    overriding e.g. `config.GRID` before building a config changes the default.
    """
    dataset_dir: str = 'dataset'
    work_dir: str = 'work'
    image_size: int = field(default_factory=lambda: IMAGE_SIZE)
    grid: tuple = field(default_factory=lambda: tuple(GRID))
    groups: tuple = field(default_factory=lambda: tuple(GROUPS))
    banks: tuple = BANK_NAMES
    fusion_mode: str = 'uff'
    decision_mode: str = 'dlf'

    ransac_dist: float = field(default_factory=lambda: RANSAC_DIST)
    ransac_iters: int = field(default_factory=lambda: RANSAC_ITERS)
    idw_eps: float = field(default_factory=lambda: IDW_EPS)
    point_length_scale: float = field(default_factory=lambda: POINT_LENGTH_SCALE)
    d_rgb: int = field(default_factory=lambda: D_RGB)
    d_pt: int = field(default_factory=lambda: D_PT)

    uff_embed: int = field(default_factory=lambda: UFF_EMBED)
    uff_lr: float = field(default_factory=lambda: UFF_LR)
    uff_warmup: int = field(default_factory=lambda: UFF_WARMUP)
    uff_steps: int = field(default_factory=lambda: UFF_STEPS)
    uff_batch: int = field(default_factory=lambda: UFF_BATCH)
    uff_temperature: float = field(default_factory=lambda: UFF_TEMPERATURE)
    uff_weight_decay: float = field(default_factory=lambda: UFF_WEIGHT_DECAY)
    uff_clip_norm: float = field(default_factory=lambda: UFF_CLIP_NORM)

    coreset_ratio: float = field(default_factory=lambda: CORESET_RATIO)
    reweight_neighbours: int = field(default_factory=lambda: REWEIGHT_NEIGHBOURS)
    blur_sigma: float = field(default_factory=lambda: BLUR_SIGMA)

    dlf_nu: float = field(default_factory=lambda: DLF_NU)
    dlf_lr: float = field(default_factory=lambda: DLF_LR)
    dlf_epochs: int = field(default_factory=lambda: DLF_EPOCHS)
    dlf_segment_cap: int = field(default_factory=lambda: DLF_SEGMENT_CAP)

    fpr_limit: float = field(default_factory=lambda: FPR_LIMIT)

    ransac_seed: int = 0
    fps_seed: int = 0
    extractor_seed: int = 0
    uff_seed: int = 0
    bank_seed: int = 0
    dlf_seed: int = 0
    synth_seed: int = 0

    def __post_init__(self):
        self.grid = tuple(int(v) for v in self.grid)
        self.groups = tuple(int(v) for v in self.groups)
        self.banks = tuple(self.banks)
        validate(self)

    def to_dict(self):
        result = asdict(self)
        result['grid'], result['groups'], result['banks'] = list(self.grid), list(self.groups), list(self.banks)
        return result

    def with_banks(self, banks, **kwargs):
        return replace(self, banks=tuple(banks), **kwargs)


def validate(cfg):
    """
    Checks invariants of the configuration.

    :param cfg: PipelineConfig;
    :return: None
    """
    if len(cfg.banks) == 0:
        raise ConfigError('At least one memory bank has to be selected.')
    unknown = [b for b in cfg.banks if b not in BANK_NAMES]
    if len(unknown) > 0:
        raise ConfigError(f'Unknown memory banks: {unknown}. Use a subset of {BANK_NAMES}.')
    if len(set(cfg.banks)) != len(cfg.banks):
        raise ConfigError(f'Duplicate memory banks in {cfg.banks}.')
    if cfg.fusion_mode not in FUSION_MODES:
        raise ConfigError(f'Invalid fusion mode `{cfg.fusion_mode}`, use one of {FUSION_MODES}.')
    if cfg.decision_mode not in DECISION_MODES:
        raise ConfigError(f'Invalid decision mode `{cfg.decision_mode}`, use one of {DECISION_MODES}.')
    if os.path.abspath(cfg.dataset_dir) == os.path.abspath(cfg.work_dir):
        raise ConfigError('Dataset and work directories have to differ.')
    if len(cfg.grid) != 2 or len(cfg.groups) != 2:
        raise ConfigError('`grid` and `groups` take exactly two values.')

    positive = {
        'image_size': cfg.image_size, 'grid': min(cfg.grid), 'groups': min(cfg.groups),
        'ransac_dist': cfg.ransac_dist, 'ransac_iters': cfg.ransac_iters, 'idw_eps': cfg.idw_eps,
        'point_length_scale': cfg.point_length_scale, 'd_rgb': cfg.d_rgb, 'd_pt': cfg.d_pt,
        'uff_embed': cfg.uff_embed, 'uff_lr': cfg.uff_lr, 'uff_batch': cfg.uff_batch,
        'uff_temperature': cfg.uff_temperature, 'coreset_ratio': cfg.coreset_ratio,
        'reweight_neighbours': cfg.reweight_neighbours, 'dlf_lr': cfg.dlf_lr, 'dlf_segment_cap': cfg.dlf_segment_cap,
        'fpr_limit': cfg.fpr_limit,
    }
    invalid = [name for name, value in positive.items() if not value > 0]
    if len(invalid) > 0:
        raise ConfigError(f'Parameters have to be positive: {invalid}.')
    if cfg.image_size % cfg.grid[0] != 0 or cfg.image_size % cfg.grid[1] != 0:
        raise ConfigError(f'Image size {cfg.image_size} is not divisible by grid {cfg.grid}.')
    if cfg.uff_warmup > cfg.uff_steps or cfg.uff_warmup < 0 or cfg.uff_steps < 0:
        raise ConfigError('UFF schedule requires 0 <= warmup <= steps.')
    if not 0.0 < cfg.coreset_ratio <= 1.0:
        raise ConfigError('Coreset ratio has to lie in (0, 1].')
    if not 0.0 < cfg.dlf_nu <= 1.0:
        raise ConfigError('`dlf_nu` has to lie in (0, 1].')
    if not 0.0 < cfg.fpr_limit <= 1.0:
        raise ConfigError('`fpr_limit` has to lie in (0, 1].')
    if cfg.dlf_epochs < 0:
        raise ConfigError('`dlf_epochs` cannot be negative.')


def load_config(path=None, overrides=None):
    """
    Builds pipeline configuration from module defaults, an optional JSON file and explicit overrides (in this order
    of increasing precedence).

    :param path: str; path to JSON configuration file or None
    :param overrides: dict; values taking precedence over the file, None values are ignored
    :return: PipelineConfig
    """
    values = {}
    if path is not None:
        try:
            with open(path) as f:
                values = json.load(f)
        except OSError as e:
            raise ConfigError(f'Cannot read configuration file {path}: {e}')
        except json.JSONDecodeError as e:
            raise ConfigError(f'Configuration file {path} is not valid JSON: {e}')
        if not isinstance(values, dict):
            raise ConfigError('Configuration file has to contain a JSON object.')

    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name for f in fields(PipelineConfig)}
    unknown = sorted(set(values) - known)
    if len(unknown) > 0:
        raise ConfigError(f'Unknown configuration keys: {unknown}.')

    try:
        return PipelineConfig(**values)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f'Invalid configuration value: {e}')


def save_config(cfg, path):
    with open(path, 'w') as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
