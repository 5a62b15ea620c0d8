"""
Unsupervised feature fusion.

Two MLPs (chi_rgb, chi_pt) map image and point patch features to a common space; two linear projection heads
(sigma_rgb, sigma_pt) feed a patch-wise contrastive objective where the image and point features of the same
(scene, patch) position are the positives. The fused patch feature is the concatenation of both MLP outputs.
Gradients are derived by hand, all arithmetic is float64.
"""
import json
import os
from dataclasses import dataclass, field

import numpy as np
from loguru import logger
from scipy.special import log_softmax, softmax

from m3dm_lite import config
from m3dm_lite.errors import BadArity, EmptyData, NonFinite, BadParam, DataError
from m3dm_lite.geometry import PatchGrid
from m3dm_lite.utils.tensor_file import FLOAT64, save_array, load_array

BRANCHES = ('rgb', 'pt')
_GELU_K = np.sqrt(2.0 / np.pi)
_GELU_C = 0.044715
_NORM_FLOOR = 1e-12
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class FusionNetwork:
    """
    Weights are stored row-vector style (`x @ w + b`) under the names
    `chi_<branch>.w1, .b1, .w2, .b2` and `sigma_<branch>.w, .b` for both branches.
    """
    params: dict
    loss_history: list = field(default_factory=list)

    def chi_dims(self, branch):
        """:return: Tuple[int, int]; input and output dimension of the branch MLP"""
        return self.params[f'chi_{branch}.w1'].shape[0], self.params[f'chi_{branch}.w2'].shape[1]

    @property
    def embed_dim(self):
        return self.params['sigma_rgb.w'].shape[1]

    @property
    def fused_dim(self):
        return self.chi_dims('rgb')[1] + self.chi_dims('pt')[1]

    def copy(self):
        return FusionNetwork(params={k: v.copy() for k, v in self.params.items()},
                             loss_history=list(self.loss_history))


@dataclass
class TrainConfig:
    lr: float = config.UFF_LR
    warmup_steps: int = config.UFF_WARMUP
    total_steps: int = config.UFF_STEPS
    batch_size: int = config.UFF_BATCH
    temperature: float = config.UFF_TEMPERATURE
    seed: int = 0
    weight_decay: float = config.UFF_WEIGHT_DECAY
    clip_norm: float = config.UFF_CLIP_NORM

    def __post_init__(self):
        if not self.lr > 0 or not self.temperature > 0:
            raise BadParam('Learning rate and temperature have to be positive.')
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise BadParam(f'Invalid schedule: warmup {self.warmup_steps}, total {self.total_steps}.')
        if self.batch_size < 2:
            raise BadParam('Contrastive batches need at least 2 rows.')

    @classmethod
    def from_pipeline(cls, cfg):
        return cls(lr=cfg.uff_lr, warmup_steps=cfg.uff_warmup, total_steps=cfg.uff_steps, batch_size=cfg.uff_batch,
                   temperature=cfg.uff_temperature, seed=cfg.uff_seed, weight_decay=cfg.uff_weight_decay,
                   clip_norm=cfg.uff_clip_norm)


def init_network(d_rgb, d_pt, embed_dim, seed=0, out_rgb=None, out_pt=None, rng=None):
    """
    Seeded uniform fan-in initialisation, zero biases. Hidden layers are 4x wider than the input, MLP outputs keep
    the input width unless given.

    :param d_rgb: int;
    :param d_pt: int;
    :param embed_dim: int; shared output width of both projection heads
    :param seed: int;
    :param out_rgb: int;
    :param out_pt: int;
    :param rng: numpy.random.Generator; used instead of `seed` if given
    :return: FusionNetwork
    """
    rng = np.random.default_rng(seed) if rng is None else rng
    params = {}

    def dense(prefix, suffix, n_in, n_out):
        bound = 1.0 / np.sqrt(n_in)
        params[f'{prefix}.w{suffix}'] = rng.uniform(-bound, bound, size=(n_in, n_out))
        params[f'{prefix}.b{suffix}'] = np.zeros(n_out)

    for branch, d_in, d_out in (('rgb', d_rgb, out_rgb or d_rgb), ('pt', d_pt, out_pt or d_pt)):
        dense(f'chi_{branch}', '1', d_in, 4 * d_in)
        dense(f'chi_{branch}', '2', 4 * d_in, d_out)
        dense(f'sigma_{branch}', '', d_out, embed_dim)
    return FusionNetwork(params=params)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_K * (x + _GELU_C * x ** 3)))


def gelu_grad(x):
    t = np.tanh(_GELU_K * (x + _GELU_C * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * _GELU_K * (1.0 + 3.0 * _GELU_C * x ** 2)


def chi(net, branch, x):
    """Branch MLP, (B, d_in) -> (B, d_out)."""
    p = net.params
    return gelu(x @ p[f'chi_{branch}.w1'] + p[f'chi_{branch}.b1']) @ p[f'chi_{branch}.w2'] + p[f'chi_{branch}.b2']


def _branch_forward(net, branch, x):
    p = net.params
    a1 = x @ p[f'chi_{branch}.w1'] + p[f'chi_{branch}.b1']
    h1 = gelu(a1)
    u = h1 @ p[f'chi_{branch}.w2'] + p[f'chi_{branch}.b2']
    z = u @ p[f'sigma_{branch}.w'] + p[f'sigma_{branch}.b']
    norm = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), _NORM_FLOOR)
    h = z / norm
    return h, u, (x, a1, h1, u, h, norm)


def _branch_backward(net, branch, cache, dh, grads):
    p = net.params
    x, a1, h1, u, h, norm = cache
    dz = (dh - h * np.sum(h * dh, axis=1, keepdims=True)) / norm
    grads[f'sigma_{branch}.w'] = u.T @ dz
    grads[f'sigma_{branch}.b'] = dz.sum(axis=0)
    du = dz @ p[f'sigma_{branch}.w'].T
    grads[f'chi_{branch}.w2'] = h1.T @ du
    grads[f'chi_{branch}.b2'] = du.sum(axis=0)
    da1 = (du @ p[f'chi_{branch}.w2'].T) * gelu_grad(a1)
    grads[f'chi_{branch}.w1'] = x.T @ da1
    grads[f'chi_{branch}.b1'] = da1.sum(axis=0)


def _check_inputs(net, f_rgb, f_pt):
    f_rgb = np.atleast_2d(np.asarray(f_rgb, dtype=np.float64))
    f_pt = np.atleast_2d(np.asarray(f_pt, dtype=np.float64))
    if f_rgb.shape[1] != net.chi_dims('rgb')[0] or f_pt.shape[1] != net.chi_dims('pt')[0] \
            or f_rgb.shape[0] != f_pt.shape[0]:
        raise BadArity(f'Inputs {f_rgb.shape}, {f_pt.shape} do not match network dims '
                       f'{net.chi_dims("rgb")[0]}, {net.chi_dims("pt")[0]}.')
    return f_rgb, f_pt


def uff_forward(net, f_rgb, f_pt):
    """
    :param net: FusionNetwork;
    :param f_rgb: numpy.array; (D_rgb, ) or (B, D_rgb)
    :param f_pt: numpy.array; (D_pt, ) or (B, D_pt)
    :return: Tuple[numpy.array, numpy.array, numpy.array]; L2-normalised projections h_rgb, h_pt and the fused
             (unnormalised) feature, with the batch axis dropped for 1-D inputs
    """
    single = np.ndim(f_rgb) == 1
    f_rgb, f_pt = _check_inputs(net, f_rgb, f_pt)
    h_rgb, u_rgb, _ = _branch_forward(net, 'rgb', f_rgb)
    h_pt, u_pt, _ = _branch_forward(net, 'pt', f_pt)
    f_fs = np.concatenate([u_rgb, u_pt], axis=1)
    if single:
        return h_rgb[0], h_pt[0], f_fs[0]
    return h_rgb, h_pt, f_fs


def infonce_loss(h_rgb, h_pt, temperature=None):
    """
    Symmetric InfoNCE: cross entropy of the temperature scaled similarity matrix with positives on the diagonal,
    averaged over the rows of both directions.

    :param h_rgb: numpy.array; (B, E) L2-normalised rows
    :param h_pt: numpy.array; (B, E)
    :param temperature: float; `config.UFF_TEMPERATURE` by default
    :return: Tuple[float, numpy.array, numpy.array]; loss and its gradients w.r.t. h_rgb and h_pt
    """
    temperature = config.UFF_TEMPERATURE if temperature is None else temperature
    h_rgb, h_pt = np.asarray(h_rgb, dtype=np.float64), np.asarray(h_pt, dtype=np.float64)
    if h_rgb.ndim != 2 or h_rgb.shape != h_pt.shape or h_rgb.shape[0] < 2:
        raise BadArity(f'Contrastive inputs have to be equal (B >= 2, E) matrices, got {h_rgb.shape}, {h_pt.shape}.')
    if not (np.all(np.isfinite(h_rgb)) and np.all(np.isfinite(h_pt))):
        raise NonFinite('Contrastive inputs contain non-finite values.')

    n = h_rgb.shape[0]
    logits = h_rgb @ h_pt.T / temperature
    diagonal = np.arange(n)
    loss = -0.5 * (log_softmax(logits, axis=1)[diagonal, diagonal].mean()
                   + log_softmax(logits, axis=0)[diagonal, diagonal].mean())

    d_logits = (softmax(logits, axis=1) + softmax(logits, axis=0)) / (2.0 * n)
    d_logits[diagonal, diagonal] -= 1.0 / n
    return float(loss), d_logits @ h_pt / temperature, d_logits.T @ h_rgb / temperature


def uff_loss_and_grads(net, x_rgb, x_pt, temperature=None):
    """
    Full forward pass (MLP, projection, normalisation, loss) and exact gradients of every weight.

    :return: Tuple[float, dict]
    """
    x_rgb, x_pt = _check_inputs(net, x_rgb, x_pt)
    h_rgb, _, cache_rgb = _branch_forward(net, 'rgb', x_rgb)
    h_pt, _, cache_pt = _branch_forward(net, 'pt', x_pt)
    loss, dh_rgb, dh_pt = infonce_loss(h_rgb, h_pt, temperature)

    grads = {}
    _branch_backward(net, 'rgb', cache_rgb, dh_rgb, grads)
    _branch_backward(net, 'pt', cache_pt, dh_pt, grads)
    return loss, grads


def learning_rate(step, cfg):
    """
    Cosine warm-up over `warmup_steps` followed by cosine decay to zero at `total_steps`.

    :param step: int; zero based
    :param cfg: TrainConfig;
    :return: float
    """
    if step < cfg.warmup_steps:
        return cfg.lr * 0.5 * (1.0 - np.cos(np.pi * (step + 1) / cfg.warmup_steps))
    decay_steps = max(cfg.total_steps - cfg.warmup_steps, 1)
    return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * (step - cfg.warmup_steps) / decay_steps))


def co_occupied_features(dataset):
    """
    Stacks features of patches occupied in both modalities.

    :param dataset: List[Tuple[PatchGrid, PatchGrid]]; (rgb, pt) grids per scene
    :return: Tuple[numpy.array, numpy.array]
    """
    x_rgb, x_pt = [], []
    for rgb, pt in dataset:
        if rgb.shape != pt.shape:
            raise BadArity(f'Grids are not aligned: {rgb.shape} vs {pt.shape}.')
        occupied = np.logical_and(rgb.occupancy, pt.occupancy)
        x_rgb.append(rgb.data[occupied])
        x_pt.append(pt.data[occupied])
    if len(x_rgb) == 0 or sum(len(x) for x in x_rgb) < 2:
        raise EmptyData('Fusion training needs at least 2 patches occupied in both modalities.')
    return np.concatenate(x_rgb), np.concatenate(x_pt)


def uff_train(dataset, cfg, embed_dim=None, net=None):
    """
    Contrastive training of the fusion network with AdamW (decoupled weight decay on weight matrices), cosine
    warm-up/decay schedule and global gradient norm clipping. Batches are sampled without replacement from all
    co-occupied (scene, patch) pairs.

    :param dataset: List[Tuple[PatchGrid, PatchGrid]]; (rgb, pt) grids of nominal training scenes
    :param cfg: TrainConfig;
    :param embed_dim: int; projection width, `config.UFF_EMBED` by default
    :param net: FusionNetwork; initial weights, seeded initialisation if None
    :return: FusionNetwork; with `loss_history` of every step
    """
    embed_dim = config.UFF_EMBED if embed_dim is None else embed_dim
    x_rgb, x_pt = co_occupied_features(dataset)
    rng = np.random.default_rng(cfg.seed)
    if net is None:
        net = init_network(x_rgb.shape[1], x_pt.shape[1], embed_dim, rng=rng)
    else:
        net = net.copy()

    params = net.params
    first_moment = {k: np.zeros_like(v) for k, v in params.items()}
    second_moment = {k: np.zeros_like(v) for k, v in params.items()}
    beta1, beta2 = ADAM_BETAS
    batch = min(cfg.batch_size, x_rgb.shape[0])

    for step in range(cfg.total_steps):
        rows = rng.choice(x_rgb.shape[0], size=batch, replace=False)
        loss, grads = uff_loss_and_grads(net, x_rgb[rows], x_pt[rows], cfg.temperature)
        net.loss_history.append(loss)

        grad_norm = np.sqrt(sum(float(np.sum(g ** 2)) for g in grads.values()))
        scale = min(1.0, cfg.clip_norm / grad_norm) if grad_norm > 0 else 1.0
        lr = learning_rate(step, cfg)
        for name, grad in grads.items():
            grad = grad * scale
            first_moment[name] = beta1 * first_moment[name] + (1.0 - beta1) * grad
            second_moment[name] = beta2 * second_moment[name] + (1.0 - beta2) * grad ** 2
            m_hat = first_moment[name] / (1.0 - beta1 ** (step + 1))
            v_hat = second_moment[name] / (1.0 - beta2 ** (step + 1))
            if params[name].ndim == 2:
                params[name] -= lr * cfg.weight_decay * params[name]
            params[name] -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)

        if step % config.LOG_EVERY == 0 or step == cfg.total_steps - 1:
            logger.debug(f'UFF step {step+1}/{cfg.total_steps}: loss {loss:.5f}, lr {lr:.2e}')

    if cfg.total_steps > 0:
        logger.info(f'UFF trained on {x_rgb.shape[0]} patch pairs, final loss {net.loss_history[-1]:.5f}.')
    return net


def fuse_grid(net, rgb, pt):
    """
    Fused patch grid: concatenated MLP outputs where both modalities are occupied. Without a network the raw
    features are concatenated.

    :param net: FusionNetwork; or None for plain concatenation
    :param rgb: PatchGrid;
    :param pt: PatchGrid;
    :return: PatchGrid
    """
    if rgb.shape != pt.shape:
        raise BadArity(f'Grids are not aligned: {rgb.shape} vs {pt.shape}.')
    occupied = np.logical_and(rgb.occupancy, pt.occupancy)
    dim = rgb.dim + pt.dim if net is None else net.fused_dim
    data = np.zeros(rgb.shape + (dim, ))
    if np.any(occupied):
        if net is None:
            data[occupied] = np.concatenate([rgb.data[occupied], pt.data[occupied]], axis=1)
        else:
            f_rgb, f_pt = _check_inputs(net, rgb.data[occupied], pt.data[occupied])
            data[occupied] = np.concatenate([chi(net, 'rgb', f_rgb), chi(net, 'pt', f_pt)], axis=1)
    return PatchGrid(data=data, occupancy=occupied)


def save_network(net, directory, manifest=None):
    """
    Checkpoint: `manifest.json` (dims, hyper-parameters, loss history) plus one tensor file per weight.

    :param net: FusionNetwork;
    :param directory: str;
    :param manifest: dict; extra entries, e.g. hyper-parameters and seed
    :return: None
    """
    os.makedirs(directory, exist_ok=True)
    content = dict(manifest or {})
    content.update({
        'weights': {name: list(value.shape) for name, value in sorted(net.params.items())},
        'd_rgb': net.chi_dims('rgb')[0], 'd_pt': net.chi_dims('pt')[0], 'embed_dim': net.embed_dim,
        'loss_history': [float(v) for v in net.loss_history],
    })
    for name, value in net.params.items():
        save_array(os.path.join(directory, f'{name}.t'), value, dtype_tag=FLOAT64)
    with open(os.path.join(directory, 'manifest.json'), 'w') as f:
        json.dump(content, f, indent=2, sort_keys=True)


def load_network(directory):
    path = os.path.join(directory, 'manifest.json')
    try:
        with open(path) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise DataError(f'Fusion checkpoint {path} does not exist.')
    params = {name: load_array(os.path.join(directory, f'{name}.t')).astype(np.float64)
              for name in manifest['weights']}
    return FusionNetwork(params=params, loss_history=list(manifest.get('loss_history', [])))
