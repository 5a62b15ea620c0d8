"""
Decision layer fusion: linear one-class SVM heads over per-bank scores.

A head maps a vector of bank scores x to rho - w . x~ with x~ = (x - mean) / scale, larger is more anomalous. The
SVM is fitted in the anchored frame z = anchor - x~ (anchor = max(x~) + 1 per component), where the training cloud
lies in the positive orthant away from the origin, and mapped back afterwards.
"""
import json
import os
from dataclasses import dataclass, field

import numpy as np
from loguru import logger
from sklearn.linear_model import SGDOneClassSVM
from sklearn.preprocessing import StandardScaler

from m3dm_lite import config
from m3dm_lite.errors import BadArity, BadParam, EmptyData, NonFinite, DataError
from m3dm_lite.memory import upsample_smooth


@dataclass
class DecisionHead:
    """
    :param w: numpy.array; (B, ) one weight per bank
    :param rho: float; offset
    :param nu: float; (0, 1]
    :param mean: numpy.array; (B, ) standardisation mean
    :param scale: numpy.array; (B, ) standardisation scale, positive
    :param anchor: numpy.array; (B, ) anchor of the training frame
    :param seed: int;
    :param objective: List[float]; hinge objective after every epoch
    """
    w: np.ndarray
    rho: float
    nu: float
    mean: np.ndarray
    scale: np.ndarray
    anchor: np.ndarray = None
    seed: int = 0
    objective: list = field(default_factory=list)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(-1)
        self.anchor = np.zeros_like(self.w) if self.anchor is None else np.asarray(self.anchor, dtype=np.float64)
        self.rho = float(self.rho)
        if not 0 < self.nu <= 1:
            raise BadParam(f'nu has to be in (0, 1], got {self.nu}.')
        if not self.w.shape == self.mean.shape == self.scale.shape:
            raise BadArity(f'Head parameters disagree: w {self.w.shape}, mean {self.mean.shape}, '
                           f'scale {self.scale.shape}.')
        if np.any(self.scale <= 0):
            raise BadParam('Standardisation scale has to be positive.')
        if not np.all(np.isfinite(self.w)) or not np.isfinite(self.rho):
            raise NonFinite('Decision head parameters are not finite.')

    @property
    def n_inputs(self):
        return self.w.size

    @classmethod
    def identity(cls, w, rho, nu=0.5):
        """Head without standardisation, score = rho - w . x."""
        w = np.asarray(w, dtype=np.float64)
        return cls(w=w, rho=rho, nu=nu, mean=np.zeros_like(w), scale=np.ones_like(w))

    def to_dict(self):
        return {'w': self.w.tolist(), 'rho': self.rho, 'nu': self.nu, 'mean': self.mean.tolist(),
                'scale': self.scale.tolist(), 'anchor': self.anchor.tolist(), 'seed': self.seed,
                'objective': [float(v) for v in self.objective]}

    @classmethod
    def from_dict(cls, content):
        return cls(**content)


def one_class_objective(w, rho, z, nu):
    """
    Linear one-class SVM objective 1/2 |w|^2 + 1/(nu n) sum max(0, rho - w . z_i) - rho.

    :return: float
    """
    hinge = np.maximum(0.0, rho - z @ w)
    return float(0.5 * w @ w + hinge.sum() / (nu * z.shape[0]) - rho)


def ocsvm_train(samples, nu=None, lr=None, steps=None, seed=0):
    """
    Standardises the samples and fits a linear one-class SVM by constant step SGD, one pass over a seeded
    permutation of the samples per epoch.

    :param samples: numpy.array; (n, B) or list of B-vectors
    :param nu: float; (0, 1], `config.DLF_NU` by default
    :param lr: float; `config.DLF_LR` by default
    :param steps: int; number of epochs, `config.DLF_EPOCHS` by default
    :param seed: int;
    :return: DecisionHead
    """
    nu = config.DLF_NU if nu is None else nu
    lr = config.DLF_LR if lr is None else lr
    steps = config.DLF_EPOCHS if steps is None else steps
    if not 0 < nu <= 1:
        raise BadParam(f'nu has to be in (0, 1], got {nu}.')
    if not lr > 0:
        raise BadParam(f'Learning rate has to be positive, got {lr}.')

    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise EmptyData('One-class SVM cannot be trained without samples.')
    samples = samples.reshape(samples.shape[0], -1)
    if not np.all(np.isfinite(samples)):
        raise NonFinite('Decision training samples contain non-finite values.')

    scaler = StandardScaler().fit(samples)
    anchor = scaler.transform(samples).max(axis=0) + 1.0
    z = anchor - scaler.transform(samples)

    svm = SGDOneClassSVM(nu=nu, learning_rate='constant', eta0=lr, shuffle=False, random_state=seed)
    rng = np.random.default_rng(seed)
    objective = []
    for epoch in range(steps):
        svm.partial_fit(z[rng.permutation(z.shape[0])])
        objective.append(one_class_objective(svm.coef_.ravel(), float(np.ravel(svm.offset_)[0]), z, nu))
        if epoch % config.LOG_EVERY == 0:
            logger.debug(f'OCSVM epoch {epoch+1}/{steps}: objective {objective[-1]:.6f}')

    if steps > 0:
        w_z, rho_z = svm.coef_.ravel().astype(np.float64), float(np.ravel(svm.offset_)[0])
    else:
        w_z, rho_z = np.zeros(samples.shape[1]), 0.0
    return DecisionHead(w=-w_z, rho=rho_z - float(anchor @ w_z), nu=nu, mean=scaler.mean_, scale=scaler.scale_,
                        anchor=anchor, seed=seed, objective=objective)


def ocsvm_score(head, x):
    """
    :param head: DecisionHead;
    :param x: numpy.array; (B, ) or (n, B) bank scores
    :return: Union[float, numpy.array]; rho - w . x~, larger is more anomalous
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != head.n_inputs:
        raise BadArity(f'Head expects {head.n_inputs} inputs, got {x.shape[-1]}.')
    score = head.rho - ((x - head.mean) / head.scale) @ head.w
    return float(score) if np.ndim(score) == 0 else score


def subsample(samples, cap, seed=0):
    """
    Uniform seeded subsample of at most `cap` rows, original order kept.

    :param samples: numpy.array; (n, B)
    :param cap: int;
    :param seed: int;
    :return: numpy.array
    """
    samples = np.asarray(samples)
    if samples.shape[0] <= cap:
        return samples
    rows = np.sort(np.random.default_rng(seed).choice(samples.shape[0], size=cap, replace=False))
    logger.debug(f'Segmentation head trained on {cap}/{samples.shape[0]} patch samples.')
    return samples[rows]


def dlf_infer_scene(heads, phi, psi_maps, h, w, sigma=None):
    """
    Final scene score and segmentation map. Without heads (`sum` decision mode) the bank scores are added.

    :param heads: Tuple[DecisionHead, DecisionHead]; (scene head, segmentation head) or None
    :param phi: numpy.array; (B, ) scene scores of the banks
    :param psi_maps: numpy.array; (B, Gh, Gw) patch maps of the banks
    :param h: int; output height
    :param w: int; output width
    :param sigma: float; blur of the upsampled map
    :return: Tuple[float, numpy.array]; score a and (h, w) map S
    """
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    psi_maps = np.asarray(psi_maps, dtype=np.float64)
    if psi_maps.ndim != 3 or psi_maps.shape[0] != phi.size:
        raise BadArity(f'{phi.size} scene scores but patch maps of shape {psi_maps.shape}.')

    n_banks, gh, gw = psi_maps.shape
    if heads is None:
        score, patch_map = float(phi.sum()), psi_maps.sum(axis=0)
    else:
        head_a, head_s = heads
        score = ocsvm_score(head_a, phi)
        patch_map = ocsvm_score(head_s, psi_maps.reshape(n_banks, -1).T).reshape(gh, gw)
    return score, upsample_smooth(patch_map, h, w, sigma=sigma)


def save_head(head, path):
    dirname = os.path.dirname(path)
    if dirname:
        os.makedirs(dirname, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(head.to_dict(), f, sort_keys=True)


def load_head(path):
    try:
        with open(path) as f:
            return DecisionHead.from_dict(json.load(f))
    except FileNotFoundError:
        raise DataError(f'Decision head {path} does not exist.')
