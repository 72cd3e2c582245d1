"""Training objective: depth shuffle, cross-entropy, Gumbel soft index and
spatial smoothness."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from .deconv import STACK_DEPTH, HypothesisStack
from .errors import ConfigError, DataError

__all__ = [
    "DepthPermutation",
    "LossReport",
    "random_shuffle",
    "permute_depth",
    "cross_entropy",
    "gumbel_soft_index",
    "smoothness_loss",
    "total_loss",
]


@dataclass(frozen=True)
class DepthPermutation:
    """Bijection on depth positions; slice ``k`` moves to ``perm[k]``."""

    perm: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        perm = np.asarray(self.perm, dtype=np.int64)
        if perm.ndim != 1 or not np.array_equal(np.sort(perm), np.arange(perm.size)):
            raise ConfigError("perm must be a permutation of 0..D-1")
        object.__setattr__(self, "perm", perm)

    @classmethod
    def random(cls, seed, depth: int = STACK_DEPTH):
        return cls(np.random.default_rng(seed).permutation(depth), seed)

    @classmethod
    def identity(cls, depth: int = STACK_DEPTH):
        return cls(np.arange(depth))

    @property
    def inverse(self) -> "DepthPermutation":
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.perm.size)
        return DepthPermutation(inv, self.seed)


def permute_depth(volume, perm: DepthPermutation, axis: int = 2):
    """Reorder ``volume`` along ``axis`` so that entry ``k`` lands at ``perm[k]``."""
    return np.take(volume, perm.inverse.perm, axis=axis)


def random_shuffle(stack: HypothesisStack, gt, perm: DepthPermutation):
    """Shuffle the stack depth, its slice labels and the index map together."""
    gt = np.asarray(gt)
    data = permute_depth(stack.data, perm, axis=2)
    labels = permute_depth(stack.slice_labels, perm, axis=0)
    return HypothesisStack(data, labels, stack.n), perm.perm[gt]


def _check_gt(logits, gt):
    gt = np.asarray(gt)
    if gt.shape != logits.shape[:2]:
        raise DataError(f"index map {gt.shape} does not match logits {logits.shape[:2]}")
    if gt.size and (gt.min() < 0 or gt.max() >= logits.shape[2]):
        raise DataError("ground-truth index outside the depth range")
    return gt


def cross_entropy(logits, gt):
    """Mean per-pixel cross-entropy along depth; returns ``(loss, grad)``."""
    gt = _check_gt(logits, gt)
    logp = log_softmax(logits, axis=-1)
    picked = np.take_along_axis(logp, gt[..., None], axis=-1)[..., 0]
    count = gt.size
    grad = np.exp(logp)
    np.put_along_axis(grad, gt[..., None], np.take_along_axis(grad, gt[..., None], -1) - 1, -1)
    return float(-picked.mean()), grad / count


def gumbel_soft_index(logits, temperature: float = 0.5, noise_seed=None, noise: bool = True):
    """Expected depth index under a Gumbel-softmax relaxation.

    ``y = softmax((logits + G) / temperature)`` and the index is ``sum_k k y_k``.
    Pass ``noise=False`` for the noise-free relaxation. Returns
    ``(index_map, backprop)`` where ``backprop(upstream)`` maps a gradient on
    the index map to one on the logits.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64)
    if noise:
        u = np.random.default_rng(noise_seed).uniform(size=z.shape)
        u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - 1e-16)
        z = z - np.log(-np.log(u))
    y = softmax(z / temperature, axis=-1)
    ks = np.arange(z.shape[-1], dtype=np.float64)
    index = y @ ks

    def backprop(upstream):
        return (upstream[..., None] / temperature) * y * (ks - index[..., None])

    return index, backprop


def smoothness_loss(index_map):
    """Mean absolute forward difference over horizontal and vertical pairs."""
    m = np.asarray(index_map, dtype=np.float64)
    if m.ndim != 2 or min(m.shape) < 2:
        raise DataError("index map must be 2-D and at least 2x2")
    dh = m[:, 1:] - m[:, :-1]
    dv = m[1:, :] - m[:-1, :]
    count = dh.size + dv.size
    value = (np.abs(dh).sum() + np.abs(dv).sum()) / count
    sh, sv = np.sign(dh) / count, np.sign(dv) / count
    grad = np.zeros_like(m)
    grad[:, 1:] += sh
    grad[:, :-1] -= sh
    grad[1:, :] += sv
    grad[:-1, :] -= sv
    return float(value), grad


@dataclass(frozen=True)
class LossReport:
    ce: float
    smooth: float
    smooth_weight: float

    @property
    def total(self) -> float:
        return self.ce + self.smooth_weight * self.smooth


def total_loss(logits, gt, temperature: float = 0.5, smooth_weight: float = 0.1,
               noise_seed=None, noise: bool = True):
    """Cross-entropy plus weighted smoothness of the soft index map.

    Returns ``(LossReport, grad)`` with the gradient over ``logits``.
    """
    ce, grad = cross_entropy(logits, gt)
    index, backprop = gumbel_soft_index(logits, temperature, noise_seed, noise)
    smooth, grad_index = smoothness_loss(index)
    if smooth_weight:
        grad = grad + smooth_weight * backprop(grad_index)
    return LossReport(ce, smooth, float(smooth_weight)), grad
