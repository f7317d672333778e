"""
Training objectives on taped probability maps.

Every loss is computed per image and averaged over the batch. Probability
maps are ``[B,C,H,W]`` tensors (an unbatched ``[C,H,W]`` map is accepted and
treated as a batch of one); pseudo labels and reliability maps are plain
numpy arrays and never carry gradients.
"""
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

logger = logging.getLogger(__name__)

ETA = 1e-5
LOG_CLAMP = 1e-12


class LossInputError(ValueError):
    pass


@dataclass
class LossValue:
    value: ad.Tensor
    name: str

    def item(self):
        return float(self.value.data)

    def __float__(self):
        return self.item()


def _batched(p):
    p = ad.as_tensor(p)
    if p.ndim == 3:
        return p[None]
    if p.ndim != 4:
        raise LossInputError(f'expected a [C,H,W] or [B,C,H,W] map, got shape {p.shape}')
    return p


def _batched_array(a, ndim):
    a = np.asarray(a)
    return a[None] if a.ndim == ndim - 1 else a


def _check_target(y, M, shape):
    if y.shape != shape:
        raise LossInputError(f'label shape {y.shape} disagrees with prediction {shape}')
    if M.shape != (shape[0],) + shape[2:]:
        raise LossInputError(f'reliability shape {M.shape} disagrees with prediction {shape}')
    if not np.isin(M, (0, 1)).all():
        raise LossInputError('reliability map must be binary')
    if not (np.isin(y, (0, 1)).all() and np.all(y.sum(axis=1) == 1)):
        raise LossInputError('pseudo label must be one-hot over the channel axis')


def weighted_dice(p, y_tilde, M):
    """Reliability-weighted Dice loss, background included in the class average."""
    p = _batched(p)
    y = _batched_array(y_tilde, 4).astype(p.dtype)
    M = _batched_array(M, 3).astype(p.dtype)
    _check_target(y, M, p.shape)
    mask = M[:, None]
    inter = (p * (y * mask)).sum(axis=(2, 3))
    denom = (p * mask).sum(axis=(2, 3)) + (y * mask).sum(axis=(2, 3)) + ETA
    per_class = 2.0 * inter / denom
    per_image = 1.0 - per_class.mean(axis=1)
    return LossValue(per_image.mean(), 'w-dice')


def dice_loss_supervised(p, y):
    """Supervised Dice loss: weighted Dice with every pixel reliable."""
    y = np.asarray(y)
    spatial = (y.shape[0],) + y.shape[2:] if y.ndim == 4 else y.shape[1:]
    loss = weighted_dice(p, y, np.ones(spatial, dtype=np.float32))
    loss.name = 'dice'
    return loss


def tfs_loss(second_pass_heads, bundle, K=None):
    """Twice-forward-pass supervision: mean weighted Dice of the second-pass heads."""
    if not second_pass_heads:
        raise LossInputError('tfs_loss needs at least one head')
    if K is not None and len(second_pass_heads) != K:
        raise LossInputError(f'{len(second_pass_heads)} heads given, model has {K}')
    terms = [weighted_dice(p, bundle.y_tilde, bundle.reliability).value for p in second_pass_heads]
    return LossValue(ad.stack_mean(terms), 'tfs')


def _entropy_map(p):
    """Per-pixel entropy [B,H,W] in nats; 0 log 0 is 0 through the clamp."""
    return -(p * ad.log(ad.clip_min(p, LOG_CLAMP))).sum(axis=1)


def mean_entropy(second_pass_heads):
    """Entropy of the across-head mean prediction, averaged over pixels and images."""
    mean = ad.stack_mean([_batched(p) for p in second_pass_heads])
    return LossValue(_entropy_map(mean).mean(), 'ment')


def per_head_entropy(heads):
    """Average over heads of each head's own pixel-mean entropy."""
    terms = [_entropy_map(_batched(p)).mean() for p in heads]
    return LossValue(ad.stack_mean(terms), 'ent')


def total_loss(tfs, ment, lam):
    if lam < 0:
        raise LossInputError(f'lambda must be >= 0, got {lam}')
    return LossValue(tfs.value + lam * ment.value, 'total')
