"""
Pseudo labels and reliability maps from an ensemble of head predictions.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

logger = logging.getLogger(__name__)

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class PseudoLabelError(ValueError):
    pass


@dataclass
class ProbEnsemble:
    per_head: list
    mean: np.ndarray


@dataclass
class PseudoLabelBundle:
    y_tilde: np.ndarray
    reliability: np.ndarray
    tau: float
    labels: np.ndarray = field(repr=False)
    step: int = -1


def ensemble(per_head_probs):
    """Average K probability maps of identical shape ([C,H,W] or [B,C,H,W])."""
    if not per_head_probs:
        raise PseudoLabelError('ensemble needs at least one head')
    arrays = [np.asarray(p) for p in per_head_probs]
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise PseudoLabelError(f'head shapes disagree: {shape} vs {a.shape}')
    total = np.zeros(shape, dtype=np.float64)
    for a in arrays:
        total += a
    mean = (total / len(arrays)).astype(arrays[0].dtype)
    return ProbEnsemble(per_head=arrays, mean=mean)


def largest_component(mask, connectivity=4):
    """Keep only the largest connected component of a 2-d binary mask.

    Size ties keep the component whose first pixel comes first in row-major order.
    """
    if connectivity != 4:
        raise PseudoLabelError(f'only 4-connectivity is supported, got {connectivity}')
    labelled, count = ndimage.label(mask, structure=FOUR_CONNECTED)
    if count <= 1:
        return mask.astype(bool)
    # ndimage.label numbers components in raster order of their first pixel,
    # so argmax's first-maximum rule gives the row-major tie-break.
    sizes = np.bincount(labelled.ravel())[1:]
    return labelled == (int(np.argmax(sizes)) + 1)


def cleanup_labels(labels, class_count, connectivity=4):
    """Per foreground class keep its largest component; removed pixels become background."""
    labels = np.array(labels, copy=True)
    flat = labels.reshape((-1,) + labels.shape[-2:])
    for plane in flat:
        for c in range(1, class_count):
            mask = plane == c
            if not mask.any():
                continue
            keep = largest_component(mask, connectivity)
            plane[mask & ~keep] = 0
    return labels


def one_hot(labels, class_count, channel_axis):
    eye = np.eye(class_count, dtype=np.float32)
    return np.moveaxis(eye[labels], -1, channel_axis)


def make_pseudo_label(ens, tau, cleanup=True, connectivity=4, step=-1):
    """Argmax pseudo label, optional largest-component cleanup and reliability map."""
    mean = ens.mean
    channel_axis = mean.ndim - 3
    class_count = mean.shape[channel_axis]
    if not 1.0 / class_count < tau < 1.0:
        raise PseudoLabelError(f'tau must lie in (1/{class_count}, 1), got {tau}')
    labels = np.argmax(mean, axis=channel_axis)
    reliability = (np.max(mean, axis=channel_axis) > tau).astype(np.float32)
    if cleanup:
        labels = cleanup_labels(labels, class_count, connectivity)
    y_tilde = one_hot(labels, class_count, channel_axis)
    return PseudoLabelBundle(y_tilde=y_tilde, reliability=reliability, tau=tau, labels=labels, step=step)


def reliability_fraction(bundle):
    return float(bundle.reliability.mean())


def export_pgm(array, path, class_count=None):
    """Write a 2-d label or reliability map as a binary (P5) PGM."""
    array = np.asarray(array)
    if class_count is not None and class_count > 1:
        scaled = np.round(array.astype(np.float64) * 255.0 / (class_count - 1))
    else:
        scaled = array.astype(np.float64) * 255.0
    image = Image.fromarray(np.clip(scaled, 0, 255).astype(np.uint8))
    image.save(path, format='PPM')
    return path
