"""
Evaluation: Dice, average symmetric surface distance, paired t-test, aggregation.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, special

logger = logging.getLogger(__name__)

EMPTY = None


class MetricError(ValueError):
    pass


@dataclass
class CaseResult:
    case_id: int
    dice: dict
    assd: dict
    method: str = ''
    flags: dict = field(default_factory=dict)


def dice(pred, gt, c):
    """2|P n G| / (|P| + |G|) for class c; both empty gives 1.0."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricError(f'shape mismatch {pred.shape} vs {gt.shape}')
    p = pred == c
    g = gt == c
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def _in_plane_structure(ndim):
    structure = np.zeros((3,) * ndim, dtype=bool)
    center = (1,) * (ndim - 2)
    structure[center] = ndimage.generate_binary_structure(2, 1)
    return structure


def boundary(mask):
    """Mask pixels with an in-plane 4-neighbour outside the mask or off the image."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=_in_plane_structure(mask.ndim), border_value=0)
    return mask & ~eroded


def assd(pred_mask, gt_mask):
    """Average symmetric surface distance in pixels, or EMPTY if either mask is empty.

    Masks are 2-d slices or [S,H,W] stacks; boundaries are taken in-plane and
    distances are Euclidean over all axes.
    """
    pred_mask = np.asarray(pred_mask, dtype=bool)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if pred_mask.shape != gt_mask.shape:
        raise MetricError(f'shape mismatch {pred_mask.shape} vs {gt_mask.shape}')
    if not pred_mask.any() or not gt_mask.any():
        return EMPTY
    bp, bg = boundary(pred_mask), boundary(gt_mask)
    to_gt = ndimage.distance_transform_edt(~bg)
    to_pred = ndimage.distance_transform_edt(~bp)
    total = to_gt[bp].sum() + to_pred[bg].sum()
    return float(total / (bp.sum() + bg.sum()))


def paired_t_test(a, b):
    """Two-sided paired Student's t-test; returns (t, p)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricError(f'paired samples need equal 1-d shapes, got {a.shape} and {b.shape}')
    n = a.size
    if n < 2:
        raise MetricError(f'paired t-test needs n >= 2, got {n}')
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0 or not np.isfinite(sd):
        raise MetricError('paired differences have zero variance; t statistic is undefined')
    t = d.mean() / (sd / math.sqrt(n))
    dof = n - 1
    p = special.betainc(dof / 2.0, 0.5, dof / (dof + t * t))
    return float(t), float(p)


def evaluate_case(case_id, pred, gt, class_count, method=''):
    """Per-foreground-class Dice and ASSD over a case's slice stack."""
    dices, distances = {}, {}
    for c in range(1, class_count):
        dices[c] = dice(pred, gt, c)
        distances[c] = assd(pred == c, gt == c)
    return CaseResult(case_id=case_id, dice=dices, assd=distances, method=method)


def _mean_sd(values):
    if not values:
        return float('nan'), float('nan')
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def aggregate(results):
    """Mean and population sd per (method, class); EMPTY ASSD entries are excluded and counted."""
    if not results:
        raise MetricError('nothing to aggregate')
    summary = []
    methods = sorted({r.method for r in results})
    for method in methods:
        rows = [r for r in results if r.method == method]
        classes = sorted({c for r in rows for c in r.dice})
        for c in classes + ['mean']:
            if c == 'mean':
                dices = [float(np.mean(list(r.dice.values()))) for r in rows]
                assds = []
                for r in rows:
                    defined = [v for v in r.assd.values() if v is not EMPTY]
                    if len(defined) == len(r.assd):
                        assds.append(float(np.mean(defined)))
                empty = len(rows) - len(assds)
            else:
                dices = [r.dice[c] for r in rows]
                assds = [r.assd[c] for r in rows if r.assd.get(c) is not EMPTY]
                empty = len(rows) - len(assds)
            dice_mean, dice_sd = _mean_sd(dices)
            assd_mean, assd_sd = _mean_sd(assds)
            if empty:
                logger.warning('%s class %s: %d case(s) with empty ASSD excluded', method, c, empty)
            summary.append({
                'method': method, 'class': c, 'n': len(rows),
                'dice_mean': dice_mean, 'dice_sd': dice_sd,
                'assd_mean': assd_mean, 'assd_sd': assd_sd, 'assd_empty': empty,
            })
    return summary


def mean_foreground_dice(results):
    return float(np.mean([np.mean(list(r.dice.values())) for r in results]))
