"""
Exact spatial perturbations: horizontal/vertical flips and quarter-turn rotations.

A transform acts on the last two axes; flips are applied first, then the
rotation. Every transform is a pixel permutation, so the inverse is exact.
"""
import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class TransformError(ValueError):
    pass


@dataclass(frozen=True)
class SpatialTransform:
    flip_h: bool = False
    flip_v: bool = False
    rot90_quarter_turns: int = 0

    def __post_init__(self):
        if self.rot90_quarter_turns not in (0, 1, 2, 3):
            raise TransformError(f'rot90_quarter_turns must be 0..3, got {self.rot90_quarter_turns}')

    @property
    def is_identity(self):
        return not self.flip_h and not self.flip_v and self.rot90_quarter_turns == 0


IDENTITY = SpatialTransform()


def apply(t, x):
    """Apply t to a numpy array or a taped Tensor."""
    h, w = x.shape[-2:]
    if t.rot90_quarter_turns % 2 and h != w:
        raise TransformError(f'odd rotation needs a square input, got {h}x{w}')
    if isinstance(x, ad.Tensor):
        if t.flip_h:
            x = ad.flip(x, -1)
        if t.flip_v:
            x = ad.flip(x, -2)
        if t.rot90_quarter_turns:
            x = ad.rot90(x, t.rot90_quarter_turns)
        return x
    if t.flip_h:
        x = np.flip(x, axis=-1)
    if t.flip_v:
        x = np.flip(x, axis=-2)
    if t.rot90_quarter_turns:
        x = np.rot90(x, t.rot90_quarter_turns, axes=(-2, -1))
    return np.ascontiguousarray(x)


def inverse(t):
    # A single reflection conjugates the rotation (F R = R^-1 F), so the
    # rotation amount survives; zero or two flips commute with it.
    if t.flip_h != t.flip_v:
        return t
    return SpatialTransform(t.flip_h, t.flip_v, (-t.rot90_quarter_turns) % 4)


def compose(second, first):
    """The transform equal to applying ``first`` then ``second``."""
    marker = np.arange(9).reshape(3, 3)
    target = apply(second, apply(first, marker))
    for candidate in all_transforms():
        if np.array_equal(apply(candidate, marker), target):
            return candidate
    raise TransformError('transform family is not closed')  # unreachable


def all_transforms():
    return [SpatialTransform(bool(fh), bool(fv), r)
            for r, fv, fh in itertools.product(range(4), (0, 1), (0, 1))]


def sample(rng):
    """Uniform over the 16 flip x flip x rotation combinations."""
    index = int(rng.integers(16))
    return SpatialTransform(bool(index & 1), bool(index >> 1 & 1), index >> 2)
