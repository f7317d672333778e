"""
Synthetic paired-domain segmentation benchmark.

Cases are stacks of 64x64 slices with an ellipse ("LV"-like, class 1) and,
for three-class benchmarks, a surrounding ring ("MYO"-like, class 2). Both
domains draw anatomy from the same case sampler; only the imaging model
(``DomainSpec``) differs.
"""
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import rng as rng_streams

logger = logging.getLogger(__name__)

DATASET_MAGIC = b'UPLD'
DATASET_VERSION = 1
IMAGE_SIZE = 64
SPLIT_NAMES = ('train', 'val', 'test')
DEFAULT_RATIOS = (0.7, 0.1, 0.2)


class DatasetFormatError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    name: str
    class_means: tuple = (0.15, 0.85, 0.45)
    texture: float = 0.03
    noise_sigma: float = 0.03
    gamma: float = 1.0
    bias_amplitude: float = 0.0
    invert: bool = False


def case_groups(case_ids):
    """Case ids in order of first appearance, each with its image indices."""
    order = list(dict.fromkeys(int(cid) for cid in case_ids))
    return [(cid, np.flatnonzero(case_ids == cid)) for cid in order]


@dataclass
class CaseSpec:
    case_id: int
    slices: int
    class_count: int
    center: tuple
    axes: tuple
    angle: float
    thickness: float
    drift: tuple
    size: int = IMAGE_SIZE


@dataclass
class LabeledSet:
    images: np.ndarray          # [N,1,H,W] float32
    labels: np.ndarray          # [N,H,W] uint8
    case_ids: np.ndarray        # [N] int
    class_count: int
    domain: str = ''

    @property
    def N(self):
        return int(self.images.shape[0])

    @property
    def H(self):
        return int(self.images.shape[2])

    @property
    def W(self):
        return int(self.images.shape[3])

    def cases(self):
        return case_groups(self.case_ids)

    def unlabeled(self):
        return UnlabeledSet(self.images, self.case_ids, self.class_count, self.domain)

    def subset(self, indices):
        return LabeledSet(self.images[indices], self.labels[indices], self.case_ids[indices],
                          self.class_count, self.domain)


@dataclass
class UnlabeledSet:
    images: np.ndarray
    case_ids: np.ndarray
    class_count: int
    domain: str = ''

    @property
    def N(self):
        return int(self.images.shape[0])

    def cases(self):
        return case_groups(self.case_ids)


@dataclass(frozen=True)
class Benchmark:
    name: str
    class_count: int
    source: DomainSpec
    target: DomainSpec
    n_cases: int = 20
    ratios: tuple = field(default=DEFAULT_RATIOS)


SOURCE_A = DomainSpec(name='A')
TARGET_B = DomainSpec(name='B', gamma=0.5, bias_amplitude=0.35, noise_sigma=0.08)

BENCHMARKS = {
    'SYN-A-B': Benchmark('SYN-A-B', 3, SOURCE_A, TARGET_B),
    'SYN-A-B-binary': Benchmark('SYN-A-B-binary', 2, SOURCE_A, TARGET_B),
}


def sample_case(case_id, class_count, rng, size=IMAGE_SIZE):
    return CaseSpec(
        case_id=case_id,
        slices=int(rng.integers(8, 13)),
        class_count=class_count,
        center=(size / 2 + rng.uniform(-5, 5), size / 2 + rng.uniform(-5, 5)),
        axes=(rng.uniform(7, 11), rng.uniform(7, 11)),
        angle=rng.uniform(0, np.pi),
        thickness=rng.uniform(3, 5),
        drift=(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)),
        size=size,
    )


def _ellipse_radius(spec, z, grow=0.0):
    """Normalized elliptic radius on slice z for axes enlarged by ``grow``."""
    frac = z / max(spec.slices - 1, 1)
    scale = 1.0 - 0.35 * frac
    cy = spec.center[0] + spec.drift[0] * z
    cx = spec.center[1] + spec.drift[1] * z
    yy, xx = np.mgrid[0:spec.size, 0:spec.size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(spec.angle), np.sin(spec.angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    a = spec.axes[0] * scale + grow
    b = spec.axes[1] * scale + grow
    return (u / a) ** 2 + (v / b) ** 2


def render_labels(spec):
    """Analytic label maps [S,H,W] uint8."""
    labels = np.zeros((spec.slices, spec.size, spec.size), dtype=np.uint8)
    for z in range(spec.slices):
        inner = _ellipse_radius(spec, z) <= 1.0
        if spec.class_count > 2:
            outer = _ellipse_radius(spec, z, grow=spec.thickness) <= 1.0
            labels[z][outer] = 2
        labels[z][inner] = 1
    return labels


def normalize_intensity(image, low=1.0, high=99.0):
    """Clip to the 1st/99th percentiles and map linearly to [-1, 1]."""
    lo, hi = np.percentile(image, [low, high])
    if hi - lo < 1e-8:
        return np.zeros_like(image, dtype=np.float32)
    clipped = np.clip(image, lo, hi)
    return (2.0 * (clipped - lo) / (hi - lo) - 1.0).astype(np.float32)


def render_image(labels, domain, rng):
    """One raw slice under the domain's imaging model, normalized."""
    base = np.asarray(domain.class_means, dtype=np.float64)[labels]
    texture = ndimage.gaussian_filter(rng.normal(size=labels.shape), sigma=2.0)
    texture /= max(float(np.abs(texture).max()), 1e-8)
    image = np.clip(base + domain.texture * texture, 0.0, 1.0)
    image = image ** domain.gamma
    if domain.bias_amplitude:
        h, w = labels.shape
        yy, xx = np.mgrid[0:h, 0:w] / np.array([h - 1, w - 1]).reshape(2, 1, 1)
        direction = rng.uniform(-1, 1, size=2)
        field_ = 1.0 + domain.bias_amplitude * (direction[0] * (yy - 0.5) + direction[1] * (xx - 0.5)) * 2.0
        image = image * field_
    image = image + rng.normal(scale=domain.noise_sigma, size=labels.shape)
    if domain.invert:
        image = 1.0 - image
    return normalize_intensity(image)


def split_counts(n_cases, ratios=DEFAULT_RATIOS):
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f'split ratios must sum to 1, got {ratios}')
    n_train = int(round(ratios[0] * n_cases))
    n_val = int(round(ratios[1] * n_cases))
    n_test = n_cases - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise SplitError(f'{n_cases} cases are too few for split ratios {ratios}')
    return n_train, n_val, n_test


def generate(domain, n_cases, class_count=3, ratios=DEFAULT_RATIOS, seed=42):
    """Deterministic (train, val, test) LabeledSets for one domain."""
    counts = split_counts(n_cases, ratios)
    case_rng = rng_streams.stream(seed, f'cases/{domain.name}', class_count)
    noise_rng = rng_streams.stream(seed, f'noise/{domain.name}')
    specs = [sample_case(i, class_count, case_rng) for i in range(n_cases)]
    splits = []
    start = 0
    for name, count in zip(SPLIT_NAMES, counts):
        images, labels, case_ids = [], [], []
        for spec in specs[start:start + count]:
            stack = render_labels(spec)
            for lab in stack:
                images.append(render_image(lab, domain, noise_rng))
                labels.append(lab)
                case_ids.append(spec.case_id)
        start += count
        data = LabeledSet(
            images=np.stack(images)[:, None].astype(np.float32),
            labels=np.stack(labels).astype(np.uint8),
            case_ids=np.asarray(case_ids, dtype=np.int64),
            class_count=class_count,
            domain=domain.name,
        )
        logger.info('domain %s split %s: %d cases, %d images', domain.name, name, count, data.N)
        splits.append(data)
    return tuple(splits)


def shift_strength(source, target):
    """Parameter distance between two imaging models; 0 iff the models agree."""
    means = np.abs(np.subtract(source.class_means, target.class_means)).sum()
    return float(
        means
        + abs(source.texture - target.texture)
        + abs(source.noise_sigma - target.noise_sigma)
        + abs(np.log(source.gamma) - np.log(target.gamma))
        + abs(source.bias_amplitude - target.bias_amplitude)
        + float(source.invert != target.invert)
    )


# Dataset file, little-endian:
#   b'UPLD' | u16 version | u32 n_images | u32 C | u32 H | u32 W
#   | n_images x u32 case id | n_images*H*W float32 pixels | n_images*H*W u8 labels

def dataset_size(n_images, height, width):
    return 4 + 2 + 16 + 4 * n_images + 5 * n_images * height * width


def dump_dataset(data):
    header = DATASET_MAGIC + struct.pack('<H4I', DATASET_VERSION, data.N, data.class_count, data.H, data.W)
    return b''.join([
        header,
        np.asarray(data.case_ids, dtype='<u4').tobytes(),
        np.ascontiguousarray(data.images[:, 0], dtype='<f4').tobytes(),
        np.ascontiguousarray(data.labels, dtype=np.uint8).tobytes(),
    ])


def parse_dataset(raw, domain=''):
    if len(raw) < 22:
        raise DatasetFormatError('truncated dataset header')
    if raw[:4] != DATASET_MAGIC:
        raise DatasetFormatError(f'bad dataset magic {raw[:4]!r}')
    version, n, c, h, w = struct.unpack('<H4I', raw[4:22])
    if version != DATASET_VERSION:
        raise DatasetFormatError(f'unsupported dataset version {version}')
    if len(raw) != dataset_size(n, h, w):
        raise DatasetFormatError(f'dataset size {len(raw)} disagrees with header ({dataset_size(n, h, w)})')
    pos = 22
    case_ids = np.frombuffer(raw, dtype='<u4', count=n, offset=pos).astype(np.int64)
    pos += 4 * n
    pixels = np.frombuffer(raw, dtype='<f4', count=n * h * w, offset=pos).reshape(n, 1, h, w).astype(np.float32)
    pos += 4 * n * h * w
    labels = np.frombuffer(raw, dtype=np.uint8, count=n * h * w, offset=pos).reshape(n, h, w).copy()
    if n and int(labels.max()) >= c:
        raise DatasetFormatError(f'label {int(labels.max())} out of range for {c} classes')
    return LabeledSet(pixels, labels, case_ids, int(c), domain)


def save_dataset(data, path):
    path.write_bytes(dump_dataset(data))
    return path


def load_dataset(path):
    name = path.stem
    domain = name.split('_', 1)[0]
    return parse_dataset(path.read_bytes(), domain=domain)


def dataset_filename(domain_role, split):
    return f'{domain_role}_{split}.upld'
