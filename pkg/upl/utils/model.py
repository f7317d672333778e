"""
Encoder-decoder segmentation network with K decoder heads.

The encoder ``g`` is shared; every head is a whole decoder ``h^k`` preceded
by its own dropout gate. A freshly built model has one head and no active
dropout; ``grow`` clones the head and switches the gates on.
"""
import copy
import io
import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad

logger = logging.getLogger(__name__)

MAX_HEADS = 8
CHECKPOINT_MAGIC = b'UPLC'
CHECKPOINT_VERSION = 1
LEAKY_SLOPE = 0.01


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    levels: int = 2
    base_channels: int = 8
    kernel: int = 3
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f'levels must be >= 1, got {self.levels}')
        if self.base_channels < 2:
            raise ValueError(f'base_channels must be >= 2, got {self.base_channels}')
        if self.kernel % 2 == 0:
            raise ValueError(f'kernel must be odd, got {self.kernel}')
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f'dropout_rate must lie in [0, 1), got {self.dropout_rate}')

    def channels(self, level):
        return self.base_channels * 2 ** level


class Conv:
    def __init__(self, cin, cout, kernel, rng, dtype=ad.DTYPE):
        fan_in = cin * kernel * kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, kernel, kernel))
        self.weight = ad.Parameter(w, dtype=dtype)
        self.bias = ad.Parameter(np.zeros(cout), dtype=dtype)
        self.padding = (kernel - 1) // 2

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, self.padding)

    def named_parameters(self, prefix):
        yield f'{prefix}.weight', self.weight
        yield f'{prefix}.bias', self.bias


class ConvBlock:
    """Two conv + batch-norm + leaky-ReLU stages."""

    def __init__(self, cin, cout, kernel, rng, dtype=ad.DTYPE):
        self.conv1 = Conv(cin, cout, kernel, rng, dtype)
        self.bn1 = ad.BNState(cout, dtype)
        self.conv2 = Conv(cout, cout, kernel, rng, dtype)
        self.bn2 = ad.BNState(cout, dtype)

    def __call__(self, x, mode):
        x = ad.leaky_relu(ad.batchnorm2d(self.conv1(x), self.bn1, mode), LEAKY_SLOPE)
        return ad.leaky_relu(ad.batchnorm2d(self.conv2(x), self.bn2, mode), LEAKY_SLOPE)

    def named_parameters(self, prefix):
        yield from self.conv1.named_parameters(f'{prefix}.conv1')
        yield f'{prefix}.bn1.gamma', self.bn1.gamma
        yield f'{prefix}.bn1.beta', self.bn1.beta
        yield from self.conv2.named_parameters(f'{prefix}.conv2')
        yield f'{prefix}.bn2.gamma', self.bn2.gamma
        yield f'{prefix}.bn2.beta', self.bn2.beta

    def named_bn(self, prefix):
        yield f'{prefix}.bn1', self.bn1
        yield f'{prefix}.bn2', self.bn2


class Encoder:
    def __init__(self, arch, rng, dtype=ad.DTYPE):
        self.blocks = []
        cin = 1
        for level in range(arch.levels + 1):
            cout = arch.channels(level)
            self.blocks.append(ConvBlock(cin, cout, arch.kernel, rng, dtype))
            cin = cout

    def __call__(self, x, mode):
        """Returns the skip features of every level, bottleneck last."""
        features = []
        for i, block in enumerate(self.blocks):
            if i > 0:
                x = ad.maxpool2d(x)
            x = block(x, mode)
            features.append(x)
        return features

    def named_parameters(self):
        for i, block in enumerate(self.blocks):
            yield from block.named_parameters(f'encoder.{i}')

    def named_bn(self):
        for i, block in enumerate(self.blocks):
            yield from block.named_bn(f'encoder.{i}')


class Decoder:
    """One prediction head: upsample + conv, skip concatenation, conv block, 1x1 classifier."""

    def __init__(self, arch, class_count, rng, dtype=ad.DTYPE):
        self.ups = []
        self.blocks = []
        for level in range(arch.levels, 0, -1):
            high, low = arch.channels(level), arch.channels(level - 1)
            self.ups.append(Conv(high, low, arch.kernel, rng, dtype))
            self.blocks.append(ConvBlock(2 * low, low, arch.kernel, rng, dtype))
        self.classifier = Conv(arch.channels(0), class_count, 1, rng, dtype)
        self.dropout_rate = 0.0

    def __call__(self, features, mode, rng, dropout=True):
        rate = self.dropout_rate if dropout else 0.0
        features = [ad.dropout(f, rate, rng, mode) for f in features]
        x = features[-1]
        for up, block, skip in zip(self.ups, self.blocks, reversed(features[:-1])):
            x = up(ad.upsample2x(x))
            x = block(ad.concat([x, skip], axis=1), mode)
        return ad.softmax_channel(self.classifier(x))

    def named_parameters(self, prefix):
        for i, (up, block) in enumerate(zip(self.ups, self.blocks)):
            yield from up.named_parameters(f'{prefix}.up{i}')
            yield from block.named_parameters(f'{prefix}.block{i}')
        yield from self.classifier.named_parameters(f'{prefix}.classifier')

    def named_bn(self, prefix):
        for i, block in enumerate(self.blocks):
            yield from block.named_bn(f'{prefix}.block{i}')


class SegModel:
    def __init__(self, arch, class_count, encoder, heads):
        self.arch = arch
        self.class_count = class_count
        self.encoder = encoder
        self.heads = heads

    @classmethod
    def build(cls, arch, class_count, rng, dtype=ad.DTYPE):
        if class_count < 2:
            raise ValueError(f'class_count must be >= 2, got {class_count}')
        encoder = Encoder(arch, rng, dtype)
        head = Decoder(arch, class_count, rng, dtype)
        return cls(arch, class_count, encoder, [head])

    @property
    def K(self):
        return len(self.heads)

    def check_input(self, x):
        h, w = x.shape[-2:]
        step = 2 ** self.arch.levels
        if h % step or w % step:
            raise ad.ShapeError(f'spatial size {h}x{w} is not divisible by {step}')

    def forward_head(self, x, k, mode, rng, dropout=True):
        """Softmax probabilities [B,C,H,W] of head k (0-based)."""
        if not 0 <= k < self.K:
            raise IndexError(f'head index {k} out of range for {self.K} heads')
        x = ad.as_tensor(x)
        self.check_input(x)
        features = self.encoder(x, mode)
        return self.heads[k](features, mode, rng, dropout=dropout)

    def named_parameters(self):
        yield from self.encoder.named_parameters()
        for k, head in enumerate(self.heads):
            yield from head.named_parameters(f'head.{k}')

    def named_bn(self):
        yield from self.encoder.named_bn()
        for k, head in enumerate(self.heads):
            yield from head.named_bn(f'head.{k}')

    def parameters(self):
        return dict(self.named_parameters())

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def clone(self):
        model = copy.deepcopy(self)
        model.zero_grad()
        return model

    def state_dict(self):
        """Named float arrays: parameters then BN running statistics."""
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, bn in self.named_bn():
            state[f'{name}.running_mean'] = bn.running_mean.copy()
            state[f'{name}.running_var'] = bn.running_var.copy()
            state[f'{name}.tracked'] = np.array([bn.tracked], dtype=np.float32)
        return state

    def load_state_dict(self, state):
        params = self.parameters()
        expected = set(params)
        for name, bn in self.named_bn():
            expected.update({f'{name}.running_mean', f'{name}.running_var', f'{name}.tracked'})
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise CheckpointError(f'state mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}')
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise CheckpointError(f'{name}: shape {state[name].shape} disagrees with arch {p.shape}')
            p.data = np.array(state[name], dtype=p.dtype)
        for name, bn in self.named_bn():
            for field in ('running_mean', 'running_var'):
                value = state[f'{name}.{field}']
                if value.shape != (bn.channels,):
                    raise CheckpointError(f'{name}.{field}: shape {value.shape} disagrees with arch')
                setattr(bn, field, np.array(value, dtype=bn.gamma.dtype))
            bn.tracked = int(state[f'{name}.tracked'][0])


def grow(model, K):
    """Target Domain Growing: K clones of the single pre-trained head, dropout gates on."""
    if K < 1:
        raise ValueError(f'K must be >= 1, got {K}')
    if K > MAX_HEADS:
        raise ValueError(f'K must be <= {MAX_HEADS}, got {K}')
    if model.K != 1:
        raise ValueError(f'grow expects a single-head model, got {model.K} heads')
    grown = model.clone()
    head = grown.heads[0]
    head.dropout_rate = model.arch.dropout_rate
    grown.heads = [head] + [copy.deepcopy(head) for _ in range(K - 1)]
    logger.debug('grew model to %d heads', K)
    return grown


def parameter_groups(model, selector='all'):
    params = model.parameters()
    if selector == 'all':
        return params
    if selector == 'bn_affine_only':
        return {name: p for name, p in params.items() if name.endswith(('.gamma', '.beta'))}
    raise ValueError(f'unknown parameter selector {selector!r}')


def parameter_count(params):
    return int(sum(p.data.size for p in params.values()))


# Checkpoint format:
#   b'UPLC' | u16 version | u32 header length | header (utf-8 JSON)
#   | u32 entry count | entries | u32 CRC32 of everything after the version
# entry: u16 name length | name utf-8 | u8 ndim | ndim x u32 | float32 LE payload

def _pack_entry(buf, name, array):
    raw = name.encode('utf-8')
    array = np.ascontiguousarray(array, dtype='<f4')
    buf.write(struct.pack('<H', len(raw)))
    buf.write(raw)
    buf.write(struct.pack('<B', array.ndim))
    buf.write(struct.pack(f'<{array.ndim}I', *array.shape))
    buf.write(array.tobytes())


def checkpoint_save(model, optimizer_state=None, meta=None):
    header = {
        'arch': asdict(model.arch),
        'class_count': model.class_count,
        'K': model.K,
        'dropout_active': [head.dropout_rate for head in model.heads],
        'meta': meta or {},
        'optimizer': None,
    }
    entries = dict(model.state_dict())
    if optimizer_state is not None:
        header['optimizer'] = {'step_count': optimizer_state['step_count'], 'lr': optimizer_state['lr']}
        for name, value in optimizer_state['m'].items():
            entries[f'adam.m.{name}'] = value
        for name, value in optimizer_state['v'].items():
            entries[f'adam.v.{name}'] = value
    body = io.BytesIO()
    raw_header = json.dumps(header, sort_keys=True).encode('utf-8')
    body.write(struct.pack('<I', len(raw_header)))
    body.write(raw_header)
    body.write(struct.pack('<I', len(entries)))
    for name in sorted(entries):
        _pack_entry(body, name, entries[name])
    payload = body.getvalue()
    return CHECKPOINT_MAGIC + struct.pack('<H', CHECKPOINT_VERSION) + payload + struct.pack('<I', zlib.crc32(payload))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError('truncated checkpoint stream')
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_load(data):
    """Returns (model, optimizer_state or None, meta)."""
    if len(data) < 10:
        raise CheckpointError('truncated checkpoint stream')
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f'bad checkpoint magic {data[:4]!r}')
    (version,) = struct.unpack('<H', data[4:6])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f'unsupported checkpoint version {version}')
    payload, (crc,) = data[6:-4], struct.unpack('<I', data[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError('checkpoint CRC mismatch (corrupted or truncated)')
    reader = _Reader(payload)
    (header_len,) = reader.unpack('<I')
    try:
        header = json.loads(reader.take(header_len).decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f'unreadable checkpoint header: {exc}') from exc
    (count,) = reader.unpack('<I')
    entries = {}
    for _ in range(count):
        (name_len,) = reader.unpack('<H')
        name = reader.take(name_len).decode('utf-8')
        (ndim,) = reader.unpack('<B')
        shape = reader.unpack(f'<{ndim}I') if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        entries[name] = np.frombuffer(reader.take(4 * size), dtype='<f4').reshape(shape).astype(np.float32)
    if reader.pos != len(payload):
        raise CheckpointError('trailing bytes in checkpoint body')

    arch = ArchConfig(**header['arch'])
    model = SegModel.build(arch, header['class_count'], np.random.default_rng(0))
    if header['K'] > 1:
        model = grow(model, header['K'])
    for head, rate in zip(model.heads, header['dropout_active']):
        head.dropout_rate = rate
    model.load_state_dict({k: v for k, v in entries.items() if not k.startswith('adam.')})

    optimizer_state = None
    if header['optimizer'] is not None:
        optimizer_state = {
            'step_count': header['optimizer']['step_count'],
            'lr': header['optimizer']['lr'],
            'm': {k[len('adam.m.'):]: v for k, v in entries.items() if k.startswith('adam.m.')},
            'v': {k[len('adam.v.'):]: v for k, v in entries.items() if k.startswith('adam.v.')},
        }
    return model, optimizer_state, header['meta']
