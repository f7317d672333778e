"""
Dense tensors with reverse-mode automatic differentiation on top of numpy.

Operations record themselves on the active ``Tape`` when at least one input
requires a gradient. Without an active tape nothing is recorded, which is how
the pseudo-label forward pass runs.
"""
import contextvars
import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_active_tape = contextvars.ContextVar('upl_active_tape', default=None)


class ShapeError(ValueError):
    pass


class Tape:
    """
    Ordered record of the primitive operations of one forward pass.
    Use as a context manager; the tape is cleared on exit.
    """

    def __init__(self):
        self.nodes = []
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        self.clear()
        return False

    def record(self, node):
        self.nodes.append(node)

    def clear(self):
        for node in self.nodes:
            node._backward = None
            node._parents = ()
        self.nodes = []

    def backward(self, scalar):
        if scalar.data.size != 1:
            raise ShapeError(f'backward needs a scalar, got shape {scalar.shape}')
        scalar.grad = np.ones_like(scalar.data)
        # Nodes were recorded in execution order, so the reversed list is a
        # valid reverse topological order.
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)


def active_tape():
    return _active_tape.get()


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def accumulate(self, grad):
        grad = np.asarray(grad, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad

    def backward(self):
        tape = active_tape()
        if tape is None:
            raise RuntimeError('backward() outside of an active tape')
        tape.backward(self)

    def __repr__(self):
        return f'Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})'

    # Operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def log(self):
        return log(self)


class Parameter(Tensor):
    def __init__(self, data, dtype=None):
        super().__init__(np.array(data, copy=True), requires_grad=True, dtype=dtype)


def as_tensor(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value), dtype=dtype or DTYPE)


def _make(data, parents, backward):
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        tape.record(out)
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _send(tensor, grad):
    if tensor.requires_grad:
        tensor.accumulate(_unbroadcast(grad, tensor.shape))


def add(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def backward(grad):
        _send(a, grad)
        _send(b, grad)
    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def backward(grad):
        _send(a, grad)
        _send(b, -grad)
    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def backward(grad):
        _send(a, grad * b.data)
        _send(b, grad * a.data)
    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def backward(grad):
        _send(a, grad / b.data)
        _send(b, -grad * a.data / (b.data * b.data))
    return _make(a.data / b.data, (a, b), backward)


def neg(a):
    def backward(grad):
        _send(a, -grad)
    return _make(-a.data, (a,), backward)


def log(a):
    def backward(grad):
        _send(a, grad / a.data)
    return _make(np.log(a.data), (a,), backward)


def clip_min(a, floor):
    """max(a, floor); the gradient passes only where a > floor."""
    floor = a.data.dtype.type(floor)
    keep = a.data > floor

    def backward(grad):
        _send(a, grad * keep)
    return _make(np.maximum(a.data, floor), (a,), backward)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)

    def backward(grad):
        if not keepdims:
            grad = np.expand_dims(grad, axes)
        _send(a, np.broadcast_to(grad, a.shape))
    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def tmean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1

    def backward(grad):
        if not keepdims:
            grad = np.expand_dims(grad, axes)
        _send(a, np.broadcast_to(grad, a.shape) / a.data.dtype.type(count))
    return _make(a.data.mean(axis=axes, keepdims=keepdims), (a,), backward)


def getitem(a, index):
    def backward(grad):
        full = np.zeros_like(a.data)
        np.add.at(full, index, grad)
        _send(a, full)
    return _make(a.data[index], (a,), backward)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(grad):
        for t, piece in zip(tensors, np.split(grad, bounds, axis=axis)):
            _send(t, piece)
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack_mean(tensors):
    """Elementwise average of same-shape tensors."""
    total = tensors[0]
    for t in tensors[1:]:
        total = total + t
    return total / len(tensors)


def relu(a):
    return leaky_relu(a, 0.0)


def leaky_relu(a, slope=0.01):
    slope = a.data.dtype.type(slope)
    scale = np.where(a.data > 0, a.data.dtype.type(1), slope)

    def backward(grad):
        _send(a, grad * scale)
    return _make(a.data * scale, (a,), backward)


def flip(a, axis):
    def backward(grad):
        _send(a, np.flip(grad, axis=axis))
    return _make(np.ascontiguousarray(np.flip(a.data, axis=axis)), (a,), backward)


def rot90(a, k):
    """Rotate the last two axes by k quarter turns."""
    k = k % 4

    def backward(grad):
        _send(a, np.rot90(grad, -k, axes=(-2, -1)))
    return _make(np.ascontiguousarray(np.rot90(a.data, k, axes=(-2, -1))), (a,), backward)


def conv2d(x, weight, bias, padding):
    """Same-size cross-correlation, x [B,Cin,H,W], weight [Cout,Cin,k,k]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f'conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}')
    cout, cin, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise ShapeError(f'conv2d input has {x.shape[1]} channels, weight expects {cin}')
    if kh != kw or kh % 2 == 0 or padding != (kh - 1) // 2:
        raise ShapeError(f'conv2d needs an odd square kernel with padding (k-1)/2, got k={kh}, padding={padding}')
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    windows = sliding_window_view(np.pad(x.data, pad), (kh, kw), axis=(2, 3))
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(grad):
        if weight.requires_grad:
            weight.accumulate(np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3])))
        if bias is not None and bias.requires_grad:
            bias.accumulate(grad.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gwin = sliding_window_view(np.pad(grad, pad), (kh, kw), axis=(2, 3))
            flipped = weight.data[:, :, ::-1, ::-1]
            dx = np.tensordot(gwin, flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
            x.accumulate(dx)
    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def maxpool2d(x):
    """2x2 max pooling with stride 2; ties route the gradient to the first maximum."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f'maxpool2d needs even spatial extents, got {h}x{w}')
    blocks = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    winner = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0]

    def backward(grad):
        routed = np.zeros_like(blocks)
        np.put_along_axis(routed, winner[..., None], grad[..., None], axis=-1)
        routed = routed.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        _send(x, routed)
    return _make(out, (x,), backward)


def upsample2x(x):
    """Nearest-neighbour x2 upsampling of the last two axes."""
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(grad):
        _send(x, grad.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))
    return _make(out, (x,), backward)


def softmax_channel(x):
    """Softmax over axis 1, stabilized by max-subtraction."""
    if x.shape[1] < 2:
        raise ShapeError(f'softmax_channel needs at least 2 channels, got {x.shape[1]}')
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(grad):
        inner = (grad * out).sum(axis=1, keepdims=True)
        _send(x, out * (grad - inner))
    return _make(out, (x,), backward)


def dropout(x, rate, rng, mode):
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0 <= rate < 1:
        raise ValueError(f'dropout rate must lie in [0, 1), got {rate}')
    if mode != 'train' or rate == 0:
        return x
    keep = rng.random(x.shape) >= rate
    scale = (keep / (1.0 - rate)).astype(x.dtype)

    def backward(grad):
        _send(x, grad * scale)
    return _make(x.data * scale, (x,), backward)


class BNState:
    """Affine parameters and running statistics of one batch-norm layer."""

    def __init__(self, channels, dtype=DTYPE):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.tracked = 0
        self.eps = BN_EPS
        self.momentum = BN_MOMENTUM

    @property
    def channels(self):
        return self.gamma.shape[0]

    def update_running(self, mean, var_unbiased):
        m = self.running_mean.dtype.type(self.momentum)
        self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(self.running_mean.dtype)
        self.running_var = ((1 - m) * self.running_var + m * var_unbiased).astype(self.running_var.dtype)
        self.tracked += 1


def batchnorm2d(x, state, mode):
    b, c, h, w = x.shape
    count = b * h * w
    dtype = x.dtype
    eps = dtype.type(state.eps)
    if mode == 'train':
        if count < 2:
            raise ShapeError(f'batchnorm2d in train mode needs B*H*W >= 2 per channel, got {count}')
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.update_running(mean, var * dtype.type(count / (count - 1)))
    elif mode == 'eval':
        if state.tracked == 0:
            raise ValueError('batchnorm2d eval mode before any running statistics exist')
        mean = state.running_mean.astype(dtype)
        var = state.running_var.astype(dtype)
    else:
        raise ValueError(f'unknown mode {mode!r}')
    inv_std = (1.0 / np.sqrt(var + eps)).astype(dtype)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    gamma, beta = state.gamma, state.beta
    out = xhat * gamma.data.astype(dtype).reshape(1, c, 1, 1) + beta.data.astype(dtype).reshape(1, c, 1, 1)

    def backward(grad):
        if gamma.requires_grad:
            gamma.accumulate((grad * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta.accumulate(grad.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxhat = grad * gamma.data.reshape(1, c, 1, 1)
            if mode == 'train':
                mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
                mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                dx = (gxhat - mean_g - xhat * mean_gx) * inv_std.reshape(1, c, 1, 1)
            else:
                dx = gxhat * inv_std.reshape(1, c, 1, 1)
            x.accumulate(dx)
    return _make(out.astype(dtype), (x, gamma, beta), backward)


class Adam:
    """Adam with bias correction; parameters are addressed by name."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            update = self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)

    def state_dict(self):
        return {
            'step_count': self.step_count,
            'lr': self.lr,
            'm': {k: v.copy() for k, v in self.m.items()},
            'v': {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state):
        self.step_count = int(state['step_count'])
        self.lr = float(state['lr'])
        for name in self.params:
            if name in state['m']:
                self.m[name] = np.array(state['m'][name], dtype=self.params[name].dtype)
                self.v[name] = np.array(state['v'][name], dtype=self.params[name].dtype)


class StepDecay:
    """lr = base * factor ** (epoch // every)."""

    def __init__(self, base_lr, factor=0.9, every=4):
        self.base_lr = base_lr
        self.factor = factor
        self.every = every

    def lr_at(self, epoch):
        return self.base_lr * self.factor ** (epoch // self.every)
