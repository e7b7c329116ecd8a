"""Dense (batch, time, channel) tensors and differentiable primitives.

Tensors are plain numpy arrays laid out time-major within a batch item
(``x[b, t, c]``, time stride = channels). Every primitive takes an optional
``GradTape``; when given, the forward pushes the state its backward needs and the
matching ``*_backward`` pops it. Backward passes must run in exact reverse order of
the forwards recorded on a tape.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from sampletag.errors import ConfigError, DimensionError, StateError

KERNEL = 3
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray = None
    decay: bool = True

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0

    def astype(self, dtype):
        self.value = self.value.astype(dtype)
        self.grad = np.zeros_like(self.value)


@dataclass
class ConvParams:
    weight: Parameter  # (out_channels, in_channels, 3)
    bias: Parameter    # (out_channels,)
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        if self.weight.value.ndim != 3 or self.weight.value.shape[2] != KERNEL:
            raise ConfigError(f"conv kernel width is fixed to {KERNEL}, got {self.weight.value.shape}")
        if self.stride not in (1, 3) or self.padding not in (0, 1):
            raise ConfigError(f"conv stride must be 1 or 3 and padding 0 or 1, got {self.stride}/{self.padding}")
        self.bias.decay = False

    @property
    def in_channels(self):
        return self.weight.value.shape[1]

    @property
    def out_channels(self):
        return self.weight.value.shape[0]

    def parameters(self):
        return {'weight': self.weight, 'bias': self.bias}


@dataclass
class DenseParams:
    weight: Parameter  # (out_dim, in_dim)
    bias: Parameter    # (out_dim,)

    def __post_init__(self):
        self.bias.decay = False

    @property
    def in_dim(self):
        return self.weight.value.shape[1]

    @property
    def out_dim(self):
        return self.weight.value.shape[0]

    def parameters(self):
        return {'weight': self.weight, 'bias': self.bias}


@dataclass
class BatchNormParams:
    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM
    mode: str = 'train'

    def __post_init__(self):
        self.gamma.decay = False
        self.beta.decay = False
        if self.eps <= 0 or not 0 < self.momentum < 1:
            raise ConfigError("batchnorm needs eps > 0 and momentum in (0, 1)")

    @classmethod
    def fresh(cls, channels, dtype=np.float32):
        return cls(gamma=Parameter(np.ones(channels, dtype=dtype)),
                   beta=Parameter(np.zeros(channels, dtype=dtype)),
                   running_mean=np.zeros(channels, dtype=dtype),
                   running_var=np.ones(channels, dtype=dtype))

    def parameters(self):
        return {'gamma': self.gamma, 'beta': self.beta}

    def buffers(self):
        return {'running_mean': self.running_mean, 'running_var': self.running_var}


@dataclass
class GradTape:
    """LIFO record of forward state. Each record is consumed by exactly one backward."""
    records: list = field(default_factory=list)

    def push(self, op, **cache):
        self.records.append((op, cache))

    def pop(self, op):
        if not self.records:
            raise StateError(f"{op} backward called with an empty or consumed tape")
        name, cache = self.records.pop()
        if name != op:
            raise StateError(f"{op} backward found a {name} record on the tape")
        return cache

    def __len__(self):
        return len(self.records)

    def clear(self):
        self.records.clear()


def _record(tape, op, **cache):
    if tape is not None:
        tape.push(op, **cache)


def check_tensor(x, name='x'):
    if x.ndim != 3:
        raise DimensionError(f"{name} must be (batch, time, channels)", x.shape)
    return x


def conv_out_time(time, stride, padding):
    return (time + 2 * padding - KERNEL) // stride + 1


def _windows(xp, t_out, stride):
    # (B, T_out, 3, C): the three taps seen by each output position
    span = stride * (t_out - 1) + 1
    return np.stack([xp[:, k:k + span:stride, :] for k in range(KERNEL)], axis=2)


def conv1d(x, p, tape=None):
    """Cross-correlation with a width-3 kernel, zero padding, plus bias."""
    check_tensor(x)
    if x.shape[2] != p.in_channels:
        raise DimensionError("conv1d input channels do not match weights", x.shape, p.weight.value.shape)
    batch, time, c_in = x.shape
    t_out = conv_out_time(time, p.stride, p.padding)
    if t_out < 1:
        raise DimensionError("conv1d input too short for the kernel", x.shape, p.weight.value.shape)
    xp = np.pad(x, ((0, 0), (p.padding, p.padding), (0, 0))) if p.padding else x
    cols = _windows(xp, t_out, p.stride).reshape(batch * t_out, KERNEL * c_in)
    w_mat = p.weight.value.transpose(2, 1, 0).reshape(KERNEL * c_in, p.out_channels)
    out = (cols @ w_mat + p.bias.value).reshape(batch, t_out, p.out_channels)
    _record(tape, 'conv1d', cols=cols, x_shape=x.shape, params=p)
    return out


def conv1d_backward(grad_out, tape):
    """Returns (grad_x, grad_w, grad_b) for the most recent conv1d on the tape."""
    cache = tape.pop('conv1d')
    p, cols = cache['params'], cache['cols']
    batch, time, c_in = cache['x_shape']
    t_out = grad_out.shape[1]
    g = grad_out.reshape(batch * t_out, p.out_channels)
    w_mat = p.weight.value.transpose(2, 1, 0).reshape(KERNEL * c_in, p.out_channels)

    grad_w = (cols.T @ g).reshape(KERNEL, c_in, p.out_channels).transpose(2, 1, 0)
    grad_b = g.sum(axis=0)
    grad_cols = (g @ w_mat.T).reshape(batch, t_out, KERNEL, c_in)

    grad_xp = np.zeros((batch, time + 2 * p.padding, c_in), dtype=grad_out.dtype)
    span = p.stride * (t_out - 1) + 1
    for k in range(KERNEL):
        grad_xp[:, k:k + span:p.stride, :] += grad_cols[:, :, k, :]
    grad_x = grad_xp[:, p.padding:p.padding + time, :] if p.padding else grad_xp
    return grad_x, grad_w, grad_b


def maxpool1d(x, window=3, tape=None):
    check_tensor(x)
    batch, time, channels = x.shape
    if time % window:
        raise DimensionError(f"maxpool1d time must be divisible by {window}", x.shape)
    grouped = x.reshape(batch, time // window, window, channels)
    # np.argmax picks the first maximum on ties
    idx = grouped.argmax(axis=2)
    out = np.take_along_axis(grouped, idx[:, :, None, :], axis=2)[:, :, 0, :]
    _record(tape, 'maxpool1d', idx=idx, x_shape=x.shape, window=window)
    return out


def maxpool1d_backward(grad_out, tape):
    cache = tape.pop('maxpool1d')
    batch, time, channels = cache['x_shape']
    window = cache['window']
    grad = np.zeros((batch, time // window, window, channels), dtype=grad_out.dtype)
    np.put_along_axis(grad, cache['idx'][:, :, None, :], grad_out[:, :, None, :], axis=2)
    return grad.reshape(batch, time, channels)


def global_max_pool(x, tape=None):
    check_tensor(x)
    return maxpool1d(x, window=x.shape[1], tape=tape)


global_max_pool_backward = maxpool1d_backward


def global_avg_pool(x, tape=None):
    check_tensor(x)
    if x.shape[1] < 1:
        raise DimensionError("global_avg_pool needs time >= 1", x.shape)
    _record(tape, 'global_avg_pool', time=x.shape[1])
    return x.mean(axis=1, keepdims=True)


def global_avg_pool_backward(grad_out, tape):
    time = tape.pop('global_avg_pool')['time']
    return np.repeat(grad_out / time, time, axis=1)


def dense(x, p, tape=None):
    """W·x + b over the last axis; leading axes are treated as batch."""
    if x.shape[-1] != p.in_dim:
        raise DimensionError("dense input dim does not match weights", x.shape, p.weight.value.shape)
    _record(tape, 'dense', x=x, params=p)
    return x @ p.weight.value.T + p.bias.value


def dense_backward(grad_out, tape):
    """Returns (grad_x, grad_w, grad_b)."""
    cache = tape.pop('dense')
    x, p = cache['x'], cache['params']
    g2 = grad_out.reshape(-1, p.out_dim)
    grad_w = g2.T @ x.reshape(-1, p.in_dim)
    grad_b = g2.sum(axis=0)
    return grad_out @ p.weight.value, grad_w, grad_b


def batchnorm1d(x, p, tape=None):
    """Per-channel normalization over batch and time."""
    check_tensor(x)
    if x.shape[2] != p.gamma.value.shape[0]:
        raise DimensionError("batchnorm channels do not match", x.shape, p.gamma.value.shape)
    if p.mode == 'train':
        n = x.shape[0] * x.shape[1]
        if n < 2:
            raise StateError("batchnorm in train mode needs batch*time >= 2")
        mean = x.mean(axis=(0, 1))
        var = x.var(axis=(0, 1))
        m = p.momentum
        p.running_mean[...] = (1 - m) * p.running_mean + m * mean
        p.running_var[...] = (1 - m) * p.running_var + m * var * (n / (n - 1))
    else:
        mean, var = p.running_mean, p.running_var
    inv_std = 1.0 / np.sqrt(var + p.eps)
    x_hat = (x - mean) * inv_std
    _record(tape, 'batchnorm1d', x_hat=x_hat, inv_std=inv_std, params=p, mode=p.mode)
    return p.gamma.value * x_hat + p.beta.value


def batchnorm1d_backward(grad_out, tape):
    """Returns (grad_x, grad_gamma, grad_beta)."""
    cache = tape.pop('batchnorm1d')
    x_hat, inv_std, p = cache['x_hat'], cache['inv_std'], cache['params']
    grad_gamma = (grad_out * x_hat).sum(axis=(0, 1))
    grad_beta = grad_out.sum(axis=(0, 1))
    g_hat = grad_out * p.gamma.value
    if cache['mode'] != 'train':
        return g_hat * inv_std, grad_gamma, grad_beta
    n = grad_out.shape[0] * grad_out.shape[1]
    grad_x = (inv_std / n) * (
        n * g_hat - g_hat.sum(axis=(0, 1)) - x_hat * (g_hat * x_hat).sum(axis=(0, 1)))
    return grad_x, grad_gamma, grad_beta


def relu(x, tape=None):
    mask = x > 0
    _record(tape, 'relu', mask=mask)
    return np.where(mask, x, 0).astype(x.dtype, copy=False)


def relu_backward(grad_out, tape):
    # derivative at exactly 0 is 0
    return grad_out * tape.pop('relu')['mask']


def sigmoid(x, tape=None):
    out = expit(x)
    _record(tape, 'sigmoid', out=out)
    return out


def sigmoid_backward(grad_out, tape):
    out = tape.pop('sigmoid')['out']
    return grad_out * out * (1 - out)


def dropout(x, rate, rng=None, tape=None, training=True):
    """Inverted dropout; identity (the same array) in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        _record(tape, 'dropout', mask=None)
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    _record(tape, 'dropout', mask=mask)
    return x * mask


def dropout_backward(grad_out, tape):
    mask = tape.pop('dropout')['mask']
    return grad_out if mask is None else grad_out * mask


def channel_scale(u, s, tape=None):
    """Multiply each channel's time series by s[b, c]."""
    _record(tape, 'channel_scale', u=u, s=s)
    return u * s[:, None, :]


def channel_scale_backward(grad_out, tape):
    """Returns (grad_u, grad_s)."""
    cache = tape.pop('channel_scale')
    return grad_out * cache['s'][:, None, :], (grad_out * cache['u']).sum(axis=1)


def project1d(x, p, tape=None):
    """Width-1 channel projection: a dense layer applied at every time step."""
    check_tensor(x)
    return dense(x, p, tape)


project1d_backward = dense_backward


def he_uniform(rng, shape, fan_in, dtype=np.float32):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_conv(rng, c_in, c_out, stride=1, padding=1, dtype=np.float32):
    weight = he_uniform(rng, (c_out, c_in, KERNEL), c_in * KERNEL, dtype)
    return ConvParams(Parameter(weight), Parameter(np.zeros(c_out, dtype=dtype)), stride, padding)


def init_dense(rng, in_dim, out_dim, dtype=np.float32):
    weight = he_uniform(rng, (out_dim, in_dim), in_dim, dtype)
    return DenseParams(Parameter(weight), Parameter(np.zeros(out_dim, dtype=dtype)))


def accumulate(params, **grads):
    """Add gradients into the Parameter slots of a params object."""
    slots = params.parameters()
    for name, g in grads.items():
        slots[name].grad += g
