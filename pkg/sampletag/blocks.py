"""The strided input layer and the Basic / SE / Res-n / ReSE-n building blocks.

Every block maps (B, T, C_in) to (B, T/3, C_out). Forward functions accept an optional
tape plus ``training``/``rng`` for dropout and ``capture`` (a list that receives each
SE gate). The matching ``*_backward`` consumes the tape in reverse, adds parameter
gradients into the block's ``Parameter`` slots and returns the input gradient.

Parameter counts (bias included, BN running statistics excluded):

    conv(i, o)  = 3·i·o + o          bn(c) = 2·c          dense(i, o) = i·o + o
    se(C)       = dense(C, αC) + dense(αC, C)
    proj(i, o)  = dense(i, o) if i != o else 0

    basic  = conv(i, o) + bn(o)
    se     = basic + se(o)
    res1   = conv(i, o) + bn(o) + proj(i, o)
    res2   = conv(i, o) + bn(o) + conv(o, o) + bn(o) + proj(i, o)
    reseN  = resN + se(o)
"""
from dataclasses import dataclass, field

import numpy as np

from sampletag import tensor as T
from sampletag.errors import ConfigError, DimensionError

RES_DROPOUT = 0.2
DEFAULT_ALPHA = 16
RESIDUAL_KINDS = ('res1', 'res2', 'rese1', 'rese2')
SE_KINDS = ('se', 'rese1', 'rese2')


def _prefixed(prefix, mapping):
    return {f"{prefix}{name}": value for name, value in mapping.items()}


@dataclass
class SEParams:
    fc1: T.DenseParams  # C -> alpha*C
    fc2: T.DenseParams  # alpha*C -> C
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if self.fc1.in_dim != self.fc2.out_dim or self.fc1.out_dim != self.fc2.in_dim:
            raise DimensionError("SE fc layers do not chain", self.fc1.weight.value.shape,
                                 self.fc2.weight.value.shape)

    @property
    def channels(self):
        return self.fc2.out_dim

    def parameters(self):
        return {**_prefixed('fc1.', self.fc1.parameters()), **_prefixed('fc2.', self.fc2.parameters())}


@dataclass
class StemParams:
    conv: T.ConvParams
    bn: T.BatchNormParams

    def parameters(self):
        return {**_prefixed('conv.', self.conv.parameters()), **_prefixed('bn.', self.bn.parameters())}

    def buffers(self):
        return _prefixed('bn.', self.bn.buffers())

    def batchnorms(self):
        return [self.bn]


@dataclass
class BlockParams:
    kind: str
    convs: list
    bns: list
    se: SEParams = None
    proj: T.DenseParams = None
    dropout_rate: float = 0.0
    in_channels: int = field(init=False)
    out_channels: int = field(init=False)

    def __post_init__(self):
        self.in_channels = self.convs[0].in_channels
        self.out_channels = self.convs[-1].out_channels
        n = 2 if self.kind in ('res2', 'rese2') else 1
        if len(self.convs) != n or len(self.bns) != n:
            raise ConfigError(f"{self.kind} block needs exactly {n} conv/bn pairs, got {len(self.convs)}")
        if (self.se is not None) != (self.kind in SE_KINDS):
            raise ConfigError(f"{self.kind} block: SE unit presence is wrong")
        if self.kind in RESIDUAL_KINDS:
            if (self.proj is not None) != (self.in_channels != self.out_channels):
                raise ConfigError(f"{self.kind} block: shortcut projection must exist iff channels change")
        elif self.proj is not None:
            raise ConfigError(f"{self.kind} block has no shortcut")
        if n == 2 and self.dropout_rate != RES_DROPOUT:
            raise ConfigError(f"{self.kind} block dropout must be {RES_DROPOUT}")

    def parameters(self):
        out = {}
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            out.update(_prefixed(f'conv{i}.', conv.parameters()))
            out.update(_prefixed(f'bn{i}.', bn.parameters()))
        if self.se is not None:
            out.update(_prefixed('se.', self.se.parameters()))
        if self.proj is not None:
            out.update(_prefixed('proj.', self.proj.parameters()))
        return out

    def buffers(self):
        out = {}
        for i, bn in enumerate(self.bns):
            out.update(_prefixed(f'bn{i}.', bn.buffers()))
        return out

    def batchnorms(self):
        return list(self.bns)


def se_hidden(channels, alpha):
    hidden = int(round(alpha * channels))
    if hidden < 1:
        raise ConfigError(f"alpha {alpha} leaves no hidden units for {channels} channels")
    return hidden


def init_se(rng, channels, alpha=DEFAULT_ALPHA, dtype=np.float32):
    hidden = se_hidden(channels, alpha)
    return SEParams(T.init_dense(rng, channels, hidden, dtype), T.init_dense(rng, hidden, channels, dtype), alpha)


def init_stem(rng, channels, dtype=np.float32):
    return StemParams(T.init_conv(rng, 1, channels, stride=3, padding=0, dtype=dtype),
                      T.BatchNormParams.fresh(channels, dtype))


def init_block(rng, kind, c_in, c_out, alpha=DEFAULT_ALPHA, dtype=np.float32):
    n = 2 if kind in ('res2', 'rese2') else 1
    convs = [T.init_conv(rng, c_in, c_out, dtype=dtype)]
    if n == 2:
        convs.append(T.init_conv(rng, c_out, c_out, dtype=dtype))
    bns = [T.BatchNormParams.fresh(c_out, dtype) for _ in range(n)]
    se = init_se(rng, c_out, alpha, dtype) if kind in SE_KINDS else None
    proj = None
    if kind in RESIDUAL_KINDS and c_in != c_out:
        proj = T.init_dense(rng, c_in, c_out, dtype)
    return BlockParams(kind, convs, bns, se=se, proj=proj, dropout_rate=RES_DROPOUT if n == 2 else 0.0)


def conv_count(c_in, c_out):
    return 3 * c_in * c_out + c_out


def dense_count(c_in, c_out):
    return c_in * c_out + c_out


def se_count(channels, alpha):
    hidden = se_hidden(channels, alpha)
    return dense_count(channels, hidden) + dense_count(hidden, channels)


def block_param_count(kind, c_in, c_out, alpha=DEFAULT_ALPHA):
    """Closed-form learned-parameter count of one block."""
    total = conv_count(c_in, c_out) + 2 * c_out
    if kind in ('res2', 'rese2'):
        total += conv_count(c_out, c_out) + 2 * c_out
    if kind in SE_KINDS:
        total += se_count(c_out, alpha)
    if kind in RESIDUAL_KINDS and c_in != c_out:
        total += dense_count(c_in, c_out)
    return total


def _conv_bn(x, conv, bn, tape):
    return T.batchnorm1d(T.conv1d(x, conv, tape), bn, tape)


def _conv_bn_backward(g, conv, bn, tape):
    g, g_gamma, g_beta = T.batchnorm1d_backward(g, tape)
    T.accumulate(bn, gamma=g_gamma, beta=g_beta)
    g, g_w, g_b = T.conv1d_backward(g, tape)
    T.accumulate(conv, weight=g_w, bias=g_b)
    return g


def _dense_backward(g, p, tape):
    g, g_w, g_b = T.dense_backward(g, tape)
    T.accumulate(p, weight=g_w, bias=g_b)
    return g


def _is_power_of_three(n):
    while n > 1 and n % 3 == 0:
        n //= 3
    return n == 1


def strided_input(x, stem, tape=None):
    """Strided conv (stride 3, no padding) -> BN -> ReLU on a mono waveform."""
    T.check_tensor(x)
    if x.shape[2] != 1:
        raise DimensionError("strided input expects a mono waveform", x.shape)
    if not _is_power_of_three(x.shape[1]) or x.shape[1] < 3:
        raise ConfigError(f"waveform length must be a power of 3, got {x.shape[1]}")
    return T.relu(_conv_bn(x, stem.conv, stem.bn, tape), tape)


def strided_input_backward(g, stem, tape):
    g = T.relu_backward(g, tape)
    return _conv_bn_backward(g, stem.conv, stem.bn, tape)


def se_unit(u, se, tape=None):
    """Squeeze (global average) and excite (FC -> ReLU -> FC -> sigmoid); returns (scaled u, gate)."""
    if u.shape[2] != se.channels:
        raise DimensionError("SE unit channels do not match", u.shape, se.fc2.weight.value.shape)
    z = T.global_avg_pool(u, tape)[:, 0, :]
    h = T.relu(T.dense(z, se.fc1, tape), tape)
    s = T.sigmoid(T.dense(h, se.fc2, tape), tape)
    return T.channel_scale(u, s, tape), s


def se_unit_backward(g, se, tape):
    g_u, g_s = T.channel_scale_backward(g, tape)
    g_h = _dense_backward(T.sigmoid_backward(g_s, tape), se.fc2, tape)
    g_z = _dense_backward(T.relu_backward(g_h, tape), se.fc1, tape)
    return g_u + T.global_avg_pool_backward(g_z[:, None, :], tape)


def basic_block(x, params, tape=None, **_):
    h = T.relu(_conv_bn(x, params.convs[0], params.bns[0], tape), tape)
    return T.maxpool1d(h, 3, tape)


def basic_block_backward(g, params, tape):
    g = T.relu_backward(T.maxpool1d_backward(g, tape), tape)
    return _conv_bn_backward(g, params.convs[0], params.bns[0], tape)


def se_block(x, params, tape=None, capture=None, **_):
    h = T.relu(_conv_bn(x, params.convs[0], params.bns[0], tape), tape)
    h, s = se_unit(h, params.se, tape)
    if capture is not None:
        capture.append(s)
    return T.maxpool1d(h, 3, tape)


def se_block_backward(g, params, tape):
    g = se_unit_backward(T.maxpool1d_backward(g, tape), params.se, tape)
    g = T.relu_backward(g, tape)
    return _conv_bn_backward(g, params.convs[0], params.bns[0], tape)


def _branch(x, params, tape, training, rng):
    h = _conv_bn(x, params.convs[0], params.bns[0], tape)
    if len(params.convs) == 2:
        h = T.relu(h, tape)
        h = T.dropout(h, params.dropout_rate, rng, tape, training=training)
        h = _conv_bn(h, params.convs[1], params.bns[1], tape)
    return h


def _branch_backward(g, params, tape):
    if len(params.convs) == 2:
        g = _conv_bn_backward(g, params.convs[1], params.bns[1], tape)
        g = T.relu_backward(T.dropout_backward(g, tape), tape)
    return _conv_bn_backward(g, params.convs[0], params.bns[0], tape)


def _merge(branch, x, params, tape):
    shortcut = x if params.proj is None else T.project1d(x, params.proj, tape)
    if branch.shape != shortcut.shape:
        raise DimensionError("residual branch and shortcut disagree", branch.shape, shortcut.shape)
    return T.maxpool1d(T.relu(branch + shortcut, tape), 3, tape)


def _merge_backward(g, params, tape):
    g = T.relu_backward(T.maxpool1d_backward(g, tape), tape)
    g_short = g if params.proj is None else _dense_backward(g, params.proj, tape)
    return g, g_short


def res_block(x, params, tape=None, training=False, rng=None, **_):
    """maxpool(ReLU(branch(x) + shortcut(x))); branch is conv-BN, or conv-BN-ReLU-dropout-conv-BN."""
    return _merge(_branch(x, params, tape, training, rng), x, params, tape)


def res_block_backward(g, params, tape):
    g_branch, g_short = _merge_backward(g, params, tape)
    return _branch_backward(g_branch, params, tape) + g_short


def rese_block(x, params, tape=None, training=False, rng=None, capture=None, **_):
    branch, s = se_unit(_branch(x, params, tape, training, rng), params.se, tape)
    if capture is not None:
        capture.append(s)
    return _merge(branch, x, params, tape)


def rese_block_backward(g, params, tape):
    g_branch, g_short = _merge_backward(g, params, tape)
    g_branch = se_unit_backward(g_branch, params.se, tape)
    return _branch_backward(g_branch, params, tape) + g_short


FORWARD = {
    'basic': basic_block,
    'se': se_block,
    'res1': res_block,
    'res2': res_block,
    'rese1': rese_block,
    'rese2': rese_block,
}

BACKWARD = {
    'basic': basic_block_backward,
    'se': se_block_backward,
    'res1': res_block_backward,
    'res2': res_block_backward,
    'rese1': rese_block_backward,
    'rese2': rese_block_backward,
}


def block_forward(x, params, tape=None, training=False, rng=None, capture=None):
    T.check_tensor(x)
    if x.shape[1] % 3:
        raise DimensionError("block input time must be divisible by 3", x.shape)
    return FORWARD[params.kind](x, params, tape, training=training, rng=rng, capture=capture)


def block_backward(g, params, tape):
    return BACKWARD[params.kind](g, params, tape)
