"""Strided input layer + N blocks + (multi-level) global max pooling + two-FC head."""
import numpy as np
import structlog

from sampletag import blocks as B
from sampletag import tensor as T
from sampletag.config import ModelConfig
from sampletag.errors import DimensionError

logger = structlog.get_logger(__name__)


class Network:
    def __init__(self, config, stem, blocks, fc1, fc2, tags=None):
        self.config = config
        self.stem = stem
        self.blocks = list(blocks)
        self.fc1 = fc1
        self.fc2 = fc2
        self.tags = list(tags) if tags is not None else None
        self.training = True
        self.train()

    @property
    def mode(self):
        return 'train' if self.training else 'eval'

    def train(self):
        self._set_mode(True)
        return self

    def eval(self):
        self._set_mode(False)
        return self

    def _set_mode(self, training):
        self.training = training
        for bn in self.batchnorms():
            bn.mode = 'train' if training else 'eval'

    def batchnorms(self):
        out = self.stem.batchnorms()
        for block in self.blocks:
            out.extend(block.batchnorms())
        return out

    @property
    def level_indices(self):
        depth = len(self.blocks)
        return list(range(depth - 3, depth)) if self.config.multi_level else [depth - 1]

    @property
    def has_se(self):
        return any(block.se is not None for block in self.blocks)

    def named_parameters(self):
        """Registry of every learned tensor, each exactly once, in a fixed order."""
        out = {f'stem.{k}': v for k, v in self.stem.parameters().items()}
        for i, block in enumerate(self.blocks, 1):
            out.update({f'block{i}.{k}': v for k, v in block.parameters().items()})
        out.update({f'head.fc1.{k}': v for k, v in self.fc1.parameters().items()})
        out.update({f'head.fc2.{k}': v for k, v in self.fc2.parameters().items()})
        return out

    def named_buffers(self):
        out = {f'stem.{k}': v for k, v in self.stem.buffers().items()}
        for i, block in enumerate(self.blocks, 1):
            out.update({f'block{i}.{k}': v for k, v in block.buffers().items()})
        return out

    def zero_grad(self):
        for param in self.named_parameters().values():
            param.zero_grad()

    def astype(self, dtype):
        for param in self.named_parameters().values():
            param.astype(dtype)
        for bn in self.batchnorms():
            bn.running_mean = bn.running_mean.astype(dtype)
            bn.running_var = bn.running_var.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.fc2.weight.value.dtype

    def param_count(self):
        return sum(p.value.size for p in self.named_parameters().values())

    def forward(self, x, tape=None, rng=None, capture=None):
        cfg = self.config
        T.check_tensor(x)
        if x.shape[1:] != (cfg.input_len, 1):
            raise DimensionError("network input must be (batch, input_len, 1)", x.shape, (x.shape[0], cfg.input_len, 1))
        h = B.strided_input(x, self.stem, tape)
        outputs = []
        for block in self.blocks:
            h = B.block_forward(h, block, tape, training=self.training, rng=rng, capture=capture)
            outputs.append(h)
        pooled = [T.global_max_pool(outputs[i], tape)[:, 0, :] for i in self.level_indices]
        features = np.concatenate(pooled, axis=1)
        h = T.relu(T.dense(features, self.fc1, tape), tape)
        h = T.dropout(h, cfg.dropout_head, rng, tape, training=self.training)
        return T.sigmoid(T.dense(h, self.fc2, tape), tape)

    def backward(self, grad_out, tape):
        """Accumulate parameter gradients for the forward recorded on ``tape``; returns d/dx."""
        g = T.sigmoid_backward(grad_out, tape)
        g, g_w, g_b = T.dense_backward(g, tape)
        T.accumulate(self.fc2, weight=g_w, bias=g_b)
        g = T.relu_backward(T.dropout_backward(g, tape), tape)
        g, g_w, g_b = T.dense_backward(g, tape)
        T.accumulate(self.fc1, weight=g_w, bias=g_b)

        levels = self.level_indices
        widths = [self.blocks[i].out_channels for i in levels]
        splits = np.split(g, np.cumsum(widths)[:-1], axis=1)
        level_grads = {}
        for i, g_level in reversed(list(zip(levels, splits))):
            level_grads[i] = T.global_max_pool_backward(g_level[:, None, :], tape)

        g = None
        for i in reversed(range(len(self.blocks))):
            if i in level_grads:
                g = level_grads[i] if g is None else g + level_grads[i]
            g = B.block_backward(g, self.blocks[i], tape)
        return B.strided_input_backward(g, self.stem, tape)


def build(config, rng, tags=None, dtype=np.float32):
    """He-uniform weights, BN gamma=1 beta=0, zero biases."""
    config.validate()
    stem = B.init_stem(rng, config.stem_channels, dtype)
    blocks = []
    c_in = config.stem_channels
    for c_out in config.channel_schedule:
        blocks.append(B.init_block(rng, config.block_kind, c_in, c_out, config.alpha, dtype))
        c_in = c_out
    fc1 = T.init_dense(rng, config.head_input_dim, config.head_hidden, dtype)
    fc2 = T.init_dense(rng, config.head_hidden, config.num_tags, dtype)
    net = Network(config, stem, blocks, fc1, fc2, tags=tags)
    logger.debug('network_built', kind=config.block_kind, depth=config.depth, params=net.param_count())
    return net


def param_count(obj):
    """Learned-parameter count of a Network or of any params object with ``parameters()``."""
    if isinstance(obj, Network):
        return obj.param_count()
    return sum(p.value.size for p in obj.parameters().values())


def expected_param_count(config):
    """Closed-form parameter count of the network ``config`` describes."""
    total = B.conv_count(1, config.stem_channels) + 2 * config.stem_channels
    c_in = config.stem_channels
    for c_out in config.channel_schedule:
        total += B.block_param_count(config.block_kind, c_in, c_out, config.alpha)
        c_in = c_out
    total += B.dense_count(config.head_input_dim, config.head_hidden)
    total += B.dense_count(config.head_hidden, config.num_tags)
    return total


def toy_config(block_kind, depth=3, channels=4, multi_level=True, num_tags=3, alpha=2.0):
    """Small network used by gradient checks and tests."""
    return ModelConfig(block_kind=block_kind, depth=depth, input_len=3 ** (depth + 1),
                       stem_channels=channels, channel_schedule=[channels] * depth, alpha=alpha,
                       multi_level=multi_level, head_hidden=6, num_tags=num_tags, dropout_head=0.0)
