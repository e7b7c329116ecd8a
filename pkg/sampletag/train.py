"""Binary cross-entropy, SGD with Nesterov momentum, plateau decay and the epoch loop."""
import ast
import math
import os
import queue
import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
import structlog

from sampletag.checkpoint import save_checkpoint
from sampletag.config import BLOCK_KINDS
from sampletag.errors import ConfigError, DimensionError, NumericError
from sampletag.evaluate import evaluate
from sampletag.model import build
from sampletag.tensor import GradTape

logger = structlog.get_logger(__name__)

CLAMP = 1e-7
EPOCH_KEYS = ['event', 'epoch', 'lr', 'train_loss', 'val_loss', 'val_auc', 'decayed', 'seconds']
COMPARE_COLUMNS = ['kind', 'multi_level', 'macro_auc', 'rel_epoch_time', 'epoch_seconds', 'best_epoch', 'params']


def bce_loss(pred, target):
    """Mean binary cross-entropy over batch and tags; returns (loss, d loss / d pred)."""
    if pred.shape != target.shape:
        raise DimensionError("prediction and target shapes differ", pred.shape, target.shape)
    clipped = np.clip(pred, CLAMP, 1 - CLAMP)
    y = target.astype(pred.dtype)
    loss = -np.mean(y * np.log(clipped) + (1 - y) * np.log(1 - clipped))
    grad = (clipped - y) / (clipped * (1 - clipped)) / pred.size
    # the clamp is part of the loss: no gradient flows where it is active
    grad = np.where((pred > CLAMP) & (pred < 1 - CLAMP), grad, 0).astype(pred.dtype)
    return float(loss), grad


@dataclass
class OptimState:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)
    step_count: int = 0


def sgd_nesterov_step(params, state):
    """One update over a {name: Parameter} registry.

    With g' = g + weight_decay * w (weights only):
        v <- momentum * v - lr * g'
        w <- w + momentum * v - lr * g'
    """
    for name, param in params.items():
        if not np.all(np.isfinite(param.grad)):
            raise NumericError(f"non-finite gradient in {name}; training aborted")
    mu, lr = state.momentum, state.lr
    for name, param in params.items():
        g = param.grad
        if state.weight_decay and param.decay:
            g = g + state.weight_decay * param.value
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(param.value)
        v *= mu
        v -= lr * g
        param.value += mu * v - lr * g
    state.step_count += 1


@dataclass
class PlateauSchedule:
    factor: float = 5.0
    patience: int = 3
    min_lr: float = 1e-6
    min_delta: float = 0.0
    best_val: float = math.inf
    epochs_since_improve: int = 0
    exhausted: bool = False


def plateau_step(sched, val_loss, state):
    """Divide lr by ``factor`` after ``patience`` epochs without improvement; returns True on decay."""
    if val_loss < sched.best_val - sched.min_delta:
        sched.best_val = val_loss
        sched.epochs_since_improve = 0
        return False
    sched.epochs_since_improve += 1
    if sched.epochs_since_improve < sched.patience:
        return False
    sched.epochs_since_improve = 0
    new_lr = state.lr / sched.factor
    if new_lr < sched.min_lr:
        sched.exhausted = True
        return False
    state.lr = new_lr
    return True


def iterate_batches(segments, batch_size, rng):
    """Shuffled mini-batches of segments (not songs): yields (waveforms (B, L, 1), labels)."""
    order = rng.permutation(len(segments))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield segments.waveforms[idx][:, :, None], segments.labels[idx]


@dataclass
class _Failure:
    error: BaseException


def prefetch(batches, maxsize=2):
    """Run a batch generator on one background thread; order is unchanged.

    An exception raised by the generator is re-raised in the consuming thread.
    """
    q = queue.Queue(maxsize=maxsize)
    done = object()

    def produce():
        try:
            for item in batches:
                q.put(item)
        except BaseException as e:
            q.put(_Failure(e))
        finally:
            q.put(done)

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    while True:
        item = q.get()
        if item is done:
            break
        if isinstance(item, _Failure):
            worker.join()
            raise item.error
        yield item
    worker.join()


def train_epoch(net, segments, optim, rng, batch_size=23, use_prefetch=False):
    """One pass of forward -> loss -> backward -> step; returns the mean batch loss."""
    if len(segments) == 0:
        raise ConfigError("training set is empty")
    net.train()
    params = net.named_parameters()
    batches = iterate_batches(segments, batch_size, rng)
    if use_prefetch:
        batches = prefetch(batches)
    losses = []
    for x, y in batches:
        tape = GradTape()
        net.zero_grad()
        pred = net.forward(x.astype(net.dtype, copy=False), tape, rng=rng)
        loss, grad = bce_loss(pred, y)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite training loss at step {optim.step_count}")
        net.backward(grad, tape)
        sgd_nesterov_step(params, optim)
        losses.append(loss)
    return float(np.mean(losses))


def evaluate_loss(net, segments, batch_size=23):
    """Mean BCE over a segment set in eval mode."""
    net.eval()
    total, count = 0.0, 0
    for start in range(0, len(segments), batch_size):
        x = segments.waveforms[start:start + batch_size][:, :, None].astype(net.dtype, copy=False)
        y = segments.labels[start:start + batch_size]
        loss, _ = bce_loss(net.forward(x), y)
        total += loss * len(x)
        count += len(x)
    return total / count


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_auc: float
    decayed: bool
    seconds: float


@dataclass
class FitResult:
    history: list
    best_epoch: int
    best_val_loss: float
    best_state: dict
    checkpoint_path: str = None


def _epoch_logger(path):
    fh = open(path, 'w', encoding='utf-8')
    log = structlog.wrap_logger(
        structlog.WriteLogger(fh),
        wrapper_class=structlog.BoundLogger,
        processors=[structlog.processors.KeyValueRenderer(key_order=EPOCH_KEYS, drop_missing=True)])
    return log, fh


def read_epoch_log(path):
    """Parse a key=value epoch log back into dicts of Python values."""
    rows = []
    with open(path, encoding='utf-8') as fh:
        for line in fh:
            row = {}
            for token in line.split():
                key, _, value = token.partition('=')
                try:
                    row[key] = ast.literal_eval(value)
                except (ValueError, SyntaxError):
                    row[key] = float(value) if value in ('nan', 'inf', '-inf') else value
            if row:
                rows.append(row)
    return rows


def snapshot(net):
    state = {name: p.value.copy() for name, p in net.named_parameters().items()}
    state.update({name: b.copy() for name, b in net.named_buffers().items()})
    return state


def restore(net, state):
    params = net.named_parameters()
    buffers = net.named_buffers()
    for name, value in state.items():
        target = params[name].value if name in params else buffers[name]
        target[...] = value


def fit(net, train_set, val_set, cfg, seed=0, weight_decay=None, out_dir=None):
    """Train with plateau decay; keeps (and optionally checkpoints) the best-validation model."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("fit needs non-empty training and validation sets")
    rng = np.random.default_rng(seed)
    wd = net.config.weight_decay if weight_decay is None else weight_decay
    optim = OptimState(lr=cfg.lr, momentum=cfg.momentum, weight_decay=wd)
    sched = PlateauSchedule(factor=cfg.plateau_factor, patience=cfg.plateau_patience,
                            min_lr=cfg.min_lr, min_delta=cfg.min_delta)
    epoch_log, log_fh = (None, None)
    ckpt_path = None
    if out_dir:
        epoch_log, log_fh = _epoch_logger(os.path.join(out_dir, 'train.log'))
        ckpt_path = os.path.join(out_dir, 'best.ckpt')

    history = []
    best = FitResult(history=history, best_epoch=0, best_val_loss=math.inf, best_state={},
                     checkpoint_path=ckpt_path)
    stale = 0
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            started = time.perf_counter()
            lr = optim.lr
            train_loss = train_epoch(net, train_set, optim, rng, cfg.batch_size, cfg.prefetch)
            val_loss = evaluate_loss(net, val_set, cfg.batch_size)
            val_auc = evaluate(net, val_set, batch_size=cfg.batch_size).macro
            decayed = plateau_step(sched, val_loss, optim)
            record = EpochRecord(epoch, lr, train_loss, val_loss, val_auc, decayed,
                                 round(time.perf_counter() - started, 3))
            history.append(record)
            if epoch_log is not None:
                epoch_log.info('epoch', **vars(record))
                log_fh.flush()
            logger.info('epoch', **vars(record))

            if not math.isfinite(val_loss):
                raise NumericError(f"validation loss is not finite at epoch {epoch}")
            if val_loss < best.best_val_loss:
                best.best_val_loss = val_loss
                best.best_epoch = epoch
                best.best_state = snapshot(net)
                stale = 0
                if ckpt_path:
                    save_checkpoint(net, ckpt_path)
            else:
                stale += 1
            if sched.exhausted:
                logger.info('lr_floor_reached', epoch=epoch, lr=optim.lr)
                break
            if stale >= cfg.early_stop:
                logger.info('early_stop', epoch=epoch)
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    return best


def compare_variants(model_cfg, train_cfg, train_set, val_set, test_set, tags, kinds=BLOCK_KINDS, seed=0):
    """Train every block kind with and without multi-level aggregation on the same data.

    Each variant starts from the same seed and is scored on ``test_set`` with its
    best-validation weights. ``rel_epoch_time`` divides the mean epoch time by that of
    the first kind (``basic`` by default) with the same aggregation.
    """
    kinds = list(kinds)
    unknown = [k for k in kinds if k not in BLOCK_KINDS]
    if not kinds or unknown:
        raise ConfigError(f"compare needs block kinds from {BLOCK_KINDS}, got {kinds}")
    rows = []
    for multi_level in (True, False):
        reference = None
        for kind in kinds:
            cfg = replace(model_cfg, block_kind=kind, multi_level=multi_level,
                          channel_schedule=list(model_cfg.channel_schedule))
            net = build(cfg, np.random.default_rng(seed), tags=tags)
            result = fit(net, train_set, val_set, train_cfg, seed=seed)
            restore(net, result.best_state)
            seconds = float(np.mean([r.seconds for r in result.history]))
            if reference is None:
                reference = seconds
            row = {
                'kind': kind,
                'multi_level': multi_level,
                'macro_auc': evaluate(net, test_set, batch_size=train_cfg.batch_size).macro,
                'rel_epoch_time': seconds / reference if reference > 0 else float('nan'),
                'epoch_seconds': seconds,
                'best_epoch': result.best_epoch,
                'params': net.param_count(),
            }
            logger.info('variant_done', **row)
            rows.append(row)
    return pd.DataFrame(rows, columns=COMPARE_COLUMNS)
