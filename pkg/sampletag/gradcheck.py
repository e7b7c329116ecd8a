"""Central finite-difference oracle for every backward pass, and the gradient suite."""
from dataclasses import dataclass, field

import numpy as np
import structlog

from sampletag import blocks as B
from sampletag import tensor as T
from sampletag.errors import OracleError

logger = structlog.get_logger(__name__)

STEP = 1e-5
# ReLU/max composites are differenced with a smaller step so that a kink rarely falls inside
# the difference interval.
KINKED_STEP = 1e-7
PRIMITIVE_TOL = 1e-4
BN_TOL = 1e-3
# differences below this many ulps of the loss per step are rounding, not gradient error
NOISE_ULPS = 256


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict = field(default_factory=dict)

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def worst(self):
        if not self.errors:
            return None
        return max(self.errors, key=self.errors.get)

    @property
    def passed(self):
        return self.max_error < self.tolerance


def relative_error(analytic, numeric, noise=None):
    """||a - n|| / (||a|| + ||n||), after discounting the rounding noise of the differences."""
    diff = np.linalg.norm(analytic - numeric)
    if noise is not None:
        diff = max(0.0, diff - np.linalg.norm(noise))
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return float(diff / scale) if scale > 0 else 0.0


def numeric_gradient(loss_fn, array, entries, step=STEP):
    """Central differences at the given flat entries; returns (gradient, rounding bound)."""
    grad = np.zeros(len(entries))
    noise = np.zeros(len(entries))
    eps = np.finfo(np.float64).eps
    for i, flat in enumerate(entries):
        idx = np.unravel_index(flat, array.shape)
        original = array[idx]
        array[idx] = original + step
        plus = loss_fn()
        array[idx] = original - step
        minus = loss_fn()
        array[idx] = original
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise OracleError(f"non-finite loss while perturbing entry {idx}")
        grad[i] = (plus - minus) / (2 * step)
        noise[i] = NOISE_ULPS * eps * (abs(plus) + abs(minus) + 1.0) / (2 * step)
    return grad, noise


def grad_check(loss_fn, params, analytic, tolerance=PRIMITIVE_TOL, step=STEP, max_entries=None, rng=None):
    """Compare analytic gradients against central differences.

    ``params`` maps names to float64 arrays that ``loss_fn()`` reads; they are
    perturbed in place and restored. ``analytic`` maps the same names to gradients.
    With ``max_entries`` only a random subset of each array is perturbed.
    """
    base = loss_fn()
    if not np.isfinite(base):
        raise OracleError("loss is not finite at the check point")
    rng = rng or np.random.default_rng(0)
    report = GradCheckReport(tolerance=tolerance)
    for name, array in params.items():
        if array.dtype != np.float64:
            raise OracleError(f"{name} must be float64 for the oracle, got {array.dtype}")
        size = array.size
        if max_entries is not None and size > max_entries:
            entries = np.sort(rng.choice(size, max_entries, replace=False))
        else:
            entries = np.arange(size)
        numeric, noise = numeric_gradient(loss_fn, array, entries, step)
        expected = np.asarray(analytic[name]).reshape(-1)[entries]
        report.errors[name] = relative_error(expected, numeric, noise)
    logger.debug('grad_check', max_error=report.max_error, worst=report.worst, passed=report.passed)
    return report


def check_module(forward, backward, x, parameters, tolerance, seed=0, step=STEP,
                 max_entries=None, corrupt=False):
    """Grad-check ``forward(x, tape, rng)`` / ``backward(g, tape)`` under a random linear readout.

    ``parameters`` maps names to ``Parameter`` objects read by ``forward``. The rng is
    re-seeded on every call so dropout masks stay fixed across perturbations.
    """
    reference = forward(x, None, np.random.default_rng(seed))
    readout = np.random.default_rng(seed + 1).standard_normal(reference.shape)

    def loss_fn():
        return float(np.sum(forward(x, None, np.random.default_rng(seed)) * readout))

    for param in parameters.values():
        param.zero_grad()
    tape = T.GradTape()
    forward(x, tape, np.random.default_rng(seed))
    analytic = {'x': backward(readout, tape)}
    if len(tape):
        raise OracleError(f"backward left {len(tape)} records on the tape")
    analytic.update({name: p.grad.copy() for name, p in parameters.items()})
    if corrupt:
        analytic = {name: g * 1.1 for name, g in analytic.items()}
    arrays = {'x': x, **{name: p.value for name, p in parameters.items()}}
    return grad_check(loss_fn, arrays, analytic, tolerance, step, max_entries,
                      np.random.default_rng(seed + 2))


def _accumulating(backward, params):
    # primitives return (grad_x, grad_a, grad_b); the two parameter grads go into params
    def wrapped(g, tape):
        grad_x, *grads = backward(g, tape)
        T.accumulate(params, **dict(zip(params.parameters(), grads)))
        return grad_x
    return wrapped


def check_primitives(seed=0, corrupt=False):
    """Every differentiable primitive on a small random float64 input."""
    rng = np.random.default_rng(seed)
    f64 = np.float64
    results = {}

    conv = T.init_conv(rng, 2, 3, dtype=f64)
    conv.bias.value[...] = rng.standard_normal(3)
    x = rng.standard_normal((1, 9, 2))
    results['conv1d'] = check_module(lambda x, tape, _: T.conv1d(x, conv, tape),
                                     _accumulating(T.conv1d_backward, conv), x,
                                     {'weight': conv.weight, 'bias': conv.bias},
                                     PRIMITIVE_TOL, seed, corrupt=corrupt)

    strided = T.init_conv(rng, 1, 2, stride=3, padding=0, dtype=f64)
    x = rng.standard_normal((2, 27, 1))
    results['conv1d_strided'] = check_module(lambda x, tape, _: T.conv1d(x, strided, tape),
                                             _accumulating(T.conv1d_backward, strided), x,
                                             {'weight': strided.weight, 'bias': strided.bias},
                                             PRIMITIVE_TOL, seed, corrupt=corrupt)

    layer = T.init_dense(rng, 5, 3, dtype=f64)
    x = rng.standard_normal((4, 5))
    results['dense'] = check_module(lambda x, tape, _: T.dense(x, layer, tape),
                                    _accumulating(T.dense_backward, layer), x,
                                    {'weight': layer.weight, 'bias': layer.bias},
                                    PRIMITIVE_TOL, seed, corrupt=corrupt)

    bn = T.BatchNormParams.fresh(2, f64)
    bn.gamma.value[...] = rng.uniform(0.5, 1.5, 2)
    bn.beta.value[...] = rng.standard_normal(2)
    x = rng.standard_normal((4, 6, 2))
    results['batchnorm1d'] = check_module(lambda x, tape, _: T.batchnorm1d(x, bn, tape),
                                          _accumulating(T.batchnorm1d_backward, bn), x,
                                          {'gamma': bn.gamma, 'beta': bn.beta},
                                          BN_TOL, seed, corrupt=corrupt)

    x = rng.standard_normal((2, 9, 3))
    unary = {
        'maxpool1d': (lambda x, tape, _: T.maxpool1d(x, 3, tape), T.maxpool1d_backward),
        'global_max_pool': (lambda x, tape, _: T.global_max_pool(x, tape), T.global_max_pool_backward),
        'global_avg_pool': (lambda x, tape, _: T.global_avg_pool(x, tape), T.global_avg_pool_backward),
        'relu': (lambda x, tape, _: T.relu(x, tape), T.relu_backward),
        'sigmoid': (lambda x, tape, _: T.sigmoid(x, tape), T.sigmoid_backward),
        'dropout': (lambda x, tape, r: T.dropout(x, 0.5, r, tape), T.dropout_backward),
    }
    for name, (fwd, bwd) in unary.items():
        step = KINKED_STEP if name in ('maxpool1d', 'global_max_pool', 'relu') else STEP
        results[name] = check_module(fwd, bwd, x.copy(), {}, PRIMITIVE_TOL, seed, step=step, corrupt=corrupt)
    return results


def check_block(kind, c_in=4, c_out=4, time=27, batch=2, alpha=2.0, seed=0, max_entries=8, corrupt=False):
    rng = np.random.default_rng(seed)
    params = B.init_block(rng, kind, c_in, c_out, alpha, dtype=np.float64)
    x = rng.standard_normal((batch, time, c_in))

    def forward(x, tape, r):
        return B.block_forward(x, params, tape, training=True, rng=r)

    return check_module(forward, lambda g, tape: B.block_backward(g, params, tape), x,
                        params.parameters(), BN_TOL, seed, KINKED_STEP, max_entries, corrupt)


def check_network(kind, depth=3, channels=4, multi_level=True, batch=2, seed=0, max_entries=6, corrupt=False):
    from sampletag.model import build, toy_config

    rng = np.random.default_rng(seed)
    net = build(toy_config(kind, depth, channels, multi_level), rng, dtype=np.float64).train()
    x = rng.standard_normal((batch, net.config.input_len, 1))

    def forward(x, tape, r):
        return net.forward(x, tape, rng=r)

    return check_module(forward, net.backward, x, net.named_parameters(), BN_TOL, seed,
                        KINKED_STEP, max_entries, corrupt)


def run_suite(kind, depth=3, seed=0, corrupt=False):
    """Primitives, the named block (with and without a shortcut projection) and a toy network."""
    reports = {f'primitive.{name}': r for name, r in check_primitives(seed, corrupt).items()}
    reports[f'block.{kind}'] = check_block(kind, seed=seed, corrupt=corrupt)
    reports[f'block.{kind}.widen'] = check_block(kind, c_in=3, c_out=5, seed=seed, corrupt=corrupt)
    reports[f'network.{kind}.depth{depth}'] = check_network(kind, depth, multi_level=depth >= 3, seed=seed,
                                                          corrupt=corrupt)
    return reports
