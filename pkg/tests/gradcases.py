"""Random graphs over each autodiff primitive, shared by the unit and acceptance suites.

Every case returns ``(loss_fn, params)`` for ``finite_diff_check``. Outputs
are contracted with a fixed random weighting so no gradient is trivially
constant.
"""

import numpy as np

from corridor_lab import autograd as ag
from corridor_lab.core import GridShape
from corridor_lab.predictor import build_model, forward_batch


def _param(rng, shape, away_from_zero=False):
    x = rng.normal(size=shape)
    if away_from_zero:
        # keeps finite differences clear of the leaky-relu kink
        x = np.sign(x) * rng.uniform(0.05, 2.0, size=shape)
    return ag.Tensor(x, requires_grad=True)


def _contract(out: ag.Tensor, rng) -> ag.Tensor:
    return ag.sum(ag.mul(out, ag.Tensor(rng.normal(size=out.shape))))


def case_add(rng):
    a, b = _param(rng, (3, 2, 4, 5)), _param(rng, (3, 2, 4, 5))
    r = rng.normal(size=a.shape)
    return (lambda: ag.sum(ag.mul(ag.add(a, b), ag.Tensor(r)))), [a, b]


def case_mul(rng):
    a, b = _param(rng, (4, 6)), _param(rng, (4, 6))
    return (lambda: ag.sum(ag.mul(a, b))), [a, b]


def case_sub(rng):
    a, b = _param(rng, (5,)), _param(rng, (5,))
    r = rng.normal(size=5)
    return (lambda: ag.sum(ag.mul(ag.sub(a, b), ag.Tensor(r)))), [a, b]


def case_concat(rng):
    a, b = _param(rng, (2, 2, 4, 4)), _param(rng, (3, 2, 4, 4))
    r = rng.normal(size=(5, 2, 4, 4))
    return (lambda: ag.sum(ag.mul(ag.concat_channels([a, b]), ag.Tensor(r)))), [a, b]


def case_conv2d(rng):
    x, w, b = _param(rng, (3, 2, 6, 7)), _param(rng, (4, 3, 3, 3)), _param(rng, (4,))
    r = rng.normal(size=(4, 2, 6, 7))
    return (lambda: ag.sum(ag.mul(ag.conv2d(x, w, b), ag.Tensor(r)))), [x, w, b]


def case_conv1x1(rng):
    x, w, b = _param(rng, (3, 2, 5, 4)), _param(rng, (2, 3)), _param(rng, (2,))
    r = rng.normal(size=(2, 2, 5, 4))
    return (lambda: ag.sum(ag.mul(ag.conv2d_1x1(x, w, b), ag.Tensor(r)))), [x, w, b]


def case_leaky_relu(rng):
    x = _param(rng, (3, 7), away_from_zero=True)
    r = rng.normal(size=(3, 7))
    return (lambda: ag.sum(ag.mul(ag.leaky_relu(x, 0.1), ag.Tensor(r)))), [x]


def case_sigmoid(rng):
    x = _param(rng, (4, 5))
    r = rng.normal(size=(4, 5))
    return (lambda: ag.sum(ag.mul(ag.sigmoid(x), ag.Tensor(r)))), [x]


def case_avg_pool(rng):
    x = _param(rng, (2, 2, 6, 8))
    r = rng.normal(size=(2, 2, 3, 4))
    return (lambda: ag.sum(ag.mul(ag.avg_pool2(x), ag.Tensor(r)))), [x]


def case_bilinear_up(rng):
    x = _param(rng, (2, 2, 3, 5))
    r = rng.normal(size=(2, 2, 6, 10))
    return (lambda: ag.sum(ag.mul(ag.bilinear_up2(x), ag.Tensor(r)))), [x]


def case_sum(rng):
    x = _param(rng, (3, 3))
    return (lambda: ag.sum(ag.mul(ag.sum(x), ag.sum(x)))), [x]


def case_bce(rng):
    z = _param(rng, (2, 3, 4, 4))
    y = rng.uniform(size=z.shape)
    return (lambda: ag.bce_with_logits_sum(z, y)), [z]


def case_outer(rng):
    u, v = _param(rng, (6,)), _param(rng, (9,))
    r = rng.normal(size=(6, 9))
    return (lambda: ag.sum(ag.mul(ag.outer(u, v), ag.Tensor(r)))), [u, v]


def case_stack(rng):
    a, b = _param(rng, (3, 4)), _param(rng, (3, 4))
    r = rng.normal(size=(3, 3, 4))
    return (lambda: ag.sum(ag.mul(ag.stack([a, b, a]), ag.Tensor(r)))), [a, b]


def case_combine_sum(rng):
    x, p = _param(rng, (5, 2, 4, 6)), _param(rng, (4, 6))
    r = rng.normal(size=x.shape)
    return (lambda: ag.sum(ag.mul(ag.combine_channels(x, p, [0, 2, 3], "sum"), ag.Tensor(r)))), [x, p]


def case_combine_mul(rng):
    x, p = _param(rng, (5, 2, 4, 6)), _param(rng, (2, 4, 6))
    r = rng.normal(size=x.shape)
    return (lambda: ag.sum(ag.mul(ag.combine_channels(x, p, [1, 4], "mul"), ag.Tensor(r)))), [x, p]


def case_linear(rng):
    x, w, b = _param(rng, (4, 5)), _param(rng, (5, 3)), _param(rng, (3,))
    r = rng.normal(size=(4, 3))
    return (lambda: ag.sum(ag.mul(ag.linear(x, w, b), ag.Tensor(r)))), [x, w, b]


def case_squared_error(rng):
    p = _param(rng, (4, 6))
    y = rng.normal(size=(4, 6))
    return (lambda: ag.squared_error_sum(p, y)), [p]


PRIMITIVE_CASES = {
    "add": case_add,
    "sub": case_sub,
    "mul": case_mul,
    "concat_channels": case_concat,
    "conv2d": case_conv2d,
    "conv2d_1x1": case_conv1x1,
    "leaky_relu": case_leaky_relu,
    "sigmoid": case_sigmoid,
    "avg_pool2": case_avg_pool,
    "bilinear_up2": case_bilinear_up,
    "sum": case_sum,
    "bce_with_logits_sum": case_bce,
    "outer": case_outer,
    "stack": case_stack,
    "combine_channels_sum": case_combine_sum,
    "combine_channels_mul": case_combine_mul,
    "linear": case_linear,
    "squared_error_sum": case_squared_error,
}


def full_loss_case(rng, shape=GridShape(8, 12), hist_len=2, pred_len=2, classes=3, with_prompt=False):
    """Summed heatmap BCE of a whole predictor on one random input; params include every weight."""
    model = build_model(shape, hist_len, pred_len, classes, seed=int(rng.integers(2 ** 31)))
    x = rng.uniform(size=(hist_len + classes, 2, shape.h, shape.w))
    y = rng.uniform(size=(pred_len, 2, shape.h, shape.w))
    params = [t for part in model.params.values() for t in part.values()]
    prompt = None
    if with_prompt:
        prompt = _param(rng, (shape.h, shape.w))
        params = params + [prompt]
    return (lambda: ag.bce_with_logits_sum(forward_batch(model, x, prompt), y)), params
