"""Finite-difference cases for every differentiable op.

Each builder draws inputs from ``rng`` and keeps them away from kinks
(relu at 0, clip bounds, pooling ties) so central differences are valid.
"""

import numpy as np

from calibra import tensor as T
from calibra.nets import CalibratorConfig, build_calibrator, build_classifier, calibrate, desk_classifier_spec, features
from calibra.tensor import Tensor


def _away_from(x, points, gap=1e-3):
    for p in points:
        near = np.abs(x - p) < gap
        x = np.where(near, p + np.sign(x - p + 1e-300) * gap * 2, x)
    return x


def _distinct(rng, shape):
    # values spaced well apart so max-pool winners are stable under +-h
    n = int(np.prod(shape))
    return Tensor((rng.permutation(n) * 0.01 + rng.uniform(0, 0.001)).reshape(shape) - n * 0.005)


def c_add(rng):
    return T.add, [Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((4,)))]


def c_sub(rng):
    return T.sub, [Tensor(rng.standard_normal((2, 3, 1))), Tensor(rng.standard_normal((3, 5)))]


def c_mul(rng):
    return T.mul, [Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((3, 1)))]


def c_scalar_mul(rng):
    c = rng.uniform(-2, 2)
    return (lambda x: T.scalar_mul(x, c)), [Tensor(rng.standard_normal((5,)))]


def c_relu(rng):
    return T.relu, [Tensor(_away_from(rng.standard_normal((4, 5)), [0.0]))]


def c_tanh(rng):
    return T.tanh, [Tensor(rng.standard_normal((4, 5)) * 2)]


def c_clip(rng):
    x = _away_from(rng.uniform(-2, 2, (4, 5)), [-1.0, 1.0])
    return (lambda t: T.clip(t, -1.0, 1.0)), [Tensor(x)]


def c_matmul(rng):
    return T.matmul, [Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((4, 2)))]


def c_linear(rng):
    return T.linear, [Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((5, 4))),
                      Tensor(rng.standard_normal(5))]


def c_reshape(rng):
    return (lambda x: T.reshape(x, (6, 2))), [Tensor(rng.standard_normal((3, 4)))]


def c_flatten(rng):
    return T.flatten, [Tensor(rng.standard_normal((2, 2, 3, 3)))]


def c_take(rng):
    idx = rng.integers(0, 12, size=(2, 7))  # repeats exercise gradient accumulation
    return (lambda x: T.take(x, idx)), [Tensor(rng.standard_normal((2, 3, 2, 2)))]


def c_sum(rng):
    return T.sum, [Tensor(rng.standard_normal((3, 4)))]


def c_mean(rng):
    return T.mean, [Tensor(rng.standard_normal((3, 4)))]


def c_conv2d(rng):
    return (lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1)), [
        Tensor(rng.standard_normal((2, 2, 5, 5))), Tensor(rng.standard_normal((3, 2, 3, 3))),
        Tensor(rng.standard_normal(3))]


def c_conv2d_strided(rng):
    return (lambda x, w: T.conv2d(x, w, stride=2, padding=1)), [
        Tensor(rng.standard_normal((1, 2, 6, 6))), Tensor(rng.standard_normal((2, 2, 3, 3)))]


def c_max_pool2d(rng):
    return T.max_pool2d, [_distinct(rng, (2, 2, 4, 4))]


def c_upsample(rng):
    return T.upsample_nearest2x, [Tensor(rng.standard_normal((2, 2, 3, 3)))]


def c_softmax(rng):
    return T.softmax, [Tensor(rng.standard_normal((3, 5)) * 2)]


def c_log_softmax(rng):
    return T.log_softmax, [Tensor(rng.standard_normal((3, 5)) * 2)]


def c_cross_entropy(rng):
    target = rng.integers(0, 4, size=3)
    return (lambda x: T.cross_entropy(x, target)), [Tensor(rng.standard_normal((3, 4)) * 2)]


def c_cross_entropy_scalar_target(rng):
    k = int(rng.integers(0, 4))
    return (lambda x: T.cross_entropy(x, k)), [Tensor(rng.standard_normal((3, 4)))]


def c_calibrate(rng):
    # whole calibrator (convs, stride, residual block, upsample, skip, tanh, clip) w.r.t. its input
    cal = build_calibrator(CalibratorConfig(0.3, width=2, depth=1, blocks=1), (1, 4, 4), seed=int(rng.integers(1 << 30)))
    for t in cal.values():
        t.data[...] = rng.standard_normal(t.shape) * 0.5
        t.requires_grad = False
    x = _away_from(rng.uniform(-0.6, 0.6, (1, 1, 4, 4)), [])
    return (lambda x: calibrate(cal, x)), [Tensor(x)]


def c_features(rng):
    spec = desk_classifier_spec((1, 16, 16), 3, widths=(2, 2), hidden=4)
    clf = build_classifier(spec, seed=int(rng.integers(1 << 30))).freeze()
    return (lambda x: features(clf, x)), [_distinct(rng, (1, 1, 16, 16))]


CASES = {name[2:]: fn for name, fn in sorted(globals().items()) if name.startswith("c_")}
