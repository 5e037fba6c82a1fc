from collections import OrderedDict

import numpy as np
import pytest

from calibra.nets import (
    FrozenParameterError,
    LayerSpec,
    NetworkSpec,
    ParameterSet,
    build_classifier,
    desk_classifier_spec,
)
from calibra.optim import AdamState, adam_step
from calibra.tensor import ShapeError, Tape, Tensor


def _single(value) -> ParameterSet:
    spec = NetworkSpec("pixel_disc", (1,), (LayerSpec("linear", 4),))
    return ParameterSet(spec, OrderedDict(w=Tensor(np.array(value, dtype=float), requires_grad=True)))


def test_zero_gradient_leaves_params_unchanged(small_classifier):
    before = small_classifier.digest()
    state = AdamState(lr=0.1)
    adam_step(small_classifier, {n: np.zeros(t.shape) for n, t in small_classifier.items()}, state)
    adam_step(small_classifier, {}, state)
    assert small_classifier.digest() == before
    assert state.step == 2


def test_first_step_moves_by_lr():
    # bias correction makes the first step exactly lr * g / (|g| + eps)
    p = _single([1.0, -2.0, 3.0])
    g = np.array([0.5, -4.0, 1e-3])
    adam_step(p, {"w": g}, AdamState(lr=0.01))
    expected = np.array([1.0, -2.0, 3.0]) - 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p["w"].data, expected, rtol=0, atol=1e-15)


def test_second_step_by_hand():
    p = _single([0.0])
    s = AdamState(lr=0.1, beta1=0.5, beta2=0.9)
    adam_step(p, {"w": np.array([1.0])}, s)
    adam_step(p, {"w": np.array([3.0])}, s)
    m = (0.5 * 0.5 * 1.0 + 0.5 * 3.0) / (1 - 0.25)
    v = (0.9 * 0.1 * 1.0 + 0.1 * 9.0) / (1 - 0.81)
    expected = -0.1 / (1 + 1e-8) - 0.1 * m / (np.sqrt(v) + 1e-8)
    assert p["w"].data[0] == pytest.approx(expected, abs=1e-14)


def test_descends_quadratic():
    p = _single([2.0, -1.5])
    state = AdamState(lr=0.05)
    losses = []
    for _ in range(40):
        with Tape() as tape:
            loss = (p["w"] * p["w"]).sum()
        losses.append(float(loss.data))
        adam_step(p, {"w": tape.backward(loss)[p["w"]]}, state)
    assert losses[1] < losses[0]
    assert losses[-1] < 0.1 * losses[0]


def test_frozen_params_rejected_and_untouched(small_classifier):
    small_classifier.freeze()
    before = small_classifier.digest()
    with pytest.raises(FrozenParameterError):
        adam_step(small_classifier, {n: np.ones(t.shape) for n, t in small_classifier.items()}, AdamState())
    assert small_classifier.digest() == before


def test_frozen_view_rejected(small_classifier):
    with pytest.raises(FrozenParameterError):
        adam_step(small_classifier.frozen_view(), {}, AdamState())


def test_shape_mismatch_raises():
    p = _single([1.0, 2.0])
    with pytest.raises(ShapeError, match="shape"):
        adam_step(p, {"w": np.ones(3)}, AdamState())


def test_unknown_name_raises():
    with pytest.raises(KeyError):
        adam_step(_single([1.0]), {"nope": np.ones(1)}, AdamState())


def test_zero_lr_is_inert(small_classifier, rng):
    before = small_classifier.digest()
    state = AdamState(lr=0.0)
    for _ in range(3):
        adam_step(small_classifier, {n: rng.standard_normal(t.shape) for n, t in small_classifier.items()}, state)
    assert small_classifier.digest() == before
    assert state.step == 3


@pytest.mark.parametrize("kw", [dict(lr=-1.0), dict(beta1=1.0), dict(beta2=0.0), dict(eps=0.0)])
def test_invalid_hyperparameters(kw):
    with pytest.raises(ValueError):
        AdamState(**kw)


def test_same_inputs_same_result():
    spec = desk_classifier_spec((1, 16, 16), 3, widths=(2, 2), hidden=4)
    a, b = build_classifier(spec, seed=1), build_classifier(spec, seed=1)
    g = {n: np.full(t.shape, 0.3) for n, t in a.items()}
    adam_step(a, g, AdamState(lr=0.01))
    adam_step(b, g, AdamState(lr=0.01))
    assert a.digest() == b.digest()
