import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calibra import tensor as T
from calibra.data import patch_shuffle_indices
from calibra.losses import (
    GROUPS,
    GroupLabel,
    MissingGroupError,
    alignment_diagnostic,
    calibrator_loss,
    discriminator_loss,
    source_loss,
)
from calibra.nets import build_discriminator, calibrate, discriminate, features
from calibra.tensor import Tape, Tensor

from .conftest import randomize


def per_sample_ce(z: np.ndarray, y) -> np.ndarray:
    """Plain-loop oracle: -log softmax(z)[y] row by row."""
    y = np.broadcast_to(np.asarray(y), (len(z),))
    out = []
    for row, k in zip(z, y):
        m = max(row)
        out.append(-(row[k] - m - math.log(sum(math.exp(v - m) for v in row))))
    return np.array(out)


def _logits(rng, n=6, k=4, scale=2.0):
    return rng.standard_normal((n, k)) * scale


# -- source loss ------------------------------------------------------------

def test_source_uniform_is_ln10():
    assert source_loss(Tensor(np.zeros((3, 10))), [0, 4, 9]).item() == pytest.approx(math.log(10), abs=1e-12)


@pytest.mark.parametrize("k", [2, 10])
def test_source_confident_matches_closed_form(k):
    z = np.zeros((4, k))
    z[np.arange(4), np.arange(4) % k] = 20.0
    loss = source_loss(Tensor(z), np.arange(4) % k).item()
    assert loss == pytest.approx(math.log1p((k - 1) * math.exp(-20)), rel=1e-9)
    if k == 2:
        assert loss < 1e-8


def test_source_matches_per_sample_oracle(rng):
    z = _logits(rng, 9, 10)
    y = rng.integers(0, 10, 9)
    assert source_loss(Tensor(z), y).item() == pytest.approx(per_sample_ce(z, y).mean(), abs=1e-12)


def test_source_label_out_of_range():
    with pytest.raises(ValueError):
        source_loss(Tensor(np.zeros((2, 3))), [0, 3])


# -- discriminator / calibrator losses -------------------------------------

def test_group_order_is_fixed():
    assert [int(g) for g in GROUPS] == [0, 1, 2, 3]
    assert GroupLabel.SOURCE == 0 and GroupLabel.CALIBRATED_TARGET == 3


def test_discriminator_uniform_is_4ln4():
    assert discriminator_loss([Tensor(np.zeros((5, 4)))] * 4).item() == pytest.approx(4 * math.log(4), abs=1e-12)


def test_discriminator_separated_is_tiny():
    batches = []
    for g in range(4):
        z = np.full((3, 4), -15.0)
        z[:, g] = 15.0
        batches.append(Tensor(z))
    assert discriminator_loss(batches).item() < 1e-10


def test_discriminator_four_term_oracle(rng):
    zs = [_logits(rng, n) for n in (3, 5, 4, 6)]
    oracle = sum(per_sample_ce(z, g).mean() for g, z in enumerate(zs))
    assert discriminator_loss([Tensor(z) for z in zs]).item() == pytest.approx(oracle, abs=1e-12)


def test_discriminator_accepts_mapping(rng):
    zs = [Tensor(_logits(rng)) for _ in range(4)]
    as_map = {g: z for g, z in zip(reversed(GROUPS), reversed(zs))}
    assert discriminator_loss(as_map).item() == discriminator_loss(zs).item()


def test_permuted_group_order_breaks_oracle(rng):
    zs = [_logits(rng) for _ in range(4)]
    oracle = sum(per_sample_ce(z, g).mean() for g, z in enumerate(zs))
    for perm in itertools.permutations(range(4)):
        if perm == (0, 1, 2, 3):
            continue
        got = discriminator_loss([Tensor(zs[p]) for p in perm]).item()
        assert abs(got - oracle) > 1e-6


@pytest.mark.parametrize("groups", [[], [Tensor(np.zeros((2, 4)))] * 3, [Tensor(np.zeros((2, 4)))] * 3 + [None]])
def test_discriminator_missing_group(groups):
    with pytest.raises(MissingGroupError):
        discriminator_loss(groups)


def test_discriminator_missing_mapping_key():
    with pytest.raises(MissingGroupError, match="CALIBRATED_TARGET"):
        discriminator_loss({g: Tensor(np.zeros((1, 4))) for g in GROUPS[:3]})


def test_calibrator_uniform_is_4ln4():
    z = Tensor(np.zeros((7, 4)))
    assert calibrator_loss(z, z, z, z).item() == pytest.approx(4 * math.log(4), abs=1e-12)


def test_calibrator_fooled_is_tiny():
    z = np.full((3, 4), -15.0)
    z[:, 0] = 15.0
    assert calibrator_loss(*[Tensor(z)] * 4).item() < 1e-10


def test_calibrator_four_term_oracle_and_associativity(rng):
    zs = [_logits(rng, n) for n in (2, 3, 4, 5)]
    parts = [per_sample_ce(z, 0).mean() for z in zs]
    got = calibrator_loss(*[Tensor(z) for z in zs]).item()
    assert got == pytest.approx(sum(parts), abs=1e-12)
    assert got == pytest.approx((parts[0] + parts[1]) + (parts[2] + parts[3]), abs=1e-12)
    assert got == pytest.approx(parts[0] + (parts[1] + (parts[2] + parts[3])), abs=1e-12)


def test_calibrator_missing_term():
    z = Tensor(np.zeros((1, 4)))
    with pytest.raises(MissingGroupError):
        calibrator_loss(z, z, None, z)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.0, 50.0))
def test_losses_non_negative(seed, scale):
    rng = np.random.default_rng(seed)
    zs = [Tensor(_logits(rng, 3, 4, scale)) for _ in range(4)]
    assert discriminator_loss(zs).item() >= 0
    assert calibrator_loss(*zs).item() >= 0
    assert source_loss(zs[0], rng.integers(0, 4, 3)).item() >= 0


# -- gradient routing -------------------------------------------------------

@pytest.fixture
def adversarial_setup(small_pair, small_classifier, small_calibrator, rng):
    source, target = small_pair
    randomize(small_calibrator, rng, scale=0.2)
    d_pix = build_discriminator("pixel", 16, seed=1, hidden=5)
    d_feat = build_discriminator("feature", small_classifier.spec.feature_dim, seed=2, hidden=5)
    return source.images[:6], target.images[:6], small_classifier.freeze(), small_calibrator, d_pix, d_feat


def _pix(d, x, rng):
    return discriminate(d, T.take(x, patch_shuffle_indices((1, 16, 16), x.shape[0], 4, rng)))


def _all_zero(grads, params):
    return all(not np.any(grads[t]) for t in params.values())


def test_discriminator_backward_leaves_calibrator_gradient_zero(adversarial_setup, rng):
    xs, xt, clf, cal, d_pix, d_feat = adversarial_setup
    with Tape() as tape:
        cs, ct = calibrate(cal, xs), calibrate(cal, xt)
        groups = [Tensor(xs), Tensor(xt), cs.detach(), ct.detach()]
        loss = T.add(discriminator_loss([_pix(d_pix, g, rng) for g in groups]),
                     discriminator_loss([discriminate(d_feat, features(clf, g)) for g in groups]))
    grads = tape.backward(loss)
    assert _all_zero(grads, cal)
    assert not _all_zero(grads, d_pix) and not _all_zero(grads, d_feat)


def test_calibrator_backward_reaches_only_calibrator(adversarial_setup, rng):
    xs, xt, clf, cal, d_pix, d_feat = adversarial_setup
    dp, df = d_pix.frozen_view(), d_feat.frozen_view()
    with Tape() as tape:
        cs, ct = calibrate(cal, xs), calibrate(cal, xt)
        loss = calibrator_loss(discriminate(df, features(clf, cs)), discriminate(df, features(clf, ct)),
                               _pix(dp, cs, rng), _pix(dp, ct, rng))
    grads = tape.backward(loss)
    assert _all_zero(grads, d_pix) and _all_zero(grads, d_feat) and _all_zero(grads, clf)
    assert not _all_zero(grads, cal)


# -- alignment diagnostic ---------------------------------------------------

def test_alignment_identity_same_batch(small_classifier, rng):
    from calibra.nets import CalibratorConfig, build_calibrator
    cal = build_calibrator(CalibratorConfig(0.5, 2, 1, 1), (1, 16, 16))
    x = rng.uniform(-1, 1, (5, 1, 16, 16))
    assert alignment_diagnostic(small_classifier, cal, x, x).as_tuple() == (0.0, 0.0, 0.0, 0.0)


def test_alignment_identity_source_pair_zero(small_classifier, small_pair):
    from calibra.nets import CalibratorConfig, build_calibrator
    cal = build_calibrator(CalibratorConfig(0.5, 2, 1, 1), (1, 16, 16))
    source, target = small_pair
    rep = alignment_diagnostic(small_classifier, cal, source.images[:8], target.images[:8])
    assert rep.pixel_source == 0.0 and rep.feature_source == 0.0
    assert rep.pixel_target > 0 and rep.feature_target > 0


def test_alignment_empty_batch(small_classifier, small_calibrator):
    with pytest.raises(ValueError, match="non-empty"):
        alignment_diagnostic(small_classifier, small_calibrator, np.zeros((0, 1, 16, 16)), np.zeros((2, 1, 16, 16)))
