import cmath
import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from calibra.data import DomainDataset
from calibra.evaluate import (
    TradeoffReport,
    accuracy,
    confusion,
    confusion_from_predictions,
    fft_spectrum,
    high_freq_energy_ratio,
    high_freq_ratios,
    seg_metrics,
    tradeoff_report,
    write_confusion_csv,
    write_pgm,
)
from calibra.nets import CalibratorConfig, build_calibrator, logits

from .conftest import randomize


# -- segmentation metrics ---------------------------------------------------

def seg_oracle(cm):
    """Expand counts into labeled pixels and intersect per-class index sets."""
    cm = np.asarray(cm, dtype=np.int64)
    K = len(cm)
    truth, pred = [], []
    for i in range(K):
        for j in range(K):
            truth += [i] * cm[i, j]
            pred += [j] * cm[i, j]
    total = len(truth)
    ious, weights = [], []
    for k in range(K):
        t = {n for n, v in enumerate(truth) if v == k}
        p = {n for n, v in enumerate(pred) if v == k}
        if t or p:
            ious.append(len(t & p) / len(t | p))
            weights.append(len(t) / total)
    miou = 0.0
    for v in ious:
        miou += v
    fw = 0.0
    for w, v in zip(weights, ious):
        fw += w * v
    return miou / len(ious), fw, sum(truth[n] == pred[n] for n in range(total)) / total


def test_seg_identity():
    m = seg_metrics(np.eye(3, dtype=int))
    assert (m.miou, m.fwiou, m.pixel_acc) == (1.0, 1.0, 1.0)


def test_seg_hand_computed():
    m = seg_metrics([[2, 1], [1, 2]])
    assert m.iou == (0.5, 0.5)
    assert m.miou == 0.5 and m.fwiou == 0.5
    assert m.pixel_acc == pytest.approx(4 / 6, abs=1e-15)


def test_seg_matches_oracle_on_random_matrices():
    rng = np.random.default_rng(0)
    for _ in range(200):
        K = int(rng.integers(2, 7))
        cm = rng.integers(0, 6, (K, K))
        cm[rng.random((K, K)) < 0.3] = 0
        if cm.sum() == 0:
            cm[0, 0] = 1
        m = seg_metrics(cm)
        assert (m.miou, m.fwiou, m.pixel_acc) == seg_oracle(cm)


def test_seg_excludes_absent_classes():
    m = seg_metrics([[3, 0, 0], [0, 0, 0], [1, 0, 2]])
    assert np.isnan(m.iou[1])
    assert m.miou == pytest.approx((0.75 + 2 / 3) / 2)


@pytest.mark.parametrize("cm", [[[0, 0], [0, 0]], [[5]], [[1, 2, 3]]])
def test_seg_errors(cm):
    with pytest.raises(ValueError):
        seg_metrics(cm)


# -- spectra ----------------------------------------------------------------

def direct_dft(img):
    H, W = img.shape
    out = np.zeros((H, W), dtype=complex)
    for u in range(H):
        for v in range(W):
            out[u, v] = sum(img[y, x] * cmath.exp(-2j * cmath.pi * (u * y / H + v * x / W))
                            for y in range(H) for x in range(W))
    return out


@pytest.mark.parametrize("shape", [(2, 2), (3, 5), (8, 8), (7, 4)])
def test_spectrum_matches_direct_dft(shape, rng):
    img = rng.standard_normal(shape)
    expected = np.abs(np.fft.fftshift(direct_dft(img)))
    np.testing.assert_allclose(fft_spectrum(img)[0], expected, rtol=0, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 16), st.integers(2, 16)),
              elements=st.floats(-1, 1)))
def test_parseval(img):
    spec = fft_spectrum(img)
    _, H, W = img.shape
    assert (spec ** 2).sum() / (H * W) == pytest.approx((img ** 2).sum(), abs=1e-9)
    assert 0.0 <= high_freq_energy_ratio(spec) <= 1.0


def test_constant_image_has_no_high_frequencies():
    spec = fft_spectrum(np.full((1, 8, 8), 0.7))
    assert high_freq_energy_ratio(spec) == 0.0
    assert spec[0, 4, 4] == pytest.approx(0.7 * 64)


@pytest.mark.parametrize("cutoff", [0.1, 0.25, 0.45])
def test_checkerboard_is_all_high_frequency(cutoff):
    board = np.where(np.add.outer(np.arange(16), np.arange(16)) % 2, 1.0, -1.0)
    assert high_freq_energy_ratio(fft_spectrum(board), cutoff) == pytest.approx(1.0, abs=1e-12)


def test_zero_image_ratio():
    assert high_freq_energy_ratio(np.zeros((4, 4))) == 0.0


@pytest.mark.parametrize("shape", [(1, 1, 8), (8,), (2, 1, 1, 1)])
def test_degenerate_spectrum(shape):
    with pytest.raises(ValueError):
        fft_spectrum(np.zeros(shape))


def test_high_freq_ratios_batch(rng):
    x = rng.uniform(-1, 1, (3, 1, 8, 8))
    np.testing.assert_array_equal(high_freq_ratios(x), [high_freq_energy_ratio(fft_spectrum(i)) for i in x])


def test_pgm_header(tmp_path, rng):
    write_pgm(fft_spectrum(rng.standard_normal((1, 6, 5))), tmp_path / "s.pgm")
    buf = (tmp_path / "s.pgm").read_bytes()
    assert buf.startswith(b"P5\n5 6\n255\n") and len(buf) == len(b"P5\n5 6\n255\n") + 30


# -- accuracy and confusion -------------------------------------------------

def _constant_classifier(clf, c):
    last = [n for n in clf if n.endswith(".weight")][-1]
    clf[last].data[...] = 0.0
    bias = clf[last.replace("weight", "bias")].data
    bias[...] = 0.0
    bias[c] = 1.0
    return clf


@pytest.mark.parametrize("c", [0, 2])
def test_constant_predictor_accuracy_is_prior(small_classifier, rng, c):
    labels = np.array([0, 0, 0, 1, 2, 2, 3, 3, 3, 3])
    ds = DomainDataset(rng.uniform(-1, 1, (10, 1, 16, 16)), labels)
    assert accuracy(_constant_classifier(small_classifier, c), ds) == np.mean(labels == c)


def test_ties_go_to_lowest_index(small_classifier, rng):
    clf = _constant_classifier(small_classifier, 0)
    clf["linear9.bias"].data[...] = 1.0
    ds = DomainDataset(rng.uniform(-1, 1, (4, 1, 16, 16)), [0, 1, 2, 3])
    assert accuracy(clf, ds) == 0.25


def test_identity_calibrator_leaves_metrics(small_classifier, small_pair):
    cal = build_calibrator(CalibratorConfig(0.5, 2, 1, 1), (1, 16, 16))
    for ds in small_pair:
        assert accuracy(small_classifier, ds, cal) == accuracy(small_classifier, ds)
        np.testing.assert_array_equal(confusion(small_classifier, ds, cal), confusion(small_classifier, ds))


def test_confusion_consistency(small_classifier, small_pair, rng):
    _, target = small_pair
    cal = randomize(build_calibrator(CalibratorConfig(0.5, 2, 1, 1), (1, 16, 16)), rng)
    cm = confusion(small_classifier, target, cal)
    assert cm.sum() == len(target)
    np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(target.held_out_labels(), minlength=4))
    assert np.trace(cm) / cm.sum() == accuracy(small_classifier, target, cal)


def test_perfect_predictions_are_diagonal():
    y = np.array([0, 1, 2, 2, 1])
    np.testing.assert_array_equal(confusion_from_predictions(y, y, 3), np.diag([1, 2, 2]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(1, 20), st.integers(2, 6)), elements=st.integers(-40, 40)),
       st.sampled_from([lambda z: z ** 3, lambda z: np.exp(z / 4), lambda z: 2.5 * z - 7]))
def test_argmax_invariant_under_monotone_maps(z, f):
    # eighth-steps keep images of distinct logits distinct in float64, ties included
    z = z / 8.0
    np.testing.assert_array_equal(np.argmax(f(z), axis=1), np.argmax(z, axis=1))


def test_accuracy_uses_logit_argmax(small_classifier, small_pair):
    source, _ = small_pair
    z = logits(small_classifier, source.images).data
    assert accuracy(small_classifier, source) == np.mean(np.argmax(z, axis=1) == source.labels)


def test_unlabeled_dataset_rejected(small_classifier):
    ds = DomainDataset(np.zeros((2, 1, 16, 16)), None, "target", labels_visible=False)
    with pytest.raises(ValueError, match="no labels"):
        accuracy(small_classifier, ds)


def test_confusion_csv(tmp_path):
    write_confusion_csv(np.array([[3, 1], [0, 2]]), tmp_path / "cm.csv")
    rows = list(csv.reader(open(tmp_path / "cm.csv")))
    assert rows == [["true\\pred", "0", "1"], ["0", "3", "1"], ["1", "0", "2"]]


# -- trade-off --------------------------------------------------------------

def test_tradeoff_identity(small_classifier, small_pair):
    cal = build_calibrator(CalibratorConfig(0.5, 2, 1, 1), (1, 16, 16))
    rep = tradeoff_report(small_classifier, cal, *small_pair)
    assert rep.source_before == rep.source_after and rep.target_before == rep.target_after
    assert rep.source_delta == 0 and rep.target_delta == 0


def test_tradeoff_deltas_and_outputs(tmp_path):
    rep = TradeoffReport(0.9, 0.88, 0.3, 0.75, param_ratio=0.05)
    assert rep.source_delta == 0.88 - 0.9 and rep.target_delta == 0.75 - 0.3
    rep.to_csv(tmp_path / "t.csv")
    row = next(csv.DictReader(open(tmp_path / "t.csv")))
    assert float(row["target_delta"]) == rep.target_delta
    assert "5.00%" in rep.to_text()


def test_tradeoff_validation(small_classifier, small_pair):
    with pytest.raises(ValueError):
        TradeoffReport(1.2, 0.5, 0.5, 0.5)
    with pytest.raises(ValueError, match="both"):
        tradeoff_report(small_classifier, None, small_pair[0], None)
