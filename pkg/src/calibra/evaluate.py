"""Accuracy, confusion matrices, segmentation metrics, trade-off reports and spectra."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import DomainDataset
from .nets import ParameterSet
from .train import predict


def _labels(dataset: DomainDataset) -> np.ndarray:
    if not dataset.has_labels:
        raise ValueError(f"{dataset.domain} dataset has no labels to evaluate against")
    return dataset.held_out_labels()


def accuracy(classifier: ParameterSet, dataset: DomainDataset,
             calibrator: ParameterSet | None = None, epsilon: float | None = None) -> float:
    labels = _labels(dataset)
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    return float(np.mean(predict(classifier, dataset.images, calibrator, epsilon) == labels))


def confusion_from_predictions(labels, preds, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    return np.bincount(n_classes * labels + preds, minlength=n_classes ** 2).reshape(n_classes, n_classes)


def confusion(classifier: ParameterSet, dataset: DomainDataset,
              calibrator: ParameterSet | None = None, epsilon: float | None = None) -> np.ndarray:
    """K x K counts, rows are true classes and columns predictions."""
    labels = _labels(dataset)
    preds = predict(classifier, dataset.images, calibrator, epsilon)
    return confusion_from_predictions(labels, preds, classifier.spec.n_classes)


def write_confusion_csv(cm: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + list(range(cm.shape[1])))
        for k, row in enumerate(cm):
            w.writerow([k] + [int(v) for v in row])


@dataclass(frozen=True)
class SegMetrics:
    miou: float
    fwiou: float
    pixel_acc: float
    iou: tuple[float, ...]


def seg_metrics(cm) -> SegMetrics:
    """mIoU, frequency-weighted IoU and pixel accuracy of a confusion matrix.

    Classes absent from both the row and the column are excluded from mIoU;
    fwIoU weights by ground-truth (row) frequency.
    """
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] < 2:
        raise ValueError(f"need a square confusion matrix with K >= 2, got shape {cm.shape}")
    total = cm.sum()
    if total <= 0:
        raise ValueError("empty confusion matrix")
    diag = np.diag(cm)
    rows, cols = cm.sum(axis=1), cm.sum(axis=0)
    union = rows + cols - diag
    present = (rows + cols) > 0
    iou = np.where(present, diag / np.where(present, union, 1.0), np.nan)
    miou = float(np.mean(iou[present]))
    fwiou = float(np.sum(rows[present] / total * iou[present]))
    return SegMetrics(miou, fwiou, float(diag.sum() / total), tuple(float(v) for v in iou))


# ---------------------------------------------------------------------------
# frequency analysis

def fft_spectrum(image) -> np.ndarray:
    """Center-shifted magnitude of the per-channel 2-D DFT (C x H x W)."""
    img = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[1] < 2 or img.shape[2] < 2:
        raise ValueError(f"expected a C x H x W image with H, W >= 2, got shape {img.shape}")
    return np.abs(np.fft.fftshift(np.fft.fft2(img), axes=(-2, -1)))


def high_freq_energy_ratio(spectrum, cutoff: float = 0.25) -> float:
    """Share of spectral energy outside the centered disk of radius ``cutoff * min(H, W)``."""
    spec = np.asarray(spectrum, dtype=np.float64)
    if spec.ndim == 2:
        spec = spec[None]
    _, H, W = spec.shape
    if H < 2 or W < 2:
        raise ValueError("spectrum must be at least 2 x 2")
    yy, xx = np.meshgrid(np.arange(H) - H // 2, np.arange(W) - W // 2, indexing="ij")
    outside = np.hypot(yy, xx) > cutoff * min(H, W)
    energy = spec ** 2
    total = energy.sum()
    if total == 0:
        return 0.0
    return float(energy[:, outside].sum() / total)


def high_freq_ratios(images, cutoff: float = 0.25) -> np.ndarray:
    return np.array([high_freq_energy_ratio(fft_spectrum(img), cutoff) for img in images])


def write_pgm(spectrum, path) -> None:
    """Write the log-magnitude of the first channel as an 8-bit binary PGM."""
    s = np.log1p(np.asarray(spectrum, dtype=np.float64))
    if s.ndim == 3:
        s = s[0]
    lo, hi = s.min(), s.max()
    img = np.zeros_like(s) if hi == lo else (s - lo) / (hi - lo)
    pixels = np.round(img * 255).astype(np.uint8)
    H, W = pixels.shape
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode() + pixels.tobytes())


# ---------------------------------------------------------------------------
# trade-off

@dataclass(frozen=True)
class TradeoffReport:
    source_before: float
    source_after: float
    target_before: float
    target_after: float
    param_ratio: float | None = None

    def __post_init__(self):
        for name in ("source_before", "source_after", "target_before", "target_after"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @property
    def source_delta(self) -> float:
        return self.source_after - self.source_before

    @property
    def target_delta(self) -> float:
        return self.target_after - self.target_before

    def as_dict(self) -> dict:
        d = asdict(self)
        d["source_delta"] = self.source_delta
        d["target_delta"] = self.target_delta
        return d

    def to_csv(self, path) -> None:
        d = self.as_dict()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(d))
            w.writerow(["" if v is None else repr(v) for v in d.values()])

    def to_text(self) -> str:
        lines = [
            f"{'domain':<8} {'before':>8} {'after':>8} {'delta':>8}",
            f"{'source':<8} {self.source_before:8.4f} {self.source_after:8.4f} {self.source_delta:+8.4f}",
            f"{'target':<8} {self.target_before:8.4f} {self.target_after:8.4f} {self.target_delta:+8.4f}",
        ]
        if self.param_ratio is not None:
            lines.append(f"calibrator/classifier parameters: {100 * self.param_ratio:.2f}%")
        return "\n".join(lines)


def tradeoff_report(classifier: ParameterSet, calibrator: ParameterSet | None,
                    source_eval: DomainDataset, target_eval: DomainDataset,
                    epsilon: float | None = None) -> TradeoffReport:
    if source_eval is None or target_eval is None:
        raise ValueError("trade-off report needs both a source and a target evaluation set")
    from .nets import count_parameters

    ratio = None
    if calibrator is not None:
        ratio = count_parameters(calibrator) / count_parameters(classifier)
    return TradeoffReport(
        source_before=accuracy(classifier, source_eval),
        source_after=accuracy(classifier, source_eval, calibrator, epsilon),
        target_before=accuracy(classifier, target_eval),
        target_after=accuracy(classifier, target_eval, calibrator, epsilon),
        param_ratio=ratio,
    )
