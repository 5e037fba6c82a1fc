"""Source, discriminator and calibrator losses, plus the alignment diagnostic."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .nets import ParameterSet, calibrate, features
from .tensor import Tensor


class GroupLabel(IntEnum):
    """Discriminator target groups; the integer value is the class index."""

    SOURCE = 0
    TARGET = 1
    CALIBRATED_SOURCE = 2
    CALIBRATED_TARGET = 3


GROUPS = tuple(GroupLabel)


class MissingGroupError(ValueError):
    pass


def source_loss(logits: Tensor, labels) -> Tensor:
    """Mean categorical cross-entropy of the classifier on labeled source data."""
    return T.cross_entropy(logits, labels)


def _ordered(group_logits) -> list[Tensor]:
    if isinstance(group_logits, Mapping):
        missing = [g.name for g in GROUPS if g not in group_logits]
        if missing:
            raise MissingGroupError(f"missing discriminator logits for groups {missing}")
        return [group_logits[g] for g in GROUPS]
    group_logits = list(group_logits)
    if len(group_logits) != len(GROUPS) or any(t is None for t in group_logits):
        raise MissingGroupError(f"need logits for all {len(GROUPS)} groups, got {len(group_logits)}")
    return group_logits


def discriminator_loss(group_logits: Sequence[Tensor] | Mapping[GroupLabel, Tensor]) -> Tensor:
    """Sum over the four groups of the mean cross-entropy against each group's own label.

    Logits are given in group order (source, target, calibrated source,
    calibrated target).  Callers detach calibrated inputs before computing
    these logits so no gradient reaches the calibrator.
    """
    terms = [T.cross_entropy(lg, int(g)) for g, lg in zip(GROUPS, _ordered(group_logits))]
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def calibrator_loss(feat_cal_source: Tensor, feat_cal_target: Tensor,
                    pix_cal_source: Tensor, pix_cal_target: Tensor) -> Tensor:
    """Cross-entropy pulling calibrated groups toward the source label, summed over both discriminators."""
    parts = (feat_cal_source, feat_cal_target, pix_cal_source, pix_cal_target)
    if any(p is None for p in parts):
        raise MissingGroupError("calibrator loss needs all four logit batches")
    total = None
    for p in parts:
        term = T.cross_entropy(p, int(GroupLabel.SOURCE))
        total = term if total is None else T.add(total, term)
    return total


@dataclass(frozen=True)
class AlignmentReport:
    """Batch-mean L2 distances used to monitor the alignment constraints.

    This is a proxy; nothing optimizes it directly.
    """

    pixel_target: float   # ||mean X_s - mean G(X_t)||
    pixel_source: float   # ||mean X_s - mean G(X_s)||
    feature_target: float  # ||mean M(X_s) - mean M(G(X_t))||
    feature_source: float  # ||mean M(X_s) - mean M(G(X_s))||

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.pixel_target, self.pixel_source, self.feature_target, self.feature_source)


def _mean_gap(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a.mean(axis=0) - b.mean(axis=0)))


def alignment_diagnostic(classifier: ParameterSet, calibrator: ParameterSet,
                         source_batch, target_batch, epsilon: float | None = None) -> AlignmentReport:
    xs = source_batch.data if isinstance(source_batch, Tensor) else np.asarray(source_batch, dtype=np.float64)
    xt = target_batch.data if isinstance(target_batch, Tensor) else np.asarray(target_batch, dtype=np.float64)
    if len(xs) == 0 or len(xt) == 0:
        raise ValueError("alignment diagnostic needs non-empty batches")
    cs = calibrate(calibrator, xs, epsilon).data
    ct = calibrate(calibrator, xt, epsilon).data
    fs = features(classifier, xs).data
    return AlignmentReport(
        pixel_target=_mean_gap(xs, ct),
        pixel_source=_mean_gap(xs, cs),
        feature_target=_mean_gap(fs, features(classifier, ct).data),
        feature_source=_mean_gap(fs, features(classifier, cs).data),
    )
