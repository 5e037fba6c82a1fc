"""Source-classifier training and the adversarial calibrator loop."""

from __future__ import annotations

import csv
import logging
import time
from contextlib import nullcontext as _no_tape
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import DomainDataset, batch_indices, patch_shuffle_indices
from .losses import alignment_diagnostic, calibrator_loss, discriminator_loss, source_loss
from .nets import (
    CalibratorConfig,
    ParameterSet,
    build_calibrator,
    build_discriminator,
    calibrate,
    discriminate,
    features,
    logits,
)
from .optim import Adam
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

STEP_FIELDS = ("step", "epoch", "L_source", "L_featD", "L_pixD", "L_cal",
               "align_pixel_target", "align_pixel_source", "align_feature_target", "align_feature_source")


class NotFrozenError(RuntimeError):
    """The source classifier must be frozen before calibrator training."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    disc_steps_per_cal_step: int = 1
    epsilon: float = 0.05
    patch_size: int = 8
    seed: int = 0
    disc_hidden: int = 64
    log_every: int = 1
    checkpoint_every: int = 0
    # calibrator-only knobs
    cal_lr: float | None = None
    select: bool = True
    select_tolerance: float = 0.01
    evals_per_epoch: int = 1
    # decay of the calibrator weight average used for evaluation; 0 disables it
    ema: float = 0.0
    beta1: float = 0.9

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        for name in ("batch_size", "epochs", "disc_steps_per_cal_step", "patch_size", "disc_hidden", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not (0.0 <= self.epsilon <= 2.0):
            raise ValueError("epsilon must lie in [0, 2]")
        if not (0.0 <= self.ema < 1.0):
            raise ValueError("ema must lie in [0, 1)")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in known:
                continue
            typ = known[key].type
            if isinstance(raw, str):
                if "bool" in str(typ):
                    raw = raw.strip().lower() in ("1", "true", "yes", "on")
                elif "int" in str(typ) and "float" not in str(typ):
                    raw = int(raw)
                elif raw.strip().lower() == "none":
                    raw = None
                else:
                    raw = float(raw)
            kw[key] = raw
        return cls(**kw)


@dataclass
class RunLog:
    """Append-only record of one training run."""

    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    selected_step: int | None = None

    def log_step(self, **row) -> None:
        if self.steps and row["step"] <= self.steps[-1]["step"]:
            raise ValueError("step index must increase")
        self.steps.append(row)

    def log_epoch(self, **row) -> None:
        self.epochs.append(row)

    def write_steps_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=STEP_FIELDS, restval="")
            w.writeheader()
            for row in self.steps:
                w.writerow({k: _fmt(row.get(k, "")) for k in STEP_FIELDS})

    def write_epochs_csv(self, path) -> None:
        keys: list[str] = []
        for row in self.epochs:
            keys += [k for k in row if k not in keys]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, restval="")
            w.writeheader()
            for row in self.epochs:
                w.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def predict(classifier: ParameterSet, images: np.ndarray, calibrator: ParameterSet | None = None,
            epsilon: float | None = None, batch_size: int = 256) -> np.ndarray:
    """Arg-max class per image (ties go to the lowest index)."""
    out = []
    for i in range(0, len(images), batch_size):
        x = images[i:i + batch_size]
        if calibrator is not None:
            x = calibrate(calibrator, x, epsilon).data
        out.append(np.argmax(logits(classifier, x).data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# source training

def train_source(classifier: ParameterSet, source: DomainDataset, cfg: TrainConfig,
                 checkpoint_dir=None) -> tuple[ParameterSet, RunLog]:
    """Fit the classifier on labeled source data with Adam on the source loss."""
    if not source.labels_visible:
        raise ValueError("train_source needs a dataset with visible labels")
    labels = source.labels
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(classifier, lr=cfg.lr)
    log = RunLog()
    start = time.perf_counter()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in batch_indices(len(source), cfg.batch_size, rng):
            with Tape() as tape:
                loss = source_loss(logits(classifier, source.images[idx]), labels[idx])
            opt.step(tape.backward(loss))
            step += 1
            losses.append(loss.item())
            if step % cfg.log_every == 0:
                log.log_step(step=step, epoch=epoch, L_source=loss.item())
        acc = float(np.mean(predict(classifier, source.images) == labels))
        log.log_epoch(epoch=epoch, train_loss=float(np.mean(losses)), train_acc=acc)
        logger.info("source epoch %d loss %.4f acc %.4f", epoch, np.mean(losses), acc)
        _maybe_checkpoint(classifier, checkpoint_dir, cfg, epoch)
    log.wall_clock = time.perf_counter() - start
    return classifier, log


def _maybe_checkpoint(params, checkpoint_dir, cfg, epoch):
    if checkpoint_dir is None or not cfg.checkpoint_every or epoch % cfg.checkpoint_every:
        return
    from pathlib import Path

    from .nets import save_checkpoint
    save_checkpoint(params, Path(checkpoint_dir) / f"{params.spec.role}_epoch{epoch:03d}.ckpt")


# ---------------------------------------------------------------------------
# adversarial calibrator training

def _pixel_logits(d_pixel: ParameterSet, images, patch_size: int, rng) -> Tensor:
    x = images if isinstance(images, Tensor) else Tensor(images)
    idx = patch_shuffle_indices(x.shape[1:], x.shape[0], patch_size, rng)
    return discriminate(d_pixel, T.take(x, idx))


def _selection_stats(classifier, calibrator, d_pixel, d_feat, probe_s, probe_t, cfg, rng) -> dict:
    """Label-free statistics of the current calibrator on fixed probe batches.

    ``confusion`` is the mean source-group probability both discriminators
    assign to calibrated target images.
    """
    ct = calibrate(calibrator, probe_t, cfg.epsilon)
    fct = features(classifier, ct)
    pf = T.softmax(discriminate(d_feat, fct)).data[:, 0]
    pp = T.softmax(_pixel_logits(d_pixel, ct, cfg.patch_size, rng)).data[:, 0]
    a = alignment_diagnostic(classifier, calibrator, probe_s, probe_t, cfg.epsilon)
    return dict(confusion=float(0.5 * (pf.mean() + pp.mean())),
                confusion_feat=float(pf.mean()), confusion_pix=float(pp.mean()),
                align_feature_target=a.feature_target, align_pixel_target=a.pixel_target)


def _batched_features(classifier, images, batch_size=256) -> np.ndarray:
    return np.concatenate([features(classifier, images[i:i + batch_size]).data
                           for i in range(0, len(images), batch_size)])


def make_discriminators(classifier: ParameterSet, image_shape, cfg: TrainConfig
                        ) -> tuple[ParameterSet, ParameterSet]:
    c = image_shape[0]
    d_pixel = build_discriminator("pixel", c * cfg.patch_size ** 2, seed=cfg.seed + 1, hidden=cfg.disc_hidden)
    d_feat = build_discriminator("feature", classifier.spec.feature_dim, seed=cfg.seed + 2, hidden=cfg.disc_hidden)
    return d_pixel, d_feat


def train_calibrator(classifier: ParameterSet, calibrator: ParameterSet, d_pixel: ParameterSet,
                     d_feat: ParameterSet, source: DomainDataset, target: DomainDataset,
                     cfg: TrainConfig, source_val: DomainDataset | None = None,
                     checkpoint_dir=None, on_eval=None) -> tuple[ParameterSet, RunLog]:
    """Adversarial calibrator training against a frozen classifier.

    Each iteration builds the four groups (source, target, calibrated source,
    calibrated target), takes one step on both discriminators with the
    calibrated images detached, and every ``disc_steps_per_cal_step``
    iterations one calibrator step through the frozen discriminators and
    classifier.  Target labels are never read.

    With ``cfg.select`` and a labeled ``source_val`` set, the returned
    calibrator is the epoch snapshot with the highest discriminator confusion
    among those whose source validation accuracy stays within
    ``cfg.select_tolerance`` of the uncalibrated classifier.
    """
    if not classifier.frozen:
        raise NotFrozenError("freeze the source classifier before calibrator training")
    if source.image_shape != target.image_shape or source.image_shape != calibrator.spec.input_shape:
        raise T.ShapeError(
            f"image shapes disagree: source {source.image_shape}, target {target.image_shape}, "
            f"calibrator {calibrator.spec.input_shape}")
    if d_pixel.spec.input_shape != (source.image_shape[0] * cfg.patch_size ** 2,):
        raise T.ShapeError(f"pixel discriminator input {d_pixel.spec.input_shape} does not match patch size {cfg.patch_size}")
    if d_feat.spec.input_shape != (classifier.spec.feature_dim,):
        raise T.ShapeError(f"feature discriminator input {d_feat.spec.input_shape} does not match features")

    eps = cfg.epsilon
    rng = np.random.default_rng(cfg.seed)
    opt_cal = Adam(calibrator, lr=cfg.lr if cfg.cal_lr is None else cfg.cal_lr, beta1=cfg.beta1)
    opt_pix = Adam(d_pixel, lr=cfg.lr, beta1=cfg.beta1)
    opt_feat = Adam(d_feat, lr=cfg.lr, beta1=cfg.beta1)
    log = RunLog()
    start = time.perf_counter()

    selecting = cfg.select and source_val is not None
    if selecting:
        val_labels = source_val.labels
        base_val = float(np.mean(predict(classifier, source_val.images) == val_labels))
        best = (-np.inf, None, None)  # (confusion, epoch, snapshot)
    probe_s = source.images[rng.permutation(len(source))[:256]]
    probe_t = target.images[rng.permutation(len(target))[:256]]
    # the classifier is frozen, so features of uncalibrated images are constants
    src_feats = _batched_features(classifier, source.images)
    tgt_feats = _batched_features(classifier, target.images)

    # evaluated / selected model: the raw calibrator or its running weight average
    averaged = calibrator.copy() if cfg.ema > 0 else calibrator

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        sb = batch_indices(len(source), cfg.batch_size, rng)
        tb = batch_indices(len(target), cfg.batch_size, rng)
        n_iter = max(len(sb), len(tb))
        k = min(cfg.evals_per_epoch, n_iter)
        eval_points = {round(n_iter * (j + 1) / k) for j in range(k)}
        for it in range(n_iter):
            si, ti = sb[it % len(sb)], tb[it % len(tb)]
            n = min(len(si), len(ti))
            si, ti = si[:n], ti[:n]
            xs, xt = source.images[si], target.images[ti]

            cal_step = (it + 1) % cfg.disc_steps_per_cal_step == 0
            # The calibrator does not change during the discriminator step, so one
            # taped forward serves both steps; the discriminator step only sees
            # detached copies.
            cal_tape = Tape()
            with cal_tape if cal_step else _no_tape():
                cs_t = calibrate(calibrator, xs, eps)
                ct_t = calibrate(calibrator, xt, eps)
                fcs_t = features(classifier, cs_t)
                fct_t = features(classifier, ct_t)

            groups = (xs, xt, cs_t.data, ct_t.data)
            feats = (src_feats[si], tgt_feats[ti], fcs_t.data, fct_t.data)
            with Tape() as tape:
                pix = [_pixel_logits(d_pixel, g, cfg.patch_size, rng) for g in groups]
                feat = [discriminate(d_feat, f) for f in feats]
                l_pix = discriminator_loss(pix)
                l_feat = discriminator_loss(feat)
                total = T.add(l_pix, l_feat)
            grads = tape.backward(total)
            opt_pix.step(grads)
            opt_feat.step(grads)

            row = dict(step=step + 1, epoch=epoch, L_featD=l_feat.item(), L_pixD=l_pix.item())
            if cal_step:
                dp, df = d_pixel.frozen_view(), d_feat.frozen_view()
                with cal_tape:
                    l_cal = calibrator_loss(
                        discriminate(df, fcs_t),
                        discriminate(df, fct_t),
                        _pixel_logits(dp, cs_t, cfg.patch_size, rng),
                        _pixel_logits(dp, ct_t, cfg.patch_size, rng),
                    )
                opt_cal.step(cal_tape.backward(l_cal))
                if averaged is not calibrator:
                    for name, t in calibrator.items():
                        a = averaged[name].data
                        a *= cfg.ema
                        a += (1.0 - cfg.ema) * t.data
                row["L_cal"] = l_cal.item()
            step += 1
            if step % cfg.log_every == 0:
                a = alignment_diagnostic(classifier, calibrator, xs, xt, eps)
                row.update(align_pixel_target=a.pixel_target, align_pixel_source=a.pixel_source,
                           align_feature_target=a.feature_target, align_feature_source=a.feature_source)
                log.log_step(**row)

            if (it + 1) in eval_points:
                erow = dict(epoch=epoch, step=step, **_selection_stats(
                    classifier, averaged, d_pixel, d_feat, probe_s, probe_t, cfg, rng))
                if selecting:
                    val_acc = float(np.mean(predict(classifier, source_val.images, averaged, eps) == val_labels))
                    erow["source_val_acc"] = val_acc
                    if val_acc >= base_val - cfg.select_tolerance and erow["confusion"] > best[0]:
                        best = (erow["confusion"], step, averaged.copy())
                if on_eval is not None:
                    on_eval(averaged, erow)
                log.log_epoch(**erow)
                logger.info("calibrator epoch %d %s", epoch, erow)
        _maybe_checkpoint(calibrator, checkpoint_dir, cfg, epoch)

    if averaged is not calibrator:
        calibrator.load_values(averaged)
    if selecting:
        if best[2] is None:
            # no epoch kept source accuracy: fall back to the identity map
            calibrator.load_values(build_calibrator(calibrator.spec.calibrator, calibrator.spec.input_shape))
            log.selected_step = 0
        else:
            calibrator.load_values(best[2])
            log.selected_step = best[1]
    log.wall_clock = time.perf_counter() - start
    return calibrator, log


# ---------------------------------------------------------------------------
# L-infinity sweep

@dataclass(frozen=True)
class SweepRow:
    epsilon: float
    source_acc: float
    target_acc: float


def _sweep_point(classifier, cal_cfg, source, target, source_val, cfg, eps, source_eval, target_eval):
    from .evaluate import accuracy

    run_cfg = replace(cfg, epsilon=eps)
    cal = build_calibrator(replace(cal_cfg, epsilon=eps), source.image_shape, seed=cfg.seed)
    d_pixel, d_feat = make_discriminators(classifier, source.image_shape, run_cfg)
    cal, _ = train_calibrator(classifier, cal, d_pixel, d_feat, source, target, run_cfg, source_val=source_val)
    return SweepRow(eps, accuracy(classifier, source_eval, cal), accuracy(classifier, target_eval, cal))


def lsweep(epsilons: Sequence[float], classifier: ParameterSet, cal_cfg: CalibratorConfig,
           source: DomainDataset, target: DomainDataset, cfg: TrainConfig,
           source_val: DomainDataset | None = None, n_jobs: int = 1,
           source_eval: DomainDataset | None = None, target_eval: DomainDataset | None = None
           ) -> list[SweepRow]:
    """Independent calibrator run per epsilon (shared seeds); one row each.

    Accuracies are read on ``source_eval`` / ``target_eval`` (default: the
    training sets).  Target labels are used for this readout only.
    """
    epsilons = [float(e) for e in epsilons]
    if len(epsilons) < 2:
        raise ValueError("lsweep needs at least two epsilon values")
    source_eval = source if source_eval is None else source_eval
    target_eval = target if target_eval is None else target_eval
    args = (classifier, cal_cfg, source, target, source_val, cfg)
    if n_jobs == 1:
        return [_sweep_point(*args, e, source_eval, target_eval) for e in epsilons]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=n_jobs)(delayed(_sweep_point)(*args, e, source_eval, target_eval) for e in epsilons)


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epsilon", "source_acc", "target_acc"])
        for r in rows:
            w.writerow([repr(r.epsilon), repr(r.source_acc), repr(r.target_acc)])


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
