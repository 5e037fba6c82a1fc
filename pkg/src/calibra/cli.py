"""``calibra`` command line: data generation, training, evaluation, sweeps and spectra."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, format_config, load_config
from .data import DatasetFormatError, DomainDataset, generate_domain_pair, load_dataset, save_dataset
from .evaluate import (
    confusion,
    fft_spectrum,
    high_freq_energy_ratio,
    tradeoff_report,
    write_confusion_csv,
    write_pgm,
)
from .nets import (
    CheckpointError,
    SpecMismatchError,
    build_calibrator,
    build_classifier,
    calibrate,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import ShapeError
from .train import NotFrozenError, lsweep, make_discriminators, train_calibrator, train_source, write_sweep_csv

logger = logging.getLogger("calibra")

DATA_FILES = {
    "source_train": "source_train.cald",
    "target_train": "target_train.cald",
    "source_val": "source_val.cald",
    "source_test": "source_test.cald",
    "target_test": "target_test.cald",
}


class CommandError(RuntimeError):
    """A user-facing failure reported as a single line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers

def _threads() -> int:
    raw = os.environ.get("CALIBRA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CommandError(f"CALIBRA_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CommandError(f"CALIBRA_THREADS must be a positive integer, got {raw!r}")
    return n


def _config(args) -> RunConfig:
    if args.config is None:
        raise CommandError("--config is required for this command")
    cfg = load_config(args.config)
    return cfg.override(seed=args.seed)


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(f"cannot create output directory {out}: {exc.strerror or exc}") from None
    if not os.access(out, os.W_OK):
        raise CommandError(f"output directory {out} is not writable")
    return out


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CommandError(f"{what} not found: {p}")
    return p


def _data_dir(args) -> Path:
    if args.data is None:
        raise CommandError("--data is required for this command")
    d = Path(args.data)
    if not d.is_dir():
        raise CommandError(f"data directory not found: {d}")
    return d


def _dataset(data_dir: Path, key: str) -> DomainDataset:
    return load_dataset(_require(data_dir / DATA_FILES[key], f"{key} dataset"))


def _classifier(args):
    if args.source_ckpt is None:
        raise CommandError("--source-ckpt is required for this command")
    clf = load_checkpoint(_require(args.source_ckpt, "source checkpoint"))
    if clf.spec.role != "classifier":
        raise CommandError(f"{args.source_ckpt} holds a {clf.spec.role}, not a classifier")
    return clf.freeze()


def _calibrator(args, image_shape):
    if args.calibrator_ckpt is None:
        return None
    cal = load_checkpoint(_require(args.calibrator_ckpt, "calibrator checkpoint"))
    if cal.spec.role != "calibrator":
        raise CommandError(f"{args.calibrator_ckpt} holds a {cal.spec.role}, not a calibrator")
    if cal.spec.input_shape != tuple(image_shape):
        raise SpecMismatchError(
            f"calibrator expects images {cal.spec.input_shape}, data has {tuple(image_shape)}")
    return cal


def _check_shape(clf, ds: DomainDataset):
    if clf.spec.input_shape != ds.image_shape:
        raise SpecMismatchError(f"classifier expects images {clf.spec.input_shape}, data has {ds.image_shape}")


def write_manifest(out: Path, command: str, config: dict, seeds: dict, inputs: list, outputs: list) -> Path:
    """One manifest per artifact directory, written before any heavy work."""
    lines = [f"command = {command}", f"version = calibra {__version__}"]
    lines += [f"seed.{k} = {v}" for k, v in seeds.items()]
    lines += [f"input = {p}" for p in inputs]
    lines += [f"output = {p}" for p in outputs]
    lines += ["", "[config]", format_config(config).rstrip("\n")]
    path = out / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def _epsilon_flag(args):
    if args.epsilon is None:
        return None
    if args.epsilon < 0:
        raise CommandError(f"--epsilon must be non-negative, got {args.epsilon}")
    return args.epsilon


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    n_classes, npc = cfg.int("n_classes"), cfg.int("n_per_class")
    size, channels, seed = cfg.int("image_size"), cfg.int("channels"), cfg.int("seed")
    n_val, n_test = cfg.int("val_per_class"), cfg.int("test_per_class")
    shift = cfg.shift()
    out = _out_dir(args)
    write_manifest(out, "gen-data", cfg.resolved(), {"data": seed}, [args.config],
                   [DATA_FILES[k] for k in DATA_FILES])

    val_seed, test_seed = (int(s) for s in np.random.SeedSequence(seed).generate_state(2))
    source, target = generate_domain_pair(n_classes, npc, size, shift, seed=seed, channels=channels)
    source_val, _ = generate_domain_pair(n_classes, n_val, size, shift, seed=val_seed, channels=channels)
    source_test, target_test = generate_domain_pair(n_classes, n_test, size, shift, seed=test_seed,
                                                    channels=channels)
    for key, ds in (("source_train", source), ("target_train", target), ("source_val", source_val),
                    ("source_test", source_test), ("target_test", target_test)):
        save_dataset(ds, out / DATA_FILES[key])
    print(f"wrote {len(source)} source / {len(target)} target training images "
          f"({shift.describe()}) to {out}")
    return 0


def cmd_train_source(args) -> int:
    cfg = _config(args)
    data = _data_dir(args)
    tcfg = cfg.source_train_config()
    n_classes = cfg.int("n_classes")
    out = _out_dir(args)
    write_manifest(out, "train-source", cfg.resolved(), {"train": tcfg.seed},
                   [args.config, str(data / DATA_FILES["source_train"])],
                   ["classifier.calc", "source_steps.csv", "source_epochs.csv"])

    source = _dataset(data, "source_train")
    clf = build_classifier(cfg.classifier_spec(source.image_shape, n_classes), seed=tcfg.seed)
    clf, log = train_source(clf, source, tcfg)
    clf.freeze()
    save_checkpoint(clf, out / "classifier.calc")
    log.write_steps_csv(out / "source_steps.csv")
    log.write_epochs_csv(out / "source_epochs.csv")
    print(f"source training accuracy {log.epochs[-1]['train_acc']:.4f} "
          f"after {tcfg.epochs} epochs ({log.wall_clock:.1f}s)")
    return 0


def cmd_train_calibrator(args) -> int:
    cfg = _config(args)
    data = _data_dir(args)
    eps = _epsilon_flag(args)
    tcfg = cfg.calibrator_train_config(eps)
    cal_cfg = cfg.calibrator_config(tcfg.epsilon)
    out = _out_dir(args)
    write_manifest(out, "train-calibrator", {**cfg.resolved(), "epsilon": tcfg.epsilon},
                   {"train": tcfg.seed},
                   [args.config, args.source_ckpt] + [str(data / DATA_FILES[k])
                                                      for k in ("source_train", "target_train", "source_val")],
                   ["calibrator.calc", "d_pixel.calc", "d_feat.calc", "steps.csv", "evals.csv"])

    clf = _classifier(args)
    source, target = _dataset(data, "source_train"), _dataset(data, "target_train")
    source_val = _dataset(data, "source_val")
    _check_shape(clf, source)
    cal = build_calibrator(cal_cfg, source.image_shape, seed=tcfg.seed)
    d_pixel, d_feat = make_discriminators(clf, source.image_shape, tcfg)
    cal, log = train_calibrator(clf, cal, d_pixel, d_feat, source, target, tcfg, source_val=source_val)
    save_checkpoint(cal, out / "calibrator.calc")
    save_checkpoint(d_pixel, out / "d_pixel.calc")
    save_checkpoint(d_feat, out / "d_feat.calc")
    log.write_steps_csv(out / "steps.csv")
    log.write_epochs_csv(out / "evals.csv")
    print(f"calibrator trained for {tcfg.epochs} epochs ({log.wall_clock:.1f}s); "
          f"selected step {log.selected_step}; {count_parameters(cal)} parameters")
    return 0


def cmd_eval(args) -> int:
    data = _data_dir(args)
    eps = _epsilon_flag(args)
    out = _out_dir(args)
    inputs = [args.source_ckpt, args.calibrator_ckpt] + [str(data / DATA_FILES[k])
                                                        for k in ("source_test", "target_test")]
    write_manifest(out, "eval", {"epsilon": "" if eps is None else eps}, {}, [p for p in inputs if p],
                   ["tradeoff.csv", "tradeoff.txt", "confusion_source.csv", "confusion_target.csv"])

    clf = _classifier(args)
    source, target = _dataset(data, "source_test"), _dataset(data, "target_test")
    _check_shape(clf, source)
    cal = _calibrator(args, source.image_shape)
    report = tradeoff_report(clf, cal, source, target, eps)
    report.to_csv(out / "tradeoff.csv")
    (out / "tradeoff.txt").write_text(report.to_text() + "\n")
    write_confusion_csv(confusion(clf, source, cal, eps), out / "confusion_source.csv")
    write_confusion_csv(confusion(clf, target, cal, eps), out / "confusion_target.csv")
    print(report.to_text())
    return 0


def _parse_epsilons(text) -> list[float]:
    if not text:
        raise CommandError("--epsilons needs a comma-separated list of values")
    try:
        eps = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CommandError(f"--epsilons: cannot parse {text!r}") from None
    if len(eps) < 2:
        raise CommandError("--epsilons needs at least two values")
    if any(e < 0 for e in eps):
        raise CommandError("--epsilons values must be non-negative")
    return eps


def cmd_lsweep(args) -> int:
    cfg = _config(args)
    data = _data_dir(args)
    epsilons = _parse_epsilons(args.epsilons)
    tcfg = cfg.calibrator_train_config()
    cal_cfg = cfg.calibrator_config()
    n_jobs = _threads()
    out = _out_dir(args)
    write_manifest(out, "lsweep", {**cfg.resolved(), "epsilons": ",".join(map(repr, epsilons))},
                   {"train": tcfg.seed},
                   [args.config, args.source_ckpt] + [str(data / DATA_FILES[k]) for k in DATA_FILES],
                   ["sweep.csv"])

    clf = _classifier(args)
    source, target = _dataset(data, "source_train"), _dataset(data, "target_train")
    _check_shape(clf, source)
    rows = lsweep(epsilons, clf, cal_cfg, source, target, tcfg,
                  source_val=_dataset(data, "source_val"), n_jobs=n_jobs,
                  source_eval=_dataset(data, "source_test"), target_eval=_dataset(data, "target_test"))
    write_sweep_csv(rows, out / "sweep.csv")
    for r in rows:
        print(f"epsilon {r.epsilon:<6g} source {r.source_acc:.4f} target {r.target_acc:.4f}")
    return 0


def cmd_fft(args) -> int:
    data = _data_dir(args)
    eps = _epsilon_flag(args)
    if not (0.0 < args.cutoff < 1.0):
        raise CommandError(f"--cutoff must lie in (0, 1), got {args.cutoff}")
    out = _out_dir(args)
    write_manifest(out, "fft", {"cutoff": args.cutoff, "epsilon": "" if eps is None else eps}, {},
                   [p for p in (args.calibrator_ckpt, str(data / DATA_FILES["target_test"])) if p],
                   ["fft.csv", "fft_summary.txt", "spectrum_before.pgm", "spectrum_after.pgm"])

    target = _dataset(data, "target_test")
    if args.calibrator_ckpt is None:
        raise CommandError("--calibrator-ckpt is required for fft")
    cal = _calibrator(args, target.image_shape)
    before = target.images
    after = np.concatenate([calibrate(cal, before[i:i + 256], eps).data
                            for i in range(0, len(before), 256)])
    spec_b = [fft_spectrum(img) for img in before]
    spec_a = [fft_spectrum(img) for img in after]
    hb = np.array([high_freq_energy_ratio(s, args.cutoff) for s in spec_b])
    ha = np.array([high_freq_energy_ratio(s, args.cutoff) for s in spec_a])
    with open(out / "fft.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "hf_ratio_before", "hf_ratio_after"])
        for i, (b, a) in enumerate(zip(hb, ha)):
            w.writerow([i, repr(float(b)), repr(float(a))])
    summary = (f"images {len(hb)} cutoff {args.cutoff}\n"
               f"mean high-frequency ratio before {hb.mean():.6f}\n"
               f"mean high-frequency ratio after  {ha.mean():.6f}\n")
    (out / "fft_summary.txt").write_text(summary)
    write_pgm(np.mean(spec_b, axis=0), out / "spectrum_before.pgm")
    write_pgm(np.mean(spec_a, axis=0), out / "spectrum_after.pgm")
    print(summary, end="")
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, "render the synthetic source/target datasets"),
    "train-source": (cmd_train_source, "train and freeze the source classifier"),
    "train-calibrator": (cmd_train_calibrator, "adversarially train the data calibrator"),
    "eval": (cmd_eval, "source/target accuracy before and after calibration"),
    "lsweep": (cmd_lsweep, "one calibrator run per L-infinity budget"),
    "fft": (cmd_fft, "high-frequency energy of target images before/after calibration"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="calibra", description=__doc__)
    parser.add_argument("--version", action="version", version=f"calibra {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", required=True, help="artifact directory")
        p.add_argument("--data", help="directory written by gen-data")
        p.add_argument("--source-ckpt", help="frozen classifier checkpoint")
        p.add_argument("--calibrator-ckpt", help="calibrator checkpoint")
        p.add_argument("--epsilon", type=float, help="L-infinity budget override")
        p.add_argument("--epsilons", help="comma-separated budgets for lsweep")
        p.add_argument("--cutoff", type=float, default=0.25, help="high-frequency radius fraction")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    func = COMMANDS[args.command][0]
    start = time.perf_counter()
    try:
        threads = _threads()
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            code = func(args)
    except (CommandError, ConfigError, CheckpointError, SpecMismatchError, DatasetFormatError,
            NotFrozenError, ShapeError, ValueError, OSError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"calibra {args.command}: error: {msg}", file=sys.stderr)
        return 1
    logger.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
