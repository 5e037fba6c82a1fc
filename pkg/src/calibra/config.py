"""Plain-text ``key = value`` run configuration."""

from __future__ import annotations

from pathlib import Path

from .data import ShiftConfig
from .nets import CalibratorConfig, NetworkSpec, desk_classifier_spec
from .train import TrainConfig


class ConfigError(ValueError):
    """Malformed config file or a missing / invalid key."""


# defaults for optional keys; anything a command needs and that is absent here must be in the file
DEFAULTS = {
    "channels": "1",
    "val_per_class": "30",
    "test_per_class": "50",
    "clf_widths": "8,16",
    "clf_hidden": "512",
    "source_lr": "1e-3",
    "source_epochs": "8",
    "source_batch_size": "32",
    "cal_width": "8",
    "cal_depth": "1",
    "cal_blocks": "1",
    "cal_skip": "true",
}


def parse_config(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {n}: empty key")
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path) -> "RunConfig":
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return RunConfig(parse_config(text))


def format_config(values: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


class RunConfig:
    """Raw string values plus typed accessors that name the missing key on failure."""

    def __init__(self, values: dict[str, str]):
        self.values = dict(values)

    def __contains__(self, key: str) -> bool:
        return key in self.values or key in DEFAULTS

    def resolved(self) -> dict[str, str]:
        return {**DEFAULTS, **self.values}

    def override(self, **kw) -> "RunConfig":
        return RunConfig({**self.values, **{k: str(v) for k, v in kw.items() if v is not None}})

    def get(self, key: str) -> str:
        if key in self.values:
            return self.values[key]
        if key in DEFAULTS:
            return DEFAULTS[key]
        raise ConfigError(f"missing config key {key!r}")

    def _typed(self, key, conv):
        raw = self.get(key)
        try:
            return conv(raw)
        except ValueError:
            raise ConfigError(f"config key {key!r}: cannot parse {raw!r}") from None

    def int(self, key: str) -> int:
        return self._typed(key, int)

    def float(self, key: str) -> float:
        return self._typed(key, float)

    def bool(self, key: str) -> bool:
        raw = self.get(key).lower()
        if raw in ("1", "true", "yes", "on"):
            return True
        if raw in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config key {key!r}: expected a boolean, got {raw!r}")

    def ints(self, key: str) -> tuple[int, ...]:
        return self._typed(key, lambda s: tuple(int(v) for v in s.split(",")))

    # -- domain objects ---------------------------------------------------

    def shift(self) -> ShiftConfig:
        try:
            return ShiftConfig.parse(self.get("shift"), seed=self.int("seed"))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"config key 'shift': {exc}") from None

    def classifier_spec(self, input_shape, n_classes: int) -> NetworkSpec:
        widths = self.ints("clf_widths")
        if len(widths) != 2:
            raise ConfigError("config key 'clf_widths' needs two comma-separated widths")
        return desk_classifier_spec(tuple(input_shape), n_classes, widths, self.int("clf_hidden"))

    def calibrator_config(self, epsilon: float | None = None) -> CalibratorConfig:
        eps = self.float("epsilon") if epsilon is None else epsilon
        try:
            return CalibratorConfig(epsilon=eps, width=self.int("cal_width"), depth=self.int("cal_depth"),
                                    blocks=self.int("cal_blocks"), skip=self.bool("cal_skip"))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"calibrator config: {exc}") from None

    def source_train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.float("source_lr"), epochs=self.int("source_epochs"),
                           batch_size=self.int("source_batch_size"), seed=self.int("seed"))

    def calibrator_train_config(self, epsilon: float | None = None) -> TrainConfig:
        """Calibrator loop settings; ``lr``, ``epochs`` and ``epsilon`` are required."""
        for key in ("lr", "epochs", "epsilon"):
            self.get(key)
        values = {k: v for k, v in self.values.items() if k in TrainConfig.__dataclass_fields__}
        if epsilon is not None:
            values["epsilon"] = str(epsilon)
        try:
            return TrainConfig.from_mapping(values)
        except ValueError as exc:
            raise ConfigError(f"training config: {exc}") from None
