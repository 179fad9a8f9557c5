"""Flat ``key = value`` run configuration for the command-line tools.

Blank lines and ``#`` comments are ignored. Every key is known in advance and
checked when the file is loaded, so a bad config fails before any work starts.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .dataio import LABEL_RANGES
from .layers import OutputBlockSoftmax, OutputLinear, OutputSoftmax
from .network import stack_specs
from .tensor import ParameterError
from .train import TrainConfig

TASK_LABELS = {
    "emotion": "emotion",
    "age": "age_bin",
    "gender": "gender",
    "ethnicity": "ethnicity",
    "glasses": "glasses",
    "beard": "beard",
    "mustache": "mustache",
}
TASKS = (*TASK_LABELS, "joint", "aam")


class ConfigError(ValueError):
    pass


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _strs(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _opt_float(text):
    return None if text.lower() in ("none", "") else float(text)


def _opt_str(text):
    return None if text.lower() in ("none", "") else text


def _opt_int(text):
    return None if text.lower() in ("none", "") else int(text)


@dataclass(frozen=True)
class RunConfig:
    task: str = "emotion"
    data: str = ""  # preprocessed manifest
    stats: str = ""  # pixel statistics sidecar for .pgm inputs
    input_size: int = 48
    depth: int = 3
    width: float = 1.0
    lcn_placement: str | None = None
    pool_placement: str | None = None
    dropout_fc: float = 0.2
    dropout_conv: float = 0.0
    joint_labels: tuple = tuple(LABEL_RANGES)
    batch_size: int = 100
    lr_start: float = 0.0025
    lr_end: float = 0.001
    epochs: int = 50
    momentum: float = 0.9
    patience: int | None = 10
    target_criterion: float | None = None
    seed: int = 0
    # sweep grids
    sweep_depth: tuple = (2, 3, 4)
    sweep_width: tuple = (0.5, 1.0, 2.0)
    sweep_lcn: tuple = ("000", "100", "110", "111")
    sweep_pool: tuple = ("000", "100", "110", "111")
    sweep_dropout_fc: tuple = (0.0, 0.1, 0.2, 0.3, 0.5)
    sweep_dropout_conv: tuple = (0.0, 0.1, 0.2)
    sweep_input_size: tuple = (24, 36, 48, 60, 72)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if not 8 <= self.input_size <= 256:
            raise ConfigError(f"input_size must lie in 8..256, got {self.input_size}")
        for name in ("dropout_fc", "dropout_conv"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        unknown = [lab for lab in self.joint_labels if lab not in LABEL_RANGES]
        if unknown or not self.joint_labels:
            raise ConfigError(f"joint_labels must name labels from {tuple(LABEL_RANGES)}, got {self.joint_labels}")
        if any(not 8 <= s <= 256 for s in self.sweep_input_size):
            raise ConfigError(f"sweep_input_size values must lie in 8..256, got {self.sweep_input_size}")
        if any(not 0 <= p < 1 for p in self.sweep_dropout_fc + self.sweep_dropout_conv):
            raise ConfigError("sweep dropout values must lie in [0, 1)")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        try:
            self.train_config()
            stack_specs(OutputSoftmax(2), self.depth, self.width, self.lcn_placement, self.pool_placement, self.dropout_fc, self.dropout_conv)
        except ParameterError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self):
        return TrainConfig(
            batch_size=self.batch_size,
            lr_start=self.lr_start,
            lr_end=self.lr_end,
            epochs=self.epochs,
            momentum=self.momentum,
            seed=self.seed,
            patience=self.patience,
            target_criterion=self.target_criterion,
        )

    @property
    def block_sizes(self):
        return tuple(LABEL_RANGES[lab] for lab in self.joint_labels)

    def head_spec(self, aam_dim=None):
        if self.task == "joint":
            return OutputBlockSoftmax(self.block_sizes)
        if self.task == "aam":
            if aam_dim is None:
                raise ConfigError("task=aam needs the regression dimension (k + 2) from the data")
            return OutputLinear(aam_dim)
        return OutputSoftmax(LABEL_RANGES[TASK_LABELS[self.task]])

    def specs(self, aam_dim=None):
        return stack_specs(
            self.head_spec(aam_dim), self.depth, self.width, self.lcn_placement,
            self.pool_placement, self.dropout_fc, self.dropout_conv,
        )

    def with_overrides(self, **kw):
        try:
            return replace(self, **kw)
        except ParameterError as exc:
            raise ConfigError(str(exc)) from exc

    def to_lines(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            out.append(f"{f.name} = {'none' if v is None else v}")
        return out


_PARSERS = {
    "task": str,
    "data": str,
    "stats": str,
    "input_size": int,
    "depth": int,
    "width": float,
    "lcn_placement": _opt_str,
    "pool_placement": _opt_str,
    "dropout_fc": float,
    "dropout_conv": float,
    "joint_labels": _strs,
    "batch_size": int,
    "lr_start": float,
    "lr_end": float,
    "epochs": int,
    "momentum": float,
    "patience": _opt_int,
    "target_criterion": _opt_float,
    "seed": int,
    "sweep_depth": _ints,
    "sweep_width": _floats,
    "sweep_lcn": _strs,
    "sweep_pool": _strs,
    "sweep_dropout_fc": _floats,
    "sweep_dropout_conv": _floats,
    "sweep_input_size": _ints,
}
assert set(_PARSERS) == {f.name for f in fields(RunConfig)}


def parse_config(text, source="<config>", **overrides):
    values = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{n}: bad value for {key}: {exc}") from None
    values.update(overrides)
    return RunConfig(**values)


def load_config(path, **overrides):
    with open(path) as fh:
        return parse_config(fh.read(), str(path), **overrides)
