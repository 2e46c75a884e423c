"""Run configuration: an INI file with a fixed, documented schema.

Sections and keys (defaults in brackets)::

    [run]
    model        lenet5 | vgg7 | vgg16 | mlp            [lenet5]
    dataset      mnist | cifar10 | blobs                [mnist]
    data_dir     dataset directory                      []
    out_dir      parent directory for run folders       [runs]
    seed         RNG seed for init, shuffling, augment  [0]
    train_subset use only this many training images    [0 = all]
    test_subset  use only this many test images        [0 = all]

    [model]
    width        channel multiplier for vgg7 / vgg16    [1.0]
    mlp_sizes    comma-separated layer widths (mlp)     [8,16,4]

    [train]
    mode, epochs, batch_size, initial_lr, lr_drop_epochs, lr_drop_factor,
    weight_decay, clip_latent, augment, hist_every, eval_batch_size
    (defaults as in TrainConfig)

    [regularizer]
    lam, gamma, delta, beta_min, beta_max, tie_policy, gamma_per_filter,
    per_filter_mu (defaults as in TrainConfig)

Unknown sections or keys raise ConfigError.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

from .trainer import TrainConfig

MODELS = ("lenet5", "vgg7", "vgg16", "mlp")
DATASETS = ("mnist", "cifar10", "blobs")

TRAIN_KEYS = (
    "mode", "epochs", "batch_size", "initial_lr", "lr_drop_epochs", "lr_drop_factor",
    "weight_decay", "clip_latent", "augment", "hist_every", "eval_batch_size",
)
REGULARIZER_KEYS = (
    "lam", "gamma", "delta", "beta_min", "beta_max", "tie_policy", "gamma_per_filter", "per_filter_mu",
)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: str = "lenet5"
    dataset: str = "mnist"
    data_dir: str = ""
    out_dir: str = "runs"
    seed: int = 0
    train_subset: int = 0
    test_subset: int = 0
    width: float = 1.0
    mlp_sizes: tuple[int, ...] = (8, 16, 4)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.width <= 0:
            raise ConfigError("width must be positive")
        self.train.seed = self.seed

    def digest(self) -> str:
        return hashlib.sha256(dump(self).encode()).hexdigest()[:10]


_RUN_FIELDS = ("model", "dataset", "data_dir", "out_dir", "seed", "train_subset", "test_subset")
_MODEL_FIELDS = ("width", "mlp_sizes")


def _coerce(raw: str, default, key: str):
    try:
        if isinstance(default, bool) or default is None:
            low = raw.strip().lower()
            if low in ("", "none"):
                return None
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def parse(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    allowed = {"run": _RUN_FIELDS, "model": _MODEL_FIELDS, "train": TRAIN_KEYS, "regularizer": REGULARIZER_KEYS}
    for section in cp.sections():
        if section not in allowed:
            raise ConfigError(f"unknown section [{section}]")
        for key in cp[section]:
            if key not in allowed[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")

    run_defaults = RunConfig.__dataclass_fields__
    kwargs = {}
    for section in ("run", "model"):
        if section in cp:
            for key, raw in cp[section].items():
                default = run_defaults[key].default
                kwargs[key] = _coerce(raw, default, f"[{section}] {key}")
    train_defaults = TrainConfig()
    tkw = {}
    for section in ("train", "regularizer"):
        if section in cp:
            for key, raw in cp[section].items():
                tkw[key] = _coerce(raw, getattr(train_defaults, key), f"[{section}] {key}")
    try:
        kwargs["train"] = TrainConfig(**tkw)
        return RunConfig(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None


def load(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    return parse(p.read_text())


def dump(cfg: RunConfig) -> str:
    """Every key with its resolved value; ``parse(dump(c))`` reproduces ``c``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp["run"] = {k: _format(getattr(cfg, k)) for k in _RUN_FIELDS}
    cp["model"] = {k: _format(getattr(cfg, k)) for k in _MODEL_FIELDS}
    cp["train"] = {k: _format(getattr(cfg.train, k)) for k in TRAIN_KEYS}
    cp["regularizer"] = {k: _format(getattr(cfg.train, k)) for k in REGULARIZER_KEYS}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def with_overrides(cfg: RunConfig, **changes) -> RunConfig:
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return cfg
    train = dataclasses.replace(cfg.train)
    return dataclasses.replace(cfg, train=train, **changes)
