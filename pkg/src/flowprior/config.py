"""Flat ``key = value`` experiment configs with ``#`` comments and comma-separated grids."""
from __future__ import annotations

import os

KNOWN_KEYS = {
    # flow architecture / checkpoint
    "kind", "model", "init_model", "layers", "hidden", "mixing", "epsilon", "activation_clip",
    # data
    "dataset", "count", "noise_std", "side", "decay", "samples", "test_count",
    # training
    "steps", "learning_rate", "warmup_steps", "batch_size", "checkpoint_every",
    # inverse problems
    "sigma", "noise_level", "gamma", "m", "mask", "mask_fraction", "init", "init_std", "init_image",
    "max_iters", "tolerance", "shape", "lambda",
    # theory
    "n", "sigma_profile", "trials",
    # jacobian / perturbation
    "points", "alpha", "directions",
    # common
    "seed", "out", "threads",
}

# Keys naming files that must already exist when the config is read.
INPUT_PATH_KEYS = {"init_model", "samples", "mask", "init_image"}


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class ExperimentConfig:
    """Parsed config values with typed accessors; remembers each key's source line."""

    def __init__(self, values=None, lines=None, base_dir="."):
        self.values = dict(values or {})
        self.lines = dict(lines or {})
        self.base_dir = base_dir

    def __contains__(self, key):
        return key in self.values

    def set(self, key, value):
        if value is not None:
            self.values[key] = str(value)
            self.lines.pop(key, None)

    def _convert(self, key, conv, what):
        raw = self.values[key]
        try:
            return conv(raw)
        except ValueError:
            raise ConfigError(f"{key} = {raw!r} is not {what}", self.lines.get(key)) from None

    def text(self, key, default=None, required=False):
        if key not in self.values:
            if required:
                raise ConfigError(f"missing required key {key!r}")
            return default
        return self.values[key]

    def integer(self, key, default=None, required=False):
        if key not in self.values:
            return self.text(key, default, required)
        return self._convert(key, int, "an integer")

    def number(self, key, default=None, required=False):
        if key not in self.values:
            return self.text(key, default, required)
        return self._convert(key, float, "a number")

    def numbers(self, key, default=None, required=False):
        if key not in self.values:
            return self.text(key, default, required)
        return self._convert(key, lambda s: [float(v) for v in s.split(",") if v.strip()], "a list of numbers")

    def integers(self, key, default=None, required=False):
        if key not in self.values:
            return self.text(key, default, required)
        return self._convert(key, lambda s: [int(v) for v in s.split(",") if v.strip()], "a list of integers")

    def path(self, key, default=None, required=False, must_exist=False):
        raw = self.text(key, default, required)
        if raw is None:
            return None
        p = raw if os.path.isabs(raw) else os.path.join(self.base_dir, raw)
        if must_exist and not os.path.exists(p):
            raise ConfigError(f"{key}: no such file {raw!r}", self.lines.get(key))
        return p


def parse_config_text(text: str, base_dir: str = ".", input_paths=INPUT_PATH_KEYS) -> ExperimentConfig:
    values, lines = {}, {}
    for num, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", num)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown key {key!r}", num)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", num)
        if not value:
            raise ConfigError(f"empty value for {key!r}", num)
        values[key], lines[key] = value, num
    cfg = ExperimentConfig(values, lines, base_dir)
    for key in input_paths:
        if key in values:
            cfg.path(key, must_exist=True)
    return cfg


def parse_config(path, input_paths=INPUT_PATH_KEYS) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, os.path.dirname(os.path.abspath(path)), input_paths)
