"""Flat ``key = value`` run configuration with dotted section names.

Full-scale reference settings, kept here for comparison only:
retriever lr 1e-5, batch 55 (110 with gradient accumulation), 40 epochs;
entity adapter 2 epochs at lr 1e-4; LM hidden state size 3072.
"""
from __future__ import annotations

import os
from pathlib import Path

OUT_ENV = "MICROCORN_OUT"

DEFAULTS: dict[str, object] = {
    "seed": 7,
    "out_dir": "runs/default",
    "data.n_documents": 2048,
    "data.n_train": 4096,
    "data.n_test": 512,
    "data.n_golden": 128,
    "data.noise_rate": 0.15,
    "lm.n_layers": 2,
    "lm.d_model": 64,
    "lm.n_heads": 4,
    "lm.max_sequence": 96,
    "lm.d_ff": 256,
    "encoder.e": 32,
    "pretrain.epochs": 30,
    "pretrain.lr": 3e-4,
    "pretrain.batch_size": 32,
    "encoders.epochs": 10,
    "encoders.lr": 1e-3,
    "encoders.batch_size": 64,
    "stage1.epochs": 10,
    "stage1.lr": 1e-3,
    "stage1.batch_size": 64,
    "stage2.epochs": 20,
    "stage2.lr": 3e-4,
    "stage2.batch_size": 64,
    "adapter.epochs": 10,
    "adapter.lr": 1e-3,
    "adapter.batch_size": 32,
    "adapter.conditioning": "gold",
    "generate.max_new_tokens": 24,
    "eval.ks": "1,5,10",
}

CHOICES = {"adapter.conditioning": ("gold", "retrieved")}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError
            value = raw.lower() == "true"
        elif isinstance(default, int):
            value = int(raw)
        elif isinstance(default, float):
            value = float(raw)
        else:
            value = raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(f"{key} must be one of {', '.join(CHOICES[key])}")
    return value


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for key, val in (values or {}).items():
            self.set(key, val)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        self.values[key] = _coerce(key, str(value)) if isinstance(value, str) else value

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def ks(self) -> tuple:
        return tuple(int(k) for k in str(self.values["eval.ks"]).split(","))

    @property
    def out_dir(self) -> Path:
        """Output root; the environment variable wins over the file value."""
        return Path(os.environ.get(OUT_ENV) or self.values["out_dir"]).resolve()

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def dump(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.values.items()))


def parse_config(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        values[key] = _coerce(key, raw)
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
        for k, v in parse_config(text).items():
            cfg.set(k, v)
    for k, v in (overrides or {}).items():
        cfg.set(k, v)
    return cfg
