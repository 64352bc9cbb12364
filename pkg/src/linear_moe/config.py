"""Run configuration files: INI text with one section per command.

Example::

    [train]
    preset = A0.3B-toy
    lsm = gla
    pattern = LLLN
    steps = 200

Keys map one-to-one onto :class:`RunConfig` or :class:`BenchConfig` fields.
Unknown keys and unknown sections are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

from .errors import ConfigError
from .model import ModelConfig, preset

OUT_ENV = "LINEAR_MOE_OUT"
DEFAULT_OUT = "runs"
BYTE_VOCAB = 258  # 256 byte values plus BOS and EOS
BOS, EOS = 256, 257


@dataclass(frozen=True)
class RunConfig:
    preset: str = ""
    hidden: int = 16
    ffn_dim: int = 16
    num_heads: int = 2
    num_layers: int = 2
    num_experts: int = 4
    num_active: int = 2
    lsm: str = "bla"
    pattern: str = ""
    chunk_size: int = 16
    token_shift: bool = True
    aux_loss_weight: float = 0.01
    seed: int = 0
    steps: int = 200
    batch_size: int = 16
    seq_len: int = 64
    sp: int = 1
    lr: float = 3e-3
    min_lr: float = 3e-4
    warmup: int = 10
    grad_clip: float = 1.0
    weight_decay: float = 0.0
    task: str = "mqar"
    text_path: str = ""
    mqar_pairs: int = 4
    mqar_queries: int = 4
    mqar_vocab: int = 32
    train_samples: int = 4096
    eval_samples: int = 256
    log_interval: int = 10
    out_dir: str = "train"

    def __post_init__(self):
        if self.task not in ("mqar", "text"):
            raise ConfigError(f"task must be 'mqar' or 'text', got {self.task!r}")
        if self.task == "text" and not self.text_path:
            raise ConfigError("task = text needs text_path")
        for name in ("steps", "batch_size", "seq_len", "sp", "log_interval", "train_samples", "eval_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def vocab_size(self) -> int:
        return self.mqar_vocab if self.task == "mqar" else BYTE_VOCAB

    def model_config(self) -> ModelConfig:
        common = dict(lsm=self.lsm, chunk_size=self.chunk_size, token_shift=self.token_shift,
                      aux_loss_weight=self.aux_loss_weight)
        if self.pattern:
            common["pattern"] = self.pattern
        if self.preset:
            if self.pattern:
                common["num_layers"] = len(self.pattern)
            return preset(self.preset, vocab_size=self.vocab_size, **common)
        return ModelConfig(hidden=self.hidden, ffn_dim=self.ffn_dim, num_heads=self.num_heads,
                           num_layers=len(self.pattern) if self.pattern else self.num_layers,
                           num_experts=self.num_experts, num_active=self.num_active,
                           vocab_size=self.vocab_size, **common)


@dataclass(frozen=True)
class BenchConfig:
    lsm: str = "bla"
    lengths: tuple[int, ...] = (256, 512, 1024, 2048)
    token_budget: int = 8192
    hidden: int = 16
    num_heads: int = 1
    chunk_size: int = 64
    repeats: int = 3
    seed: int = 0
    out_dir: str = "bench"

    def __post_init__(self):
        if not self.lengths or any(n < 1 for n in self.lengths):
            raise ConfigError("lengths must be positive")
        if self.token_budget < max(self.lengths):
            raise ConfigError(f"token_budget {self.token_budget} is below the longest length {max(self.lengths)}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")


SECTIONS = {"train": RunConfig, "bench": BenchConfig}


def _coerce(raw: str, kind, key: str):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == tuple[int, ...]:
            return tuple(int(x) for x in raw.replace(",", " ").split())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def parse_section(values: dict[str, str], cls):
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) for {cls.__name__}: {', '.join(unknown)}")
    return cls(**{k: _coerce(v, hints[k], k) for k, v in values.items()})


def load_config(path, section: str):
    """Read ``section`` (``train`` or ``bench``) from an INI file; other known sections are ignored."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as err:
        raise ConfigError(f"{path}: {err}") from None
    extra = sorted(set(parser.sections()) - set(SECTIONS))
    if extra:
        raise ConfigError(f"{path}: unknown section(s) {extra}")
    values = dict(parser[section]) if parser.has_section(section) else {}
    return parse_section(values, SECTIONS[section])


def output_root() -> Path:
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT))


def resolve_out(out_dir: str) -> Path:
    p = Path(out_dir)
    return p if p.is_absolute() else output_root() / p
