"""Run configuration: flat dotted-key text files with strict parsing.

The format is one `section.key = value` per line, `#` comments, nothing
nested. Unknown keys are rejected with the nearest valid key named, since
a silently ignored typo in the time penalty or halting slack changes the
experiment. Unset task-dependent fields (minibatch size, cell kind and
width, step cap, sequence ranges) resolve to the reference defaults for
the chosen task.
"""

from __future__ import annotations

import difflib
import hashlib
from dataclasses import dataclass, fields
from typing import Optional

from .tasks import TASKS


class ConfigError(ValueError):
    """Bad configuration file, override, or value."""


# Reference defaults that vary per task: (batch, cell, hidden, max_steps).
_TASK_DEFAULTS = {
    "parity":   (128, "rnn", 128, 100),
    "logic":    (16, "lstm", 128, 100),
    "addition": (32, "lstm", 512, 20),
    "sort":     (16, "lstm", 512, 100),
    "text":     (8, "lstm", 1500, 100),
}

# Per-task sequence-shape defaults: (min_len, max_len, min_digits, max_digits).
_RANGE_DEFAULTS = {
    "parity":   (1, 1, 0, 0),
    "logic":    (1, 10, 0, 0),
    "addition": (1, 5, 1, 5),
    "sort":     (2, 15, 0, 0),
    "text":     (1, 1, 0, 0),
}


@dataclass
class TrainConfig:
    task: str = "parity"
    batch: Optional[int] = None
    n_bits: int = 64
    parity_nonzero: bool = False
    min_len: Optional[int] = None
    max_len: Optional[int] = None
    min_digits: Optional[int] = None
    max_digits: Optional[int] = None
    seq_len: int = 500
    corpus: str = ""
    cell: Optional[str] = None
    hidden: Optional[int] = None
    epsilon: float = 0.01
    max_steps: Optional[int] = None
    tau: float = 1e-3
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    iterations: int = 10_000
    eval_every: int = 500
    eval_batches: int = 4
    checkpoint_every: int = 0
    clip_norm: float = 0.0
    seed: int = 0
    workers: int = 1

    def resolve(self) -> "TrainConfig":
        """Fill task-dependent defaults and validate ranges."""
        if self.task not in TASKS:
            raise ConfigError(
                f"unknown task {self.task!r}; expected one of {sorted(TASKS)}")
        batch, cell, hidden, max_steps = _TASK_DEFAULTS[self.task]
        lo, hi, dlo, dhi = _RANGE_DEFAULTS[self.task]
        out = TrainConfig(**{f.name: getattr(self, f.name) for f in fields(self)})
        out.batch = batch if self.batch is None else self.batch
        out.cell = cell if self.cell is None else self.cell
        out.hidden = hidden if self.hidden is None else self.hidden
        out.max_steps = max_steps if self.max_steps is None else self.max_steps
        out.min_len = lo if self.min_len is None else self.min_len
        out.max_len = hi if self.max_len is None else self.max_len
        out.min_digits = dlo if self.min_digits is None else self.min_digits
        out.max_digits = dhi if self.max_digits is None else self.max_digits

        if not 0.0 < out.epsilon < 0.5:
            raise ConfigError(f"act.epsilon must lie in (0, 0.5), got {out.epsilon}")
        if out.max_steps < 1:
            raise ConfigError(f"act.max_steps must be >= 1, got {out.max_steps}")
        if out.tau < 0.0:
            raise ConfigError(f"act.tau must be >= 0, got {out.tau}")
        if out.cell not in ("rnn", "lstm"):
            raise ConfigError(f"cell.kind must be rnn or lstm, got {out.cell!r}")
        for key, value in (("task.batch", out.batch), ("cell.hidden", out.hidden),
                           ("train.workers", out.workers)):
            if value < 1:
                raise ConfigError(f"{key} must be >= 1, got {value}")
        if out.iterations < 0:
            raise ConfigError(f"train.iterations must be >= 0, got {out.iterations}")
        if out.min_len > out.max_len:
            raise ConfigError("task.min_len exceeds task.max_len")
        return out


# Dotted config key -> dataclass field.
KEYMAP = {
    "task.name": "task",
    "task.batch": "batch",
    "task.bits": "n_bits",
    "task.parity_nonzero": "parity_nonzero",
    "task.min_len": "min_len",
    "task.max_len": "max_len",
    "task.min_digits": "min_digits",
    "task.max_digits": "max_digits",
    "task.seq_len": "seq_len",
    "task.corpus": "corpus",
    "cell.kind": "cell",
    "cell.hidden": "hidden",
    "act.epsilon": "epsilon",
    "act.max_steps": "max_steps",
    "act.tau": "tau",
    "train.lr": "lr",
    "train.beta1": "beta1",
    "train.beta2": "beta2",
    "train.adam_eps": "adam_eps",
    "train.iterations": "iterations",
    "train.eval_every": "eval_every",
    "train.eval_batches": "eval_batches",
    "train.checkpoint_every": "checkpoint_every",
    "train.clip_norm": "clip_norm",
    "train.seed": "seed",
    "train.workers": "workers",
}

_FIELD_TO_KEY = {v: k for k, v in KEYMAP.items()}
_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _convert(key: str, field: str, raw: str):
    raw = raw.strip()
    ftype = _FIELD_TYPES[field]
    try:
        if ftype in ("int", "Optional[int]"):
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {ftype}") from None


def _assign(config: TrainConfig, key: str, raw: str) -> None:
    if key not in KEYMAP:
        hint = difflib.get_close_matches(key, KEYMAP, n=1)
        suffix = f"; closest valid key is {hint[0]!r}" if hint else ""
        raise ConfigError(f"unknown config key {key!r}{suffix}")
    field = KEYMAP[key]
    setattr(config, field, _convert(key, field, raw))


def parse_config_text(text: str, overrides: Optional[list[str]] = None,
                      origin: str = "<config>") -> TrainConfig:
    """Parse config text, apply `key=value` overrides, resolve defaults."""
    config = TrainConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, raw = stripped.split("=", 1)
        _assign(config, key.strip(), raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        _assign(config, key.strip(), raw)
    return config.resolve()


def parse_config(path: Optional[str] = None,
                 overrides: Optional[list[str]] = None) -> TrainConfig:
    """Read a config file, apply `key=value` overrides, resolve defaults."""
    text = ""
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    return parse_config_text(text, overrides, origin=str(path))


def config_text(config: TrainConfig) -> str:
    """Canonical flat rendering of a resolved config (echoed into run dirs)."""
    lines = []
    for key in sorted(KEYMAP):
        value = getattr(config, KEYMAP[key])
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def config_digest(config: TrainConfig) -> str:
    return hashlib.sha256(config_text(config).encode("utf-8")).hexdigest()
