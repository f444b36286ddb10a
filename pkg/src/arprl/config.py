"""Plain-text run configuration: ``[section]`` headers with ``key = value`` lines.

Precedence is built-in defaults < config file < command-line flags.
"""
from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .attack import AttackConfig
from .training import ConfigError, TrainConfig


@dataclass
class DataSection:
    kind: str = "circles"        # circles | tabular
    path: str = ""               # CSV or cache file; empty means generate
    n: int = 5000
    seed: int = 0
    label: str = "income"
    attribute: str = "sex"
    delimiter: str = ","


@dataclass
class ModelSection:
    kind: str = ""               # toy | tabular; empty picks from the data kind


@dataclass
class EvalSection:
    bounds: bool = False
    critic_steps: int = 2000
    seed: int = 0


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> None:
        if self.data.kind not in ("circles", "tabular"):
            raise ConfigError(f"data.kind must be circles or tabular, got {self.data.kind!r}")
        if self.model.kind not in ("", "toy", "tabular"):
            raise ConfigError(f"model.kind must be toy or tabular, got {self.model.kind!r}")
        if self.data.n < 1:
            raise ConfigError("data.n must be positive")
        self.train.validate()
        try:
            self.attack.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def to_text(self) -> str:
        lines = []
        for name, d in self.to_dict().items():
            lines.append(f"[{name}]")
            lines += [f"{k} = {_fmt(v)}" for k, v in d.items()]
            lines.append("")
        return "\n".join(lines)

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def set(self, section: str, key: str, value) -> None:
        obj = getattr(self, section)
        types = {f.name: f.type for f in dataclasses.fields(obj)}
        if key not in types:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        setattr(obj, key, _coerce(value, getattr(obj, key), section, key))


SECTIONS = ("data", "model", "train", "attack", "eval")


def _fmt(v) -> str:
    return json.dumps(v) if isinstance(v, bool) else str(v)


def _coerce(raw, default, section, key):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            try:
                return int(raw)
            except ValueError:
                v = float(raw)  # accept "1e3"-style integers
                if v != int(v):
                    raise
                return int(v)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from e
    cfg = RunConfig()
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, value in cp.items(section):
            cfg.set(section, key, value)
    # dataclass validation only ran on defaults; re-run on the parsed values
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), str(p))
