"""INI configuration files for training and evaluation runs.

A training file has a ``[train]`` section whose keys are ``TrainConfig``
fields (``lambda`` is accepted for ``lam``). An evaluation file has a
``[scenario]`` section::

    [scenario]
    kinds = NH, IN, VA, SO, VO, SF
    n_agents = 5
    episodes = 100
    seeds = 0, 1, 2
    pedestrian_checkpoints = peds/a.bin, peds/b.bin, peds/c.bin, peds/d.bin
    suboptimal_checkpoint = half.bin

Relative paths are resolved against the directory of the file.
"""

from __future__ import annotations

import ast
import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .evaluation import SCENARIO_KINDS
from .trainer import ConfigError, TrainConfig

ALIASES = {"lambda": "lam"}


def _parse_value(key: str, text: str, default):
    text = text.strip()
    if isinstance(default, str):
        return text
    try:
        value = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        raise ConfigError(key, f"cannot parse {text!r}") from None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {text!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {text!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {text!r}")
        return float(value)
    if isinstance(default, tuple):
        value = value if isinstance(value, tuple) else (value,)
        if not all(isinstance(v, int) for v in value):
            raise ConfigError(key, f"expected integers, got {text!r}")
        return value
    return value


def _split_override(item: str) -> tuple[str, str]:
    if "=" not in item:
        raise ConfigError(item, "override must look like key=value")
    key, value = item.split("=", 1)
    return key.strip(), value


def _read_section(path: str | Path | None, section: str) -> dict[str, str]:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (M, N)
    try:
        parser.read(p)
    except configparser.Error as e:
        raise ConfigError(str(p), f"unreadable config: {e}") from None
    if not parser.has_section(section):
        raise ConfigError(section, f"{p} has no [{section}] section")
    return dict(parser.items(section))


def load_train_config(path: str | Path | None = None, overrides=()) -> TrainConfig:
    """Defaults, then the file's ``[train]`` section, then ``key=value`` overrides."""
    raw = _read_section(path, "train")
    raw.update(_split_override(o) for o in overrides)
    defaults = TrainConfig()
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    values = {}
    for key, text in raw.items():
        name = ALIASES.get(key, key)
        if name not in fields:
            raise ConfigError(key, "unknown training option")
        values[name] = _parse_value(key, text, getattr(defaults, name))
    return TrainConfig(**values).validate()


@dataclass
class SuiteConfig:
    kinds: tuple = SCENARIO_KINDS
    n_agents: int = 5
    episodes: int = 100
    seeds: tuple = (0,)
    pedestrian_checkpoints: tuple = ()
    suboptimal_checkpoint: str = ""

    def validate(self) -> "SuiteConfig":
        for k in self.kinds:
            if k not in SCENARIO_KINDS:
                raise ConfigError("kinds", f"unknown scenario kind {k!r}; expected one of {', '.join(SCENARIO_KINDS)}")
        if not self.kinds:
            raise ConfigError("kinds", "at least one scenario kind is required")
        if self.n_agents < 2:
            raise ConfigError("n_agents", f"must be >= 2, got {self.n_agents}")
        if self.episodes < 1:
            raise ConfigError("episodes", f"must be >= 1, got {self.episodes}")
        if not self.seeds:
            raise ConfigError("seeds", "at least one seed is required")
        return self


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.replace("\n", ",").split(",") if t.strip()]


def load_suite_config(path: str | Path | None = None, overrides=()) -> SuiteConfig:
    file_base = Path(path).parent if path is not None else Path(".")
    items = [(k, v, file_base) for k, v in _read_section(path, "scenario").items()]
    # overrides come from the command line, so their paths are relative to the working directory
    items += [(*_split_override(o), Path(".")) for o in overrides]
    out = {}
    for key, text, base in items:
        if key == "kinds":
            out[key] = tuple(k.upper() for k in _csv_list(text))
        elif key == "seeds":
            try:
                out[key] = tuple(int(s) for s in _csv_list(text))
            except ValueError:
                raise ConfigError(key, f"expected integers, got {text!r}") from None
        elif key in ("n_agents", "episodes"):
            out[key] = _parse_value(key, text, 0)
        elif key == "pedestrian_checkpoints":
            out[key] = tuple(str(base / p) for p in _csv_list(text))
        elif key == "suboptimal_checkpoint":
            out[key] = str(base / text.strip()) if text.strip() else ""
        else:
            raise ConfigError(key, "unknown scenario option")
    return SuiteConfig(**out).validate()
