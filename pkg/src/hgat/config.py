"""Run configuration as an INI file.

Sections map onto the configuration dataclasses of the other modules.
Unknown sections or keys are errors, so a typo never silently falls back
to a default.  Relative paths are resolved against the directory of the
file they appear in.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .model import ModelConfig
from .plantsim import PlantConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    csv: str = "telemetry.csv"
    graph: str = "plant.graph"
    w: int = 24
    h: int = 1
    train_frac: float = 0.7
    val_frac: float = 0.15
    test_frac: float = 0.15
    center_diffs: bool = False
    # comma separated channel:period pairs for moving-average smoothing
    sampling: str = ""

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.train_frac, self.val_frac, self.test_frac)

    def sampling_periods(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for item in filter(None, (s.strip() for s in self.sampling.split(","))):
            name, sep, period = item.rpartition(":")
            if not sep or not name:
                raise ConfigError(f"sampling entry {item!r} must look like channel:period")
            try:
                out[name] = int(period)
            except ValueError:
                raise ConfigError(f"sampling period of {name!r} is not an integer") from None
        return out


@dataclass
class RunSection:
    kind: str = "hgat"
    out_dir: str = "runs/default"


@dataclass
class AblateConfig:
    kinds: str = "persistence,gru_signal,gat,hgnn,hgat_d,hgat"
    seeds: str = "0,1,2,3,4"

    def kind_list(self) -> list[str]:
        return [k.strip() for k in self.kinds.split(",") if k.strip()]

    def seed_list(self) -> list[int]:
        try:
            return [int(s) for s in self.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"seeds must be comma separated integers, got {self.seeds!r}") from None


SECTIONS = {
    "run": RunSection,
    "data": DataConfig,
    "simulate": PlantConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "ablate": AblateConfig,
}
PATH_KEYS = {("data", "csv"), ("data", "graph"), ("run", "out_dir")}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataConfig = field(default_factory=DataConfig)
    simulate: PlantConfig = field(default_factory=PlantConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def set(self, section: str, key: str, value: str, base: Optional[Path] = None) -> None:
        obj = getattr(self, section, None)
        if section not in SECTIONS or obj is None:
            raise ConfigError(f"unknown config section [{section}]")
        fields = {f.name: f for f in dataclasses.fields(obj)}
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        hint = typing.get_type_hints(type(obj))[key]
        parsed = _parse(value, hint, f"{section}.{key}")
        if (section, key) in PATH_KEYS and base is not None and parsed and not Path(parsed).is_absolute():
            parsed = str((base / parsed).resolve())
        setattr(obj, key, parsed)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for name in SECTIONS:
            obj = getattr(self, name)
            cp[name] = {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_ini(), encoding="utf-8")

    def validate(self) -> None:
        self.simulate.validate()
        self.model.validate()
        self.train.validate()
        if self.data.w < 1 or self.data.h < 1:
            raise ConfigError("data.w and data.h must be >= 1")


def load_config(path=None, overrides: Optional[list[str]] = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(path.read_text(encoding="utf-8"), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = path.parent.resolve()
        for section in cp.sections():
            for key, value in cp[section].items():
                cfg.set(section, key, value, base)
    for item in overrides or []:
        lhs, sep, value = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        cfg.set(section, key.strip(), value.strip(), Path.cwd())
    # defaults are relative to the working directory; pin them so the saved
    # resolved config means the same thing wherever it is read from
    for section, key in PATH_KEYS:
        obj = getattr(cfg, section)
        value = getattr(obj, key)
        if value and not Path(value).is_absolute():
            setattr(obj, key, str(Path(value).resolve()))
    cfg.validate()
    return cfg


def _parse(text: str, hint, where: str):
    text = text.strip()
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if text.lower() in ("", "none"):
            return None
        hint = args[0]
    try:
        if hint is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {getattr(hint, '__name__', hint)}") from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)
