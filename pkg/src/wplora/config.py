"""Run configuration: one JSON document, parsed strictly.

Every section mirrors a dataclass from its owning module and every field is
optional. The top-level ``seed`` is mandatory (it may come from ``--seed``)
and is copied into each section that has a seed of its own unless that
section sets one explicitly.
"""

from __future__ import annotations

import json
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

from .evaluate import BenchmarkSpec
from .flow import TrainConfig
from .model import ModelConfig
from .persona import BACKGROUND_NAMES, POSES, DataConfig


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    data: str | None = None  # dataset directory; regenerated from the data section when unset
    base: str | None = None
    adapters: str | None = None
    adapters_ablation: str | None = None  # the without-L_ssr adapters for ``eval --ablation``


@dataclass
class GenerateSpec:
    sources: tuple = (0, 0, 0)
    pose: str = "stand"
    background: str = "sky"
    count: int = 1
    steps: int = 32

    def __post_init__(self):
        if len(self.sources) != 3:
            raise ValueError("sources must name three identities (face, upper, lower)")
        if self.pose not in POSES:
            raise ValueError(f"unknown pose {self.pose!r}")
        if self.background not in BACKGROUND_NAMES:
            raise ValueError(f"unknown background {self.background!r}")


@dataclass
class ProbeSpec:
    part: str = "upper"
    t: float = 0.5
    samples: int = 20
    pool: str = "test"


@dataclass
class RunConfig:
    seed: int
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    generate: GenerateSpec = field(default_factory=GenerateSpec)
    probe: ProbeSpec = field(default_factory=ProbeSpec)
    paths: Paths = field(default_factory=Paths)

    def to_dict(self):
        return asdict(self)

    def echo(self, out_dir) -> Path:
        """Write the effective config next to a command's outputs."""
        path = Path(out_dir) / "effective_config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path


SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig, "bench": BenchmarkSpec,
            "generate": GenerateSpec, "probe": ProbeSpec, "paths": Paths}


def _check_value(path: str, value, default):
    if default is None:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string or null, got {type(value).__name__}")
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(isinstance(v, type(default[0])) for v in value)
        value = tuple(value) if ok else value
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {json.dumps(value)}")
    return value


def _section(name: str, cls, doc, seed: int):
    if not isinstance(doc, dict):
        raise ConfigError(f"{name}: expected an object")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown key")
        f = known[key]
        default = f.default if f.default is not MISSING else f.default_factory()
        kwargs[key] = _check_value(f"{name}.{key}", value, default)
    if "seed" in known and "seed" not in kwargs:
        kwargs["seed"] = seed
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{name}: {e}") from None


def parse_config(doc: dict, seed: int | None = None) -> RunConfig:
    """Build a RunConfig from a parsed JSON document; ``seed`` overrides the document's seed."""
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be an object")
    for key in doc:
        if key != "seed" and key not in SECTIONS:
            raise ConfigError(f"{key}: unknown key")
    if seed is None:
        seed = doc.get("seed")
    if seed is None:
        raise ConfigError("seed: required (set it in the config or pass --seed)")
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64:
        raise ConfigError(f"seed: expected an unsigned 64-bit integer, got {json.dumps(seed)}")
    parts = {name: _section(name, cls, doc.get(name, {}), seed) for name, cls in SECTIONS.items()}
    return RunConfig(seed=seed, **parts)


def load_config(path=None, seed: int | None = None) -> RunConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None
        except FileNotFoundError:
            raise ConfigError(f"{path}: config file not found") from None
    return parse_config(doc, seed)
