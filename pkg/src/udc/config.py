"""Run configuration: nested dataclasses loaded from YAML presets, files and ``key=value`` overrides."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml

from udc.drl import DRLConfig
from udc.ehr import TASKS, SyntheticConfig
from udc.errors import ConfigError
from udc.pcm import PCMConfig

PRESETS = ("default", "desk")


@dataclass
class DataConfig:
    source: str = "synthetic"  # or "files"
    dataset_path: str | None = None
    text_dir: str | None = None
    split: list[float] = field(default_factory=lambda: [0.6, 0.2, 0.2])
    text_dim: int = 128
    text_noise: float = 0.1
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


@dataclass
class StageConfig:
    epochs: int = 50
    batch_size: int = 16
    lr_diag: float = 1e-3
    lr_med: float = 2e-4
    weight_decay: float = 0.01

    def lr(self, task: str) -> float:
        return self.lr_diag if task == "diag" else self.lr_med


@dataclass
class RunConfig:
    task: str = "diag"
    seed: int = 0
    output_dir: str = "udc-run"
    eta: float = 0.2
    rarity_mode: str = "rank"
    ks: list[int] = field(default_factory=lambda: [5, 10, 20, 40])
    k: int = 20
    threshold: float = 0.5
    no_finetune: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    pcm: PCMConfig = field(default_factory=PCMConfig)
    pretrain: StageConfig = field(default_factory=StageConfig)
    drl: DRLConfig = field(default_factory=DRLConfig)
    finetune: StageConfig = field(default_factory=StageConfig)

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if not 0 < self.eta < 1:
            raise ConfigError("eta must lie in (0, 1)")
        if self.rarity_mode not in ("rank", "case_fraction"):
            raise ConfigError("rarity_mode must be 'rank' or 'case_fraction'")
        if not self.ks or any(int(k) < 1 for k in self.ks) or self.k < 1:
            raise ConfigError("every K must be >= 1")
        if self.data.source not in ("synthetic", "files"):
            raise ConfigError("data.source must be 'synthetic' or 'files'")
        if self.data.source == "files" and not (self.data.dataset_path and self.data.text_dir):
            raise ConfigError("data.source 'files' needs data.dataset_path and data.text_dir")
        if len(self.data.split) != 3 or abs(sum(self.data.split) - 1) > 1e-9:
            raise ConfigError("data.split must be three ratios summing to 1")
        if self.data.text_dim < 1 or self.data.text_noise < 0:
            raise ConfigError("data.text_dim must be positive and data.text_noise non-negative")
        for stage in (self.pretrain, self.finetune):
            if stage.epochs < 0 or stage.batch_size < 1 or stage.lr_diag < 0 or stage.lr_med < 0:
                raise ConfigError("stage epochs >= 0, batch_size >= 1 and lr >= 0 required")
        self.data.synthetic.validate()
        self.pcm.validate()
        self.drl.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    def section_hash(self, *names: str) -> str:
        d = self.to_dict()
        blob = json.dumps({n: d[n] for n in names}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _build(cls, data: Mapping[str, Any], path: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join((path + '.' if path else '') + u for u in unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        where = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value or {}, where)
        else:
            kwargs[name] = _coerce(value, current, where)
    return cls(**kwargs)


def _coerce(value, current, where: str):
    if value is None or current is None:
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true/false")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{where} must be an integer")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
        return list(value)
    if isinstance(current, str) and not isinstance(value, str):
        raise ConfigError(f"{where} must be a string")
    return value


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def preset_dict(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    text = resources.files("udc").joinpath("presets", f"{name}.yaml").read_text()
    return yaml.safe_load(text) or {}


def parse_override(item: str) -> dict:
    """``a.b.c=value`` into a nested dict; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value in override {item!r}") from exc
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def load_config(path=None, preset: str = "default", overrides=(), seed: int | None = None) -> RunConfig:
    """Preset, then file, then overrides, then ``seed``; the result is validated."""
    data = preset_dict(preset)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            loaded = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: invalid YAML ({exc})") from exc
        data = _merge(data, loaded)
    for item in overrides:
        data = _merge(data, parse_override(item))
    if seed is not None:
        data["seed"] = seed
    cfg = _build(RunConfig, data, "")
    cfg.validate()
    return cfg


def config_from_dict(data: Mapping) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
