"""Run configuration: dataclass defaults, TOML or JSON files, flag overrides.

Precedence is flags > file > defaults. Every command writes the resolved
configuration as ``config.resolved.json`` next to its outputs, and that file
is itself a valid ``--config`` input.
"""
from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .mebs import MebsConfig
from .model_core.training import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class LandscapeConfig:
    preset: str = "trainable"
    seed: int = 0
    vocab: dict = field(default_factory=dict)
    shared_profile: bool = False
    flat_slots: bool = False


@dataclass
class DataConfig:
    n_train: int = 200_000
    n_eval: int = 50_000
    eval_seed_offset: int = 1_000_003


@dataclass
class ModelConfig:
    embed_dim: int = 8
    hidden: tuple = (64, 32, 16)
    r_min: float = 0.1
    rcb_support: int = 50
    win_rate: TrainConfig = field(default_factory=lambda: MebsConfig().win_rate)
    calibration: TrainConfig = field(default_factory=lambda: MebsConfig().calibration)
    shading: TrainConfig = field(default_factory=lambda: MebsConfig().shading)

    def mebs(self, seed: int, **ablation) -> MebsConfig:
        return MebsConfig(embed_dim=self.embed_dim, hidden=tuple(self.hidden), r_min=self.r_min,
                          rcb_support=self.rcb_support, seed=seed, win_rate=self.win_rate,
                          calibration=self.calibration, shading=self.shading, **ablation)


@dataclass
class CampaignConfig:
    budget: Optional[float] = None   # default: expected cost at mu0 = 1
    bracket: tuple = (0.1, 10.0)
    tol: float = 0.01


@dataclass
class BaselineConfig:
    tsbs_G: int = 20
    npm_fields: tuple = ("scene", "ad_bucket")
    npm_support: int = 50


@dataclass
class BenchConfig:
    batch_size: int = 100_000
    repetitions: int = 10


@dataclass
class TheoremConfig:
    n_samples: int = 500
    mu0s: tuple = (0.5, 1.0, 2.0)
    resolution: int = 400


@dataclass
class RunConfig:
    seed: int = 1
    threads: int = 1
    out: str = "runs/default"
    mu0: float = 1.0
    landscape: LandscapeConfig = field(default_factory=LandscapeConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    campaign: CampaignConfig = field(default_factory=CampaignConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    theorem: TheoremConfig = field(default_factory=TheoremConfig)

    def validate(self):
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.data.n_train < 1 or self.data.n_eval < 1:
            raise ConfigError("data.n_train and data.n_eval must be positive")
        for k, v in self.landscape.vocab.items():
            if int(v) < 1:
                raise ConfigError(f"landscape.vocab.{k} must be >= 1, got {v}")
        if not 0 < self.model.r_min < 1:
            raise ConfigError("model.r_min must lie in (0, 1)")
        if self.baselines.tsbs_G < 2:
            raise ConfigError("baselines.tsbs_G must be >= 2")
        lo, hi = self.campaign.bracket
        if not 0 < lo < hi:
            raise ConfigError("campaign.bracket must satisfy 0 < low < high")
        return self

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, data: dict, where: str):
    """Instantiate a dataclass from a (partial) dict, rejecting unknown keys."""
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config key(s) in [{where or 'root'}]: {sorted(unknown)}")
    base = cls()
    kw = {}
    for name, f in known.items():
        cur = getattr(base, name)
        if name not in data:
            kw[name] = cur
            continue
        v = data[name]
        path = f"{where}.{name}" if where else name
        if is_dataclass(cur):
            if not isinstance(v, dict):
                raise ConfigError(f"[{path}] must be a table")
            kw[name] = _build(type(cur), v, path)
        elif isinstance(cur, tuple):
            kw[name] = tuple(v)
        else:
            kw[name] = v
    return cls(**kw)


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            if p.suffix == ".json":
                data = json.loads(p.read_text())
            else:
                data = tomllib.loads(p.read_text())
        except (ValueError, tomllib.TOMLDecodeError) as e:
            raise ConfigError(f"cannot parse {p}: {e}") from e
    for k, v in (overrides or {}).items():
        if v is not None:
            data[k] = v
    try:
        cfg = _build(RunConfig, data, "")
    except TypeError as e:
        raise ConfigError(str(e)) from e
    return cfg.validate()


def write_snapshot(cfg: RunConfig, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    p = d / "config.resolved.json"
    p.write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    return p
