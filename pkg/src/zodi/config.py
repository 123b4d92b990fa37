"""Run configuration: a versioned YAML document with strict keys."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .adaptation import TrainConfig
from .denoiser import DenoiserConfig, PretrainConfig
from .segmentation import SegConfig
from .transfer import DEFAULT_STRENGTH
from .world import DOMAINS, SplitConfig

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "ZODI_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 50
    kind: str = "cosine"


@dataclass(frozen=True)
class TransferSection:
    strengths: dict = field(default_factory=lambda: dict(DEFAULT_STRENGTH))
    steps: int | None = None
    inversion_domain: str = "target"
    batch_size: int = 64


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    trials: tuple[int, ...] = (0, 1, 2)
    output_dir: str = "runs/default"
    world: SplitConfig = field(default_factory=SplitConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    transfer: TransferSection = field(default_factory=TransferSection)
    segmenter: SegConfig = field(default_factory=SegConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)

    def output_path(self) -> Path:
        """``output_dir`` resolved against ``$ZODI_OUTPUT_ROOT`` when relative."""
        p = Path(self.output_dir)
        if p.is_absolute():
            return p
        return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / p

    def to_dict(self) -> dict:
        d = asdict(self)
        d["denoiser"].pop("T")
        d["denoiser"].pop("schedule")
        # seeds come from `seed` (pretraining) and `trials` (segmenters)
        d["pretrain"].pop("seed")
        d["trainer"].pop("seed")
        return _plain(d)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def strength(self, domain: str) -> float:
        return float(self.transfer.strengths.get(domain, DEFAULT_STRENGTH.get(domain, 0.6)))


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _section(cls, data, where: str, **fixed):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)} - set(fixed)
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where!r}: {', '.join(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**values, **fixed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where!r} section: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config document must be a mapping")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}; this build reads {SCHEMA_VERSION}")

    schedule = _section(ScheduleConfig, data.get("schedule"), "schedule")
    cfg = RunConfig(
        seed=int(data.get("seed", 0)),
        trials=tuple(data.get("trials", (0, 1, 2))),
        output_dir=str(data.get("output_dir", "runs/default")),
        world=_section(SplitConfig, data.get("world"), "world"),
        schedule=schedule,
        denoiser=_section(DenoiserConfig, data.get("denoiser"), "denoiser", T=schedule.T, schedule=schedule.kind),
        pretrain=_section(PretrainConfig, data.get("pretrain"), "pretrain", seed=int(data.get("seed", 0))),
        transfer=_section(TransferSection, data.get("transfer"), "transfer"),
        segmenter=_section(SegConfig, data.get("segmenter"), "segmenter"),
        trainer=_section(TrainConfig, data.get("trainer"), "trainer", seed=0),
    )
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    try:
        cfg.denoiser.validate()
        cfg.segmenter.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not cfg.trials:
        raise ConfigError("trials must list at least one seed")
    if cfg.denoiser.num_classes != cfg.segmenter.num_classes:
        raise ConfigError("denoiser and segmenter disagree on num_classes")
    if cfg.denoiser.num_domains < len(DOMAINS):
        raise ConfigError(f"denoiser.num_domains must cover all {len(DOMAINS)} domains")
    for d, s in cfg.transfer.strengths.items():
        if d not in DOMAINS or not 0.0 <= float(s) <= 1.0:
            raise ConfigError(f"bad strength entry {d}: {s}")
    if cfg.transfer.inversion_domain not in ("target", "source"):
        raise ConfigError("transfer.inversion_domain must be 'target' or 'source'")
    if cfg.schedule.kind not in ("cosine", "linear") or cfg.schedule.T < 1:
        raise ConfigError(f"bad schedule {cfg.schedule}")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    return from_dict(data or {})

