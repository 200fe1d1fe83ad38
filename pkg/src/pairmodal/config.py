"""Run configuration: one structured YAML file covering every stage, with
command-line overrides on top and hard errors on unknown keys."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import yaml

from .fileio import sha256_bytes
from .finetune import FinetuneConfig
from .networks import NetConfig
from .pretraining import PretrainConfig
from .shiftdict import SvdConfig


class ConfigError(ValueError):
    """Raised for unknown keys, malformed values, or unreadable files."""


@dataclass(frozen=True)
class SeedBlock:
    """Independent seeds for each source of randomness in the pipeline."""

    data: int = 0
    init: int = 0
    mask: int = 0
    svd: int = 0
    shifts: int = 0


@dataclass(frozen=True)
class DatasetConfig:
    """Dataset source: a folder of class directories, or synthetic if unset."""

    root: Optional[str] = None
    pairs_per_class: int = 100
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def __post_init__(self) -> None:
        if self.pairs_per_class < 1:
            raise ConfigError("pairs_per_class must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    net: NetConfig = NetConfig()
    pretrain: PretrainConfig = PretrainConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    svd: SvdConfig = SvdConfig()
    dataset: DatasetConfig = DatasetConfig()
    seeds: SeedBlock = SeedBlock()
    out_dir: str = "runs/default"


_SECTIONS = {
    "net": NetConfig,
    "pretrain": PretrainConfig,
    "finetune": FinetuneConfig,
    "svd": SvdConfig,
    "dataset": DatasetConfig,
    "seeds": SeedBlock,
}


def _coerce(value, annotation):
    # YAML gives lists where dataclasses declare tuples.
    origin = typing.get_origin(annotation)
    if origin is tuple and isinstance(value, list):
        return tuple(value)
    return value


def _build_section(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"config section {section!r} must be a mapping")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key {section}.{key!r}")
    coerced = {key: _coerce(value, hints[key]) for key, value in values.items()}
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config section {section!r}: {exc}") from exc


def load_run_config(path: Optional[Path | str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Layer values: defaults, then the config file, then explicit overrides.

    ``overrides`` may set ``out_dir`` and a complete seed value applied to
    every member of the seed block.
    """
    raw: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
        raw = loaded

    known_top = set(_SECTIONS) | {"out_dir"}
    for key in raw:
        if key not in known_top:
            raise ConfigError(f"unknown config key {key!r}")

    sections = {
        name: _build_section(cls, raw.get(name, {}), name) for name, cls in _SECTIONS.items()
    }
    out_dir = raw.get("out_dir", RunConfig.out_dir)
    if not isinstance(out_dir, str):
        raise ConfigError("out_dir must be a string")

    overrides = overrides or {}
    if overrides.get("out_dir") is not None:
        out_dir = str(overrides["out_dir"])
    if overrides.get("seed") is not None:
        seed = int(overrides["seed"])
        sections["seeds"] = SeedBlock(data=seed, init=seed, mask=seed, svd=seed, shifts=seed)
    return RunConfig(out_dir=out_dir, **sections)


def config_hash(cfg: RunConfig) -> str:
    """Hash of the experiment identity: everything except the output location."""
    payload = dataclasses.asdict(cfg)
    payload.pop("out_dir")
    return sha256_bytes(json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8"))
