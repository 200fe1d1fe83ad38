"""Versioned binary checkpoint container.

Layout: an 8-byte magic, a little-endian uint64 header length, a UTF-8 JSON
header (sorted keys) describing stage, architecture, seeds, config hash, and
the array index, followed by each array's raw little-endian bytes in index
order. Serialization is canonical, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .fileio import atomic_write_bytes
from .networks import Model, NetConfig, build_model

MAGIC = b"PMCKPT01"
FORMAT_VERSION = 1

STAGE_PRETRAIN = "pretrain"
STAGE_FINETUNE = "finetune"
STAGES = (STAGE_PRETRAIN, STAGE_FINETUNE)

PARAM_PREFIX = "param/"
EMA_PREFIX = "ema/"
OPTIMIZER_PREFIX = "opt/"
QUEUE_PREFIX = "queue/"


class CheckpointError(ValueError):
    """Raised for malformed or incompatible checkpoint files."""


@dataclass
class Checkpoint:
    stage: str
    net_config: NetConfig
    seeds: dict[str, int]
    config_hash: str
    arrays: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise CheckpointError(f"stage must be one of {STAGES}, got {self.stage!r}")

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Arrays under a prefix, with the prefix stripped."""
        return {
            name[len(prefix) :]: arr for name, arr in self.arrays.items() if name.startswith(prefix)
        }


def _canonical_array(arr: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d arrays to 1-d; keep shapes intact.
    arr = np.asarray(arr, order="C")
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    names = sorted(ckpt.arrays)
    arrays = {name: _canonical_array(ckpt.arrays[name]) for name in names}
    header = {
        "format_version": ckpt.format_version,
        "stage": ckpt.stage,
        "net_config": ckpt.net_config.to_dict(),
        "seeds": ckpt.seeds,
        "config_hash": ckpt.config_hash,
        "extra": ckpt.extra,
        "arrays": [
            {"name": name, "dtype": arrays[name].dtype.str, "shape": list(arrays[name].shape)}
            for name in names
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, len(header_bytes).to_bytes(8, "little"), header_bytes]
    parts.extend(arrays[name].tobytes() for name in names)
    return b"".join(parts)


def save_checkpoint(path: Path | str, ckpt: Checkpoint) -> None:
    atomic_write_bytes(path, checkpoint_bytes(ckpt))


def load_checkpoint(path: Path | str) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    header_len = int.from_bytes(data[8:16], "little")
    header = json.loads(data[16 : 16 + header_len].decode("utf-8"))
    if header["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {header['format_version']}"
        )
    arrays = {}
    offset = 16 + header_len
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * dtype.itemsize
        arrays[entry["name"]] = np.frombuffer(
            data, dtype=dtype, count=count, offset=offset
        ).reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{path}: trailing bytes after array payload")
    return Checkpoint(
        stage=header["stage"],
        net_config=NetConfig.from_dict(header["net_config"]),
        seeds={k: int(v) for k, v in header["seeds"].items()},
        config_hash=header["config_hash"],
        arrays=arrays,
        extra=header["extra"],
        format_version=header["format_version"],
    )


def arrays_from_model(model: Model, prefix: str = PARAM_PREFIX) -> dict[str, np.ndarray]:
    return {
        f"{prefix}{name}": tensor.detach().cpu().numpy().copy()
        for name, tensor in model.state_dict().items()
    }


def restore_model(ckpt: Checkpoint, prefix: str = PARAM_PREFIX) -> Model:
    """Rebuild the model described by the checkpoint's architecture block."""
    model = build_model(ckpt.net_config, seed=0, momentum=float(ckpt.extra.get("momentum", 0.995)))
    params = ckpt.group(prefix)
    expected = set(model.state_dict())
    if set(params) != expected:
        missing = sorted(expected - set(params))[:3]
        surplus = sorted(set(params) - expected)[:3]
        raise CheckpointError(
            f"parameter set mismatch (missing {missing}, unexpected {surplus})"
        )
    model.load_state_dict({name: torch.from_numpy(arr.copy()) for name, arr in params.items()})
    return model


def require_stage(ckpt: Checkpoint, stage: str) -> None:
    if ckpt.stage != stage:
        raise CheckpointError(f"expected a {stage} checkpoint, got stage {ckpt.stage!r}")
