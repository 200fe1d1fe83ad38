"""Shared fixtures: tiny architectures and a small pretrained state reused
across test modules to keep the suite fast."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from pairmodal import checkpoint as ckpt_io
from pairmodal.config import RunConfig, config_hash
from pairmodal.data import generate_synthetic_dataset, split_dataset
from pairmodal.networks import NetConfig
from pairmodal.pretraining import PretrainConfig, pretrain_loop

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_net() -> NetConfig:
    return NetConfig(
        image_side=32,
        patch_size=8,
        embed_dim=32,
        proj_dim=16,
        glo_dim=64,
        num_classes=3,
        encoder_heads=4,
        fusion_heads=4,
    )


@pytest.fixture(scope="session")
def grad_net() -> NetConfig:
    """Smallest legal architecture, for finite-difference comparisons."""
    return NetConfig(
        image_side=8,
        patch_size=4,
        embed_dim=8,
        proj_dim=4,
        glo_dim=12,
        num_classes=3,
        encoder_depth=1,
        encoder_heads=2,
        decoder_depth=1,
        fusion_heads=2,
        mlp_ratio=2.0,
    )


@pytest.fixture(scope="session")
def tiny_splits(tiny_net):
    samples = generate_synthetic_dataset(
        num_classes=tiny_net.num_classes,
        pairs_per_class=10,
        side=tiny_net.image_side,
        seed=0,
        patch_size=tiny_net.patch_size,
    )
    return split_dataset(samples, tiny_net.num_classes, seed=0)


@pytest.fixture(scope="session")
def tiny_pretrain(tiny_net, tiny_splits):
    config = PretrainConfig(epochs=2, batch_size=8, queue_size=16)
    return pretrain_loop(tiny_splits, tiny_net, config, init_seed=1, data_seed=1, mask_seed=1)


@pytest.fixture(scope="session")
def tiny_checkpoint(tiny_net, tiny_pretrain) -> ckpt_io.Checkpoint:
    result = tiny_pretrain
    arrays = ckpt_io.arrays_from_model(result.model)
    arrays.update(
        {f"{ckpt_io.OPTIMIZER_PREFIX}{k}": v for k, v in result.optimizer.state_arrays().items()}
    )
    arrays[f"{ckpt_io.QUEUE_PREFIX}wli.entries"] = result.queue_w.entries
    arrays[f"{ckpt_io.QUEUE_PREFIX}nbi.entries"] = result.queue_n.entries
    return ckpt_io.Checkpoint(
        stage=ckpt_io.STAGE_PRETRAIN,
        net_config=tiny_net,
        seeds={"data": 1, "init": 1, "mask": 1, "svd": 0, "shifts": 0},
        config_hash=config_hash(RunConfig(net=tiny_net)),
        arrays=arrays,
        extra={"momentum": 0.995},
    )


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(42)
