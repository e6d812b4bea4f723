from __future__ import annotations

from pathlib import Path

import pytest
import torch

from models.config import ModelConfig, ScheduleConfig, TrainConfig
from services.networks import ModelBundle
from services.synthdata import MaterialDataset, generate_dataset, load_dataset


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        latent_channels=4,
        ae_width=8,
        ae_deep_width=16,
        unet_width=16,
        attention_heads=2,
        time_embed_dim=32,
        n_rdb=1,
        rdb_growth=4,
        rdb_layers=2,
        din_width=8,
    )


@pytest.fixture
def tiny_schedule_config() -> ScheduleConfig:
    return ScheduleConfig(num_timesteps=50)


@pytest.fixture
def tiny_bundle(tiny_model_config, tiny_schedule_config) -> ModelBundle:
    return ModelBundle.build(tiny_model_config, tiny_schedule_config, seed=0).eval()


@pytest.fixture
def tiny_train_config() -> TrainConfig:
    return TrainConfig(steps=3, batch_scenes=2, views=2, resolution=32, checkpoint_every=2, seed=0)


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("data")
    generate_dataset(n_scenes=3, views_per_scene=2, resolution=32, seed=0, out_dir=out)
    return out


@pytest.fixture(scope="session")
def samples(dataset_dir):
    return load_dataset(dataset_dir)


@pytest.fixture
def material_dataset(samples) -> MaterialDataset:
    return MaterialDataset(samples, views=2)


@pytest.fixture
def rgb_views() -> torch.Tensor:
    return torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(0))
