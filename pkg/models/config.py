from __future__ import annotations

from enum import Enum
from typing import Literal, Optional

import torch
from pydantic import BaseModel, Field, ValidationError, model_validator

from framework.errors import ConfigurationError
from utils.hashing import sha256_json


class Stage(str, Enum):
    AUTOENCODER_PRETRAIN = "autoencoder_pretrain"
    MULTISTEP_PRETRAIN = "multistep_pretrain"
    ONESTEP_FINETUNE = "onestep_finetune"
    DIN_TRAIN = "din_train"


# CLI stage names -> Stage
STAGE_ALIASES = {
    "autoencoder": Stage.AUTOENCODER_PRETRAIN,
    "multistep": Stage.MULTISTEP_PRETRAIN,
    "onestep": Stage.ONESTEP_FINETUNE,
    "din": Stage.DIN_TRAIN,
}

# Stage that must have produced the starting checkpoint
STAGE_PREREQUISITE = {
    Stage.AUTOENCODER_PRETRAIN: None,
    Stage.MULTISTEP_PRETRAIN: Stage.AUTOENCODER_PRETRAIN,
    Stage.ONESTEP_FINETUNE: Stage.MULTISTEP_PRETRAIN,
    Stage.DIN_TRAIN: Stage.ONESTEP_FINETUNE,
}


class Task(str, Enum):
    ALBEDO = "albedo"
    RM = "rm"

    @property
    def index(self) -> int:
        return 0 if self is Task.ALBEDO else 1


class BaseSchedule(str, Enum):
    LINEAR_BETA = "linear_beta"
    COSINE = "cosine"


class ScheduleConfig(BaseModel):
    num_timesteps: int = Field(
        1000,
        ge=1,
        description="Number of diffusion timesteps T.",
        json_schema_extra={"example": 1000},
    )
    base_kind: BaseSchedule = Field(
        BaseSchedule.LINEAR_BETA,
        description="Base schedule before the zero-terminal-SNR rescale.",
        json_schema_extra={"example": "linear_beta"},
    )
    beta_start: float = Field(1e-4, gt=0.0, lt=1.0, description="First beta of the linear schedule.")
    beta_end: float = Field(0.02, gt=0.0, lt=1.0, description="Last beta of the linear schedule.")


class ModelConfig(BaseModel):
    latent_channels: int = Field(4, ge=1, description="Latent channels C.")
    ae_width: int = Field(32, ge=8, description="Autoencoder full-resolution width (tap channels).")
    ae_deep_width: int = Field(64, ge=8, description="Autoencoder width below full resolution.")
    unet_width: int = Field(64, ge=8, description="Denoiser base width.")
    attention_heads: int = Field(4, ge=1, description="Heads of cross-view / cross-component attention.")
    time_embed_dim: int = Field(128, ge=8, description="Timestep + task embedding width.")
    n_rdb: int = Field(2, ge=1, description="Residual Dense Blocks per DIN branch.")
    rdb_growth: int = Field(16, ge=1, description="RDB growth rate.")
    rdb_layers: int = Field(3, ge=1, description="Conv layers per RDB.")
    din_width: int = Field(32, ge=8, description="DIN internal feature width.")
    condition_encoding: Literal["gamma"] = Field(
        "gamma",
        description="Encoding of the condition images seen by E and by the DIN (same as training conditions).",
    )

    model_config = {
        "json_schema_extra": {
            "examples": [
                {
                    "latent_channels": 4,
                    "ae_width": 32,
                    "ae_deep_width": 64,
                    "unet_width": 64,
                    "attention_heads": 4,
                    "time_embed_dim": 128,
                    "n_rdb": 2,
                    "rdb_growth": 16,
                    "rdb_layers": 3,
                    "din_width": 32,
                }
            ]
        }
    }

    @model_validator(mode="after")
    def _check_heads(self) -> "ModelConfig":
        # attention runs at 2 * unet_width channels
        if (2 * self.unet_width) % self.attention_heads:
            raise ValueError("attention_heads must divide 2 * unet_width")
        return self


class TrainConfig(BaseModel):
    stage: Stage = Field(Stage.MULTISTEP_PRETRAIN, description="Stage this config trains.")
    steps: int = Field(2000, ge=1, description="Optimizer steps.")
    batch_scenes: int = Field(2, ge=1, description="Scenes per batch.")
    views: int = Field(4, ge=1, le=8, description="Views per scene fed to the networks.")
    lr_start: float = Field(1e-4, gt=0.0, description="Learning rate at step 0.")
    lr_end: float = Field(1e-5, gt=0.0, description="Learning rate at the last step (linear decay).")
    weight_decay: float = Field(0.01, ge=0.0)
    betas: tuple[float, float] = Field((0.9, 0.999))
    grad_clip: float = Field(1.0, gt=0.0, description="Global gradient-norm clip.")
    seed: int = Field(0)
    resolution: int = Field(64, description="Pixel resolution; one of 32/64/128/256.")
    checkpoint_every: int = Field(500, ge=1)
    use_gm_loss: bool = Field(True, description="Include the gradient-matching term on RM.")
    masked_loss: bool = Field(True, description="Restrict pixel losses to the foreground mask.")
    from_scratch: bool = Field(False, description="Allow onestep fine-tuning without a multistep checkpoint.")
    kl_weight: float = Field(1e-4, ge=0.0, description="KL regularizer weight of autoencoder pretraining.")
    num_workers: int = Field(0, ge=0, description="DataLoader workers; 0 keeps batch order deterministic.")

    model_config = {
        "json_schema_extra": {
            "examples": [
                {
                    "stage": "onestep_finetune",
                    "steps": 1000,
                    "batch_scenes": 2,
                    "views": 4,
                    "lr_start": 1e-4,
                    "lr_end": 1e-5,
                    "seed": 0,
                    "resolution": 64,
                }
            ]
        }
    }

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("lr_start must be >= lr_end > 0")
        if self.resolution not in (32, 64, 128, 256):
            raise ValueError("resolution must be one of 32, 64, 128, 256")
        return self

    def lr_at(self, step: int) -> float:
        """Linear decay: lr_start + (lr_end - lr_start) * step / steps."""
        return self.lr_start + (self.lr_end - self.lr_start) * step / self.steps


class ReferenceRecipe(BaseModel):
    """Documentation only: the full-scale recipe this desk-scale run scales down."""
    denoiser_steps: int = 10_000
    denoiser_batch: int = 8
    din_steps: int = 20_000
    din_batch: int = 4
    train_resolution: int = 256
    eval_resolution: int = 512


class RunConfig(BaseModel):
    train: TrainConfig = Field(default_factory=TrainConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    device: str = Field("auto", description="'cpu', 'cuda', or 'auto'.")
    deterministic_algorithms: bool = Field(
        False, description="Force torch deterministic kernels (single-threaded reproducibility)."
    )
    reference_recipe: ReferenceRecipe = Field(default_factory=ReferenceRecipe)

    def architecture_sha256(self) -> str:
        return architecture_sha256(self.model, self.schedule)


def architecture_sha256(model: ModelConfig, schedule: ScheduleConfig) -> str:
    return sha256_json({"model": model.model_dump(mode="json"), "schedule": schedule.model_dump(mode="json")})


def resolve_device(name: str) -> str:
    if name != "auto":
        return name
    return "cuda" if torch.cuda.is_available() else "cpu"


def load_run_config(text: Optional[str]) -> RunConfig:
    try:
        return RunConfig.model_validate_json(text) if text else RunConfig()
    except ValidationError as exc:
        raise ConfigurationError(f"invalid run config: {exc}") from exc
