from __future__ import annotations

from pydantic import BaseModel, Field

from models.config import Stage


class CheckpointManifest(BaseModel):
    """Sidecar written next to every checkpoint payload."""
    schema_version: int = Field(1, alias="schema", description="Sidecar format version.")
    module: Stage = Field(..., description="Stage that wrote the checkpoint.")
    step: int = Field(..., ge=0)
    config_sha256: str = Field(..., min_length=64, max_length=64, description="Architecture hash of model+schedule config.")

    model_config = {
        "populate_by_name": True,
        "json_schema_extra": {
            "example": {
                "schema": 1,
                "module": "onestep_finetune",
                "step": 1000,
                "config_sha256": "ab" * 32,
            }
        },
    }
