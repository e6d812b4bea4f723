from __future__ import annotations

from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator

PrimitiveKind = Literal["sphere", "box", "plane"]
TextureKind = Literal["checker", "stripes", "glyph_grid", "value_noise", "flat"]

Vec3 = Tuple[float, float, float]


class SceneSpec(BaseModel):
    """What a procedural scene is made of; the seed decides the rest."""
    primitives: List[PrimitiveKind] = Field(
        default_factory=lambda: ["sphere"],
        description="Primitives placed in the scene (at least one).",
        json_schema_extra={"example": ["sphere", "box"]},
    )
    texture: TextureKind = Field(
        "glyph_grid",
        description="Albedo texture kind shared by every primitive.",
        json_schema_extra={"example": "glyph_grid"},
    )
    texture_frequency: float = Field(
        6.0,
        gt=0.0,
        description="Texture cells per world unit.",
    )
    albedo: Optional[Vec3] = Field(
        None,
        description="Force a flat albedo colour on every primitive (texture ignored).",
        json_schema_extra={"example": [0.5, 0.5, 0.5]},
    )
    roughness: Optional[float] = Field(None, ge=0.0, le=1.0, description="Force roughness everywhere.")
    metallic: Optional[float] = Field(None, ge=0.0, le=1.0, description="Force metallic everywhere.")
    n_lights: Tuple[int, int] = Field((1, 3), description="Inclusive range of point-light count.")
    light_intensity: Tuple[float, float] = Field((0.5, 2.0), description="Light intensity range.")
    ambient: Tuple[float, float] = Field((0.05, 0.2), description="Ambient level range.")

    model_config = {
        "json_schema_extra": {
            "examples": [
                {"primitives": ["sphere", "box"], "texture": "glyph_grid", "texture_frequency": 6.0},
                {"primitives": ["sphere"], "texture": "flat", "albedo": [0.5, 0.5, 0.5], "roughness": 1.0, "metallic": 0.0},
            ]
        }
    }


class CameraRecord(BaseModel):
    position: Vec3 = Field(..., description="Camera centre in world space.", json_schema_extra={"example": [0.0, 1.5, 4.0]})
    look_at: Vec3 = Field(..., description="Point the optical axis passes through.", json_schema_extra={"example": [0.0, 0.0, 0.0]})
    fov_deg: float = Field(..., gt=0.0, lt=180.0, description="Vertical field of view in degrees.")


class LightRecord(BaseModel):
    position: Vec3 = Field(..., description="Point-light position in world space.")
    color: Vec3 = Field(..., description="Linear RGB radiance scale (colour times intensity).")


class LightingRecord(BaseModel):
    lights: List[LightRecord] = Field(default_factory=list)
    ambient: float = Field(0.1, ge=0.0, description="Ambient level (white).")


class SceneRecord(BaseModel):
    """Per-scene sidecar written next to the view directories."""
    scene_id: int
    texture: TextureKind
    primitives: List[PrimitiveKind]
    lighting: LightingRecord


class FileEntry(BaseModel):
    path: str = Field(..., description="Path relative to the dataset root, '/'-separated.")
    sha256: str = Field(..., min_length=64, max_length=64)


class DatasetManifest(BaseModel):
    seed: int
    scenes: int = Field(..., ge=1)
    views: int = Field(..., ge=1, le=8)
    resolution: int
    files: List[FileEntry] = Field(default_factory=list)

    model_config = {
        "json_schema_extra": {
            "examples": [
                {
                    "seed": 1,
                    "scenes": 2,
                    "views": 4,
                    "resolution": 64,
                    "files": [{"path": "scene_0000/view_00/rgb.png", "sha256": "0" * 64}],
                }
            ]
        }
    }

    @field_validator("resolution")
    @classmethod
    def _resolution(cls, value: int) -> int:
        if value not in (32, 64, 128, 256):
            raise ValueError("resolution must be one of 32, 64, 128, 256")
        return value
