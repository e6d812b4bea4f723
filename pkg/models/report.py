from __future__ import annotations

import math
from typing import List, Literal, Optional

from pydantic import BaseModel, Field, model_validator


class AlbedoMetrics(BaseModel):
    si_psnr: float = Field(..., description="Scale-invariant PSNR in dB (capped at 99).")
    ssim: float = Field(..., ge=-1.0, le=1.0)


class MSEMetric(BaseModel):
    mse: float = Field(..., ge=0.0)


class PerMapMetrics(BaseModel):
    albedo: AlbedoMetrics
    roughness: MSEMetric
    metallic: MSEMetric


class VarianceSummary(BaseModel):
    per_pixel_std_mean: float = Field(..., ge=0.0, description="Mean per-pixel std over masked pixels, all maps.")
    albedo_std_mean: float = Field(..., ge=0.0)
    roughness_std_mean: float = Field(..., ge=0.0)
    metallic_std_mean: float = Field(..., ge=0.0)
    std_map_path: Optional[str] = Field(None, description="Directory holding the SIVR/PNG std maps.")
    sampler: str = Field("onestep", description="'onestep' or 'ddim_<n>'.")


class TimingRecord(BaseModel):
    mode: str = Field(..., description="'onestep' or 'ddim_<n>'.", json_schema_extra={"example": "ddim_50"})
    setting: Literal["single_view", "multi_view"] = "multi_view"
    n_views: int = Field(..., ge=1)
    encode_s: float = Field(..., ge=0.0)
    denoise_s: float = Field(..., ge=0.0)
    decode_s: float = Field(..., ge=0.0)
    total_s: float = Field(..., ge=0.0)
    denoiser_calls: int = Field(..., ge=0, description="Denoiser forward passes per inference.")

    model_config = {
        "json_schema_extra": {
            "example": {
                "mode": "onestep",
                "setting": "multi_view",
                "n_views": 4,
                "encode_s": 0.004,
                "denoise_s": 0.006,
                "decode_s": 0.01,
                "total_s": 0.02,
                "denoiser_calls": 1,
            }
        }
    }

    @model_validator(mode="after")
    def _total(self) -> "TimingRecord":
        if abs(self.total_s - (self.encode_s + self.denoise_s + self.decode_s)) > 1e-6:
            raise ValueError("total_s must equal encode_s + denoise_s + decode_s")
        return self


class EvalMeta(BaseModel):
    resolution: int
    n_views: int
    n_seeds: int = 1
    checkpoint: Optional[str] = None
    si_psnr_scale_fit: str = Field("per_channel", description="How the si-PSNR scale is fitted.")
    mask_crop: bool = True
    scale_note: str = Field(
        "desk-scale evaluation at dataset resolution; reference results are reported at 512x512",
    )
    diagnostics_note: str = Field(
        "rm_texture_bake is a repository-defined diagnostic, not a published metric",
    )


class EvalReport(BaseModel):
    per_map: Optional[PerMapMetrics] = None
    rm_texture_bake: Optional[float] = Field(None, ge=0.0, description="Mean texture-bake score over textured views.")
    rm_texture_bake_glyph: Optional[float] = Field(None, ge=0.0, description="Same, glyph_grid scenes only.")
    variance: Optional[VarianceSummary] = None
    timing: List[TimingRecord] = Field(default_factory=list)
    meta: EvalMeta


class AblationRow(BaseModel):
    config: str = Field(..., json_schema_extra={"example": "Ours (w/ DIN)"})
    albedo_ssim: float = math.nan
    albedo_psnr: float = math.nan
    metallic_mse: float = math.nan
    roughness_mse: float = math.nan
    rm_texture_bake: float = math.nan
    status: Literal["ok", "absent"] = "ok"

    @classmethod
    def csv_columns(cls) -> List[str]:
        return list(cls.model_fields.keys())


class PredictionRecord(BaseModel):
    """Written by `infer` next to the predicted maps."""
    checkpoint: str
    module: str
    step: int
    deterministic: bool
    seed: int
    use_din: bool
