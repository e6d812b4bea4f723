from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from framework.errors import DatasetFormatError

logger = logging.getLogger(__name__)

MIN_MASK_FRACTION = 0.01


@dataclass
class MaterialMaps:
    """Per-view ground truth (or prediction): HWC float arrays plus a bool mask."""
    albedo: np.ndarray     # [H,W,3]
    roughness: np.ndarray  # [H,W,1]
    metallic: np.ndarray   # [H,W,1]
    mask: np.ndarray       # [H,W,1] bool

    @property
    def shape(self) -> Tuple[int, int]:
        return self.albedo.shape[0], self.albedo.shape[1]

    def validate(self) -> "MaterialMaps":
        h, w = self.shape
        expected = {"albedo": 3, "roughness": 1, "metallic": 1, "mask": 1}
        for name, channels in expected.items():
            arr = getattr(self, name)
            if arr.shape != (h, w, channels):
                raise DatasetFormatError(f"{name} has shape {arr.shape}, expected {(h, w, channels)}")
        if self.mask.dtype != np.bool_:
            raise DatasetFormatError("mask must be boolean")
        for name in ("albedo", "roughness", "metallic"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
                raise DatasetFormatError(f"{name} leaves [0,1]")
        if self.mask.mean() < MIN_MASK_FRACTION:
            raise DatasetFormatError(f"mask covers {self.mask.mean():.4f} of pixels (< {MIN_MASK_FRACTION})")
        return self


@dataclass
class PackedRM:
    """RM = (roughness, metallic, 0) as one 3-channel image."""
    data: np.ndarray  # [H,W,3]


def pack_rm(maps: MaterialMaps) -> PackedRM:
    zero = np.zeros_like(maps.roughness)
    return PackedRM(np.concatenate([maps.roughness, maps.metallic, zero], axis=-1))


def unpack_rm(p: PackedRM, tolerance: float = 0.0, strict: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (roughness, metallic), each [...,H,W,1]; channel 2 must stay within
    tolerance of 0. With ``strict=False`` an excess is logged and channel 2 dropped."""
    data = p.data
    if data.ndim < 3 or data.shape[-1] != 3:
        raise DatasetFormatError(f"packed RM must be [...,H,W,3], got {data.shape}")
    worst = float(np.abs(data[..., 2]).max()) if data.size else 0.0
    if worst > tolerance:
        if strict:
            raise DatasetFormatError(f"packed RM channel 2 reaches {worst:.4f} (tolerance {tolerance})")
        logger.warning("packed RM channel 2 reaches %.4f (tolerance %.2f); dropping it", worst, tolerance)
    return data[..., 0:1].copy(), data[..., 1:2].copy()
