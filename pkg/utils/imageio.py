from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image

from framework.errors import DatasetFormatError

SIVR_MAGIC = b"SIVR"


# -----------------------------------------------------------------------------
# PNG: 8-bit RGB, 16-bit grayscale; values map linearly [0,1] <-> [0, max_int]
# -----------------------------------------------------------------------------
def write_rgb8(path: Path, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise DatasetFormatError(f"expected [H,W,3] image for {path}, got {image.shape}")
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def write_gray16(path: Path, image: np.ndarray) -> None:
    if image.ndim == 3:
        if image.shape[2] != 1:
            raise DatasetFormatError(f"expected single-channel image for {path}, got {image.shape}")
        image = image[..., 0]
    data = np.round(np.clip(image.astype(np.float64), 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(data).save(path, format="PNG")


def read_rgb8(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode != "RGB":
            raise DatasetFormatError(f"{path}: expected 8-bit RGB PNG, got mode {img.mode}")
        return np.asarray(img, dtype=np.float32) / 255.0


def read_gray16(path: Path) -> np.ndarray:
    """Returns [H,W,1] float32 in [0,1]."""
    with Image.open(path) as img:
        if img.mode not in ("I;16", "I;16B", "I;16L", "I"):
            raise DatasetFormatError(f"{path}: expected 16-bit grayscale PNG, got mode {img.mode}")
        data = np.asarray(img).astype(np.float32)
    return (data / 65535.0)[..., None]


# -----------------------------------------------------------------------------
# Variance maps
# -----------------------------------------------------------------------------
def write_sivr(path: Path, values: np.ndarray) -> None:
    """Raw float map: magic "SIVR", u32 H, u32 W, little-endian f32 row-major."""
    if values.ndim != 2:
        raise DatasetFormatError(f"SIVR payload must be 2-D, got {values.shape}")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(SIVR_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_sivr(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != SIVR_MAGIC:
        raise DatasetFormatError(f"{path}: bad SIVR magic {raw[:4]!r}")
    h, w = struct.unpack("<II", raw[4:12])
    body = raw[12:]
    if len(body) != 4 * h * w:
        raise DatasetFormatError(f"{path}: payload of {len(body)} bytes does not match {h}x{w}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).copy()


def write_heat8(path: Path, values: np.ndarray, vmax: float | None = None, cmap: str = "inferno") -> None:
    """8-bit heat image of a non-negative map; vmax defaults to the map maximum."""
    top = float(values.max()) if vmax is None else float(vmax)
    scaled = values / top if top > 0 else np.zeros_like(values)
    rgba = colormaps[cmap](np.clip(scaled, 0.0, 1.0))
    write_rgb8(path, rgba[..., :3])
