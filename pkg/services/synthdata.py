"""Procedural multi-view dataset: generation, on-disk layout and loading.

Layout::

    out_dir/manifest.json
    out_dir/scene_{id:04d}/scene.json
    out_dir/scene_{id:04d}/view_{v:02d}/{rgb,albedo,roughness,metallic,mask}.png + camera.json
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from pydantic import ValidationError
import torch
from torch.utils.data import Dataset
from tqdm import tqdm

from framework.errors import DatasetFormatError, InvalidArgumentError, RunIOError
from models.dataset import CameraRecord, DatasetManifest, FileEntry, LightingRecord, SceneRecord, SceneSpec
from services.materials import MaterialMaps, pack_rm
from services.renderer import make_scene, orbit_cameras, render_view
from utils.hashing import sha256_file
from utils.imageio import read_gray16, read_rgb8, write_gray16, write_rgb8

logger = logging.getLogger(__name__)

RESOLUTIONS = (32, 64, 128, 256)
VIEW_FILES = ("rgb.png", "albedo.png", "roughness.png", "metallic.png", "mask.png")
TEXTURE_CYCLE = ("glyph_grid", "checker", "value_noise", "stripes", "glyph_grid", "flat")
PRIMITIVE_SETS = (("sphere",), ("box",), ("sphere", "box"), ("sphere", "plane"), ("box", "sphere", "plane"))


@dataclass
class ViewRecord:
    rgb: np.ndarray  # [H,W,3]
    maps: MaterialMaps
    camera: CameraRecord


@dataclass
class MultiViewSample:
    scene_id: int
    texture: str
    views: List[ViewRecord]
    lighting: LightingRecord

    def validate(self) -> "MultiViewSample":
        if not 1 <= len(self.views) <= 8:
            raise DatasetFormatError(f"scene {self.scene_id}: {len(self.views)} views outside [1, 8]")
        shape = self.views[0].rgb.shape
        for view in self.views:
            if view.rgb.shape != shape:
                raise DatasetFormatError(f"scene {self.scene_id}: views disagree on resolution")
            view.maps.validate()
        return self


def scene_spec_for(scene_id: int, seed: int) -> SceneSpec:
    """Round-robin over texture kinds and primitive sets so every dataset mixes them."""
    rng = np.random.default_rng([seed, scene_id])
    return SceneSpec(
        primitives=list(PRIMITIVE_SETS[int(rng.integers(len(PRIMITIVE_SETS)))]),
        texture=TEXTURE_CYCLE[scene_id % len(TEXTURE_CYCLE)],
        texture_frequency=float(rng.uniform(4.0, 8.0)),
    )


def _json_dump(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def generate_dataset(
    n_scenes: int,
    views_per_scene: int,
    resolution: int,
    seed: int,
    out_dir: Path,
) -> DatasetManifest:
    if resolution not in RESOLUTIONS:
        raise InvalidArgumentError(f"resolution must be one of {RESOLUTIONS}, got {resolution}")
    if n_scenes < 1:
        raise InvalidArgumentError("n_scenes must be >= 1")
    if not 1 <= views_per_scene <= 8:
        raise InvalidArgumentError("views_per_scene must be in [1, 8]")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        files: List[FileEntry] = []
        for scene_id in tqdm(range(n_scenes), desc="scenes", disable=n_scenes < 4):
            files.extend(_write_scene(out_dir, scene_id, views_per_scene, resolution, seed))
        manifest = DatasetManifest(seed=seed, scenes=n_scenes, views=views_per_scene, resolution=resolution, files=files)
        _json_dump(out_dir / "manifest.json", manifest.model_dump(mode="json"))
    except OSError as exc:
        raise RunIOError(f"cannot write dataset to {out_dir}: {exc}") from exc
    logger.info("wrote %d scenes x %d views at %dpx to %s", n_scenes, views_per_scene, resolution, out_dir)
    return manifest


def _write_scene(out_dir: Path, scene_id: int, n_views: int, resolution: int, seed: int) -> List[FileEntry]:
    scene_seed = seed * 100_003 + scene_id
    spec = scene_spec_for(scene_id, seed)
    scene = make_scene(scene_seed, spec)
    scene_dir = out_dir / f"scene_{scene_id:04d}"
    scene_dir.mkdir(parents=True, exist_ok=True)
    entries: List[FileEntry] = []
    record = SceneRecord(scene_id=scene_id, texture=spec.texture, primitives=spec.primitives, lighting=scene.lighting)
    _json_dump(scene_dir / "scene.json", record.model_dump(mode="json"))
    entries.append(_entry(out_dir, scene_dir / "scene.json"))
    for v, camera in enumerate(orbit_cameras(scene_seed, n_views)):
        view = render_view(scene, camera, scene.lighting, resolution=resolution)
        view.maps.validate()
        view_dir = scene_dir / f"view_{v:02d}"
        view_dir.mkdir(parents=True, exist_ok=True)
        write_rgb8(view_dir / "rgb.png", view.rgb)
        write_rgb8(view_dir / "albedo.png", view.maps.albedo)
        write_gray16(view_dir / "roughness.png", view.maps.roughness)
        write_gray16(view_dir / "metallic.png", view.maps.metallic)
        write_gray16(view_dir / "mask.png", view.maps.mask.astype(np.float64))
        _json_dump(view_dir / "camera.json", camera.model_dump(mode="json"))
        for name in VIEW_FILES + ("camera.json",):
            entries.append(_entry(out_dir, view_dir / name))
    return entries


def _entry(root: Path, path: Path) -> FileEntry:
    return FileEntry(path=path.relative_to(root).as_posix(), sha256=sha256_file(path))


# -----------------------------------------------------------------------------
# Loading
# -----------------------------------------------------------------------------
def read_manifest(root: Path) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise DatasetFormatError(f"no manifest.json under {root}")
    try:
        return DatasetManifest.model_validate_json(path.read_text())
    except (OSError, ValidationError) as exc:
        raise DatasetFormatError(f"cannot parse {path}: {exc}") from exc


def load_view(view_dir: Path) -> ViewRecord:
    try:
        mask = read_gray16(view_dir / "mask.png") > 0.5
        maps = MaterialMaps(
            albedo=read_rgb8(view_dir / "albedo.png"),
            roughness=read_gray16(view_dir / "roughness.png"),
            metallic=read_gray16(view_dir / "metallic.png"),
            mask=mask,
        )
        camera = CameraRecord.model_validate_json((view_dir / "camera.json").read_text())
        return ViewRecord(rgb=read_rgb8(view_dir / "rgb.png"), maps=maps, camera=camera)
    except (OSError, ValidationError) as exc:
        raise DatasetFormatError(f"cannot read view {view_dir}: {exc}") from exc


def load_scene(scene_dir: Path, n_views: int) -> MultiViewSample:
    """Reads ``scene.json`` and views ``view_00 .. view_{n_views-1}``."""
    try:
        record = SceneRecord.model_validate_json((scene_dir / "scene.json").read_text())
    except (OSError, ValidationError) as exc:
        raise DatasetFormatError(f"cannot read scene {scene_dir}: {exc}") from exc
    return MultiViewSample(
        scene_id=record.scene_id,
        texture=record.texture,
        views=[load_view(scene_dir / f"view_{v:02d}") for v in range(n_views)],
        lighting=record.lighting,
    ).validate()


def verify_manifest(root: Path, manifest: DatasetManifest) -> None:
    for entry in manifest.files:
        path = Path(root) / entry.path
        if not path.is_file() or sha256_file(path) != entry.sha256:
            raise DatasetFormatError(f"{entry.path}: missing or hash mismatch")


def scene_dirs(root: Path, manifest: DatasetManifest) -> List[Path]:
    """The scene directories the manifest names; leftovers of older runs are skipped."""
    named = [Path(root) / f"scene_{i:04d}" for i in range(manifest.scenes)]
    extra = sum(1 for p in Path(root).glob("scene_*") if p.is_dir()) - manifest.scenes
    if extra > 0:
        logger.warning("%s: ignoring %d scene directories not named by manifest.json", root, extra)
    return named


def load_dataset(root: Path, verify_hashes: bool = False) -> List[MultiViewSample]:
    root = Path(root)
    manifest = read_manifest(root)
    if verify_hashes:
        verify_manifest(root, manifest)
    return [load_scene(d, manifest.views) for d in scene_dirs(root, manifest)]


# -----------------------------------------------------------------------------
# Torch view of a dataset
# -----------------------------------------------------------------------------
def _chw(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1), dtype=np.float32))


def sample_tensors(sample: MultiViewSample, views: Optional[Sequence[int]] = None) -> dict:
    """Stack a scene's views as [V,C,H,W] tensors: rgb, albedo, rm (packed), mask."""
    chosen = [sample.views[i] for i in views] if views is not None else sample.views
    return {
        "rgb": torch.stack([_chw(v.rgb) for v in chosen]),
        "albedo": torch.stack([_chw(v.maps.albedo) for v in chosen]),
        "rm": torch.stack([_chw(pack_rm(v.maps).data) for v in chosen]),
        "mask": torch.stack([_chw(v.maps.mask).bool() for v in chosen]),
    }


class MaterialDataset(Dataset):
    """One item per scene; the first ``views`` views are used."""

    def __init__(self, samples: Sequence[MultiViewSample], views: int):
        if not samples:
            raise InvalidArgumentError("dataset is empty")
        available = min(len(s.views) for s in samples)
        if views > available:
            raise InvalidArgumentError(f"requested {views} views but scenes hold {available}")
        self.samples = list(samples)
        self.views = views

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> dict:
        return sample_tensors(self.samples[index], range(self.views))
