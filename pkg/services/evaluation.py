"""Metrics, seed-variance and timing harnesses, texture-bake diagnostic and
the ablation grid.

Images here are numpy HWC float arrays in [0,1]; masks are bool [H,W,1] or [H,W].
"""

from __future__ import annotations

import csv
import logging
import math
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from skimage.metrics import structural_similarity

from framework.errors import ContractError, InvalidArgumentError, RunIOError
from models.report import AblationRow, AlbedoMetrics, MSEMetric, PerMapMetrics, TimingRecord, VarianceSummary
from services.materials import MaterialMaps
from services.networks import ModelBundle
from services.pipeline import MaterialPrediction, PhaseTimer, infer_multistep_ddim, infer_onestep
from services.synthdata import MultiViewSample, sample_tensors
from utils.imageio import write_heat8, write_sivr

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_WINDOW = 11
TEXTURE_PERCENTILE = 90.0


def _mask2d(mask: Optional[np.ndarray], shape: Tuple[int, int]) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(mask, dtype=bool)
    return m[..., 0] if m.ndim == 3 else m


# -----------------------------------------------------------------------------
# Cropping
# -----------------------------------------------------------------------------
def crop_box(mask: np.ndarray, min_size: int = 1) -> Tuple[int, int, int, int]:
    """(row0, row1, col0, col1), half-open, of the true pixels; grown
    symmetrically (inside the image) to at least ``min_size`` per side."""
    m = _mask2d(mask, mask.shape[:2])
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if rows.size == 0:
        raise InvalidArgumentError("mask is empty")
    r0, r1 = _grow(int(rows[0]), int(rows[-1]) + 1, min_size, m.shape[0])
    c0, c1 = _grow(int(cols[0]), int(cols[-1]) + 1, min_size, m.shape[1])
    return r0, r1, c0, c1


def _grow(lo: int, hi: int, size: int, extent: int) -> Tuple[int, int]:
    size = min(size, extent)
    if hi - lo >= size:
        return lo, hi
    lo = max(0, min(lo - (size - (hi - lo)) // 2, extent - size))
    return lo, lo + size


def mask_crop(image: np.ndarray, mask: np.ndarray, min_size: int = 1) -> np.ndarray:
    r0, r1, c0, c1 = crop_box(mask, min_size)
    return image[r0:r1, c0:c1]


# -----------------------------------------------------------------------------
# Metrics
# -----------------------------------------------------------------------------
def si_psnr(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None, clip: bool = True) -> float:
    """PSNR after a per-channel least-squares scale k_c fitted over masked pixels."""
    if pred.shape != gt.shape:
        raise InvalidArgumentError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    m = _mask2d(mask, pred.shape[:2])
    if not m.any():
        raise InvalidArgumentError("mask is empty")
    p = pred.astype(np.float64)[m]
    g = gt.astype(np.float64)[m]
    if not np.any(g):
        raise InvalidArgumentError("ground truth is identically zero on the mask")
    denom = np.sum(p * p, axis=0)
    k = np.divide(np.sum(p * g, axis=0), denom, out=np.zeros_like(denom), where=denom > 0)
    scaled = p * k
    if clip:
        scaled = np.clip(scaled, 0.0, 1.0)
    mse = float(np.mean((scaled - g) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """11x11 Gaussian window (sigma 1.5), K1 0.01, K2 0.03, range 1.0; mean over
    valid windows and channels."""
    if pred.shape != gt.shape:
        raise InvalidArgumentError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if min(pred.shape[:2]) < SSIM_WINDOW:
        raise InvalidArgumentError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {pred.shape[:2]}")
    return float(structural_similarity(
        pred.astype(np.float64),
        gt.astype(np.float64),
        win_size=SSIM_WINDOW,
        gaussian_weights=True,
        sigma=1.5,
        use_sample_covariance=False,
        data_range=1.0,
        channel_axis=-1 if pred.ndim == 3 else None,
    ))


def masked_mse(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    m = _mask2d(mask, pred.shape[:2])
    if not m.any():
        raise InvalidArgumentError("mask is empty")
    return float(np.mean((pred.astype(np.float64)[m] - gt.astype(np.float64)[m]) ** 2))


def _gradient_magnitude(image: np.ndarray) -> np.ndarray:
    """|dx| + |dy| forward differences summed over channels, on the [H-1, W-1] valid grid."""
    img = image.astype(np.float64)
    if img.ndim == 2:
        img = img[..., None]
    dx = np.abs(img[:-1, 1:] - img[:-1, :-1])
    dy = np.abs(img[1:, :-1] - img[:-1, :-1])
    return (dx + dy).sum(axis=-1)


def _interior_pairs(mask: Optional[np.ndarray], shape: Tuple[int, int]) -> np.ndarray:
    """[H-1, W-1] grid of forward-difference anchors whose right and lower neighbours are also foreground."""
    m = _mask2d(mask, shape)
    return m[:-1, :-1] & m[:-1, 1:] & m[1:, :-1]


def texture_bake_score(
    pred_rm: np.ndarray,
    gt_rm: np.ndarray,
    gt_albedo: np.ndarray,
    mask: Optional[np.ndarray] = None,
) -> Tuple[float, bool]:
    """Mean |grad(pred_rm - gt_rm)| over pixels whose albedo gradient exceeds its
    90th percentile. Only difference pairs with both ends inside ``mask`` count,
    so silhouettes never read as texture. Returns (score, degenerate); albedo
    that is flat on the foreground gives (0, True)."""
    if pred_rm.shape != gt_rm.shape or pred_rm.shape[:2] != gt_albedo.shape[:2]:
        raise InvalidArgumentError("texture_bake_score inputs do not align")
    if min(gt_albedo.shape[:2]) < 2:
        return 0.0, True
    inside = _interior_pairs(mask, gt_albedo.shape[:2])
    if not inside.any():
        return 0.0, True
    albedo_grad = _gradient_magnitude(gt_albedo)[inside]
    if albedo_grad.max() <= 1e-8:
        return 0.0, True
    selected = albedo_grad > np.percentile(albedo_grad, TEXTURE_PERCENTILE)
    if not selected.any():
        return 0.0, True
    residual_grad = _gradient_magnitude(pred_rm.astype(np.float64) - gt_rm.astype(np.float64))[inside]
    return float(residual_grad[selected].mean()), False


# -----------------------------------------------------------------------------
# Per-view and aggregate evaluation
# -----------------------------------------------------------------------------
@dataclass
class ViewMetrics:
    scene_id: int
    view: int
    texture: str
    albedo_si_psnr: float
    albedo_ssim: float
    roughness_mse: float
    metallic_mse: float
    rm_texture_bake: float
    texture_degenerate: bool

    def rows(self) -> List[Dict[str, object]]:
        base = {"scene": self.scene_id, "view": self.view}
        items = [
            ("albedo", "si_psnr", self.albedo_si_psnr),
            ("albedo", "ssim", self.albedo_ssim),
            ("roughness", "mse", self.roughness_mse),
            ("metallic", "mse", self.metallic_mse),
        ]
        if not self.texture_degenerate:
            items.append(("rm", "texture_bake", self.rm_texture_bake))
        return [dict(base, map=m, metric=k, value=v) for m, k, v in items]


def evaluate_view(
    pred: MaterialMaps,
    gt: MaterialMaps,
    scene_id: int = 0,
    view: int = 0,
    texture: str = "",
    use_mask_crop: bool = True,
) -> ViewMetrics:
    """Predictions are masked by the ground-truth mask, then both are cropped to its box."""
    mask = gt.mask[..., 0]
    pa, pr, pm = (x * gt.mask for x in (pred.albedo, pred.roughness, pred.metallic))
    ga, gr, gm = gt.albedo, gt.roughness, gt.metallic
    if use_mask_crop:
        box = crop_box(mask, min_size=SSIM_WINDOW)
        cut = lambda a: a[box[0]:box[1], box[2]:box[3]]  # noqa: E731
        pa, pr, pm, ga, gr, gm, mask = map(cut, (pa, pr, pm, ga, gr, gm, mask))
    bake, degenerate = texture_bake_score(
        np.concatenate([pr, pm], axis=-1), np.concatenate([gr, gm], axis=-1), ga, mask
    )
    return ViewMetrics(
        scene_id=scene_id,
        view=view,
        texture=texture,
        albedo_si_psnr=si_psnr(pa, ga, mask),
        albedo_ssim=ssim(pa, ga),
        roughness_mse=masked_mse(pr, gr, mask),
        metallic_mse=masked_mse(pm, gm, mask),
        rm_texture_bake=bake,
        texture_degenerate=degenerate,
    )


@dataclass
class Aggregate:
    per_map: PerMapMetrics
    rm_texture_bake: Optional[float]
    rm_texture_bake_glyph: Optional[float]


def _mean_or_none(values: Sequence[float]) -> Optional[float]:
    return float(np.mean(values)) if len(values) else None


def aggregate(views: Sequence[ViewMetrics]) -> Aggregate:
    if not views:
        raise InvalidArgumentError("nothing to aggregate")
    textured = [v for v in views if not v.texture_degenerate]
    return Aggregate(
        per_map=PerMapMetrics(
            albedo=AlbedoMetrics(
                si_psnr=float(np.mean([v.albedo_si_psnr for v in views])),
                ssim=float(np.mean([v.albedo_ssim for v in views])),
            ),
            roughness=MSEMetric(mse=float(np.mean([v.roughness_mse for v in views]))),
            metallic=MSEMetric(mse=float(np.mean([v.metallic_mse for v in views]))),
        ),
        rm_texture_bake=_mean_or_none([v.rm_texture_bake for v in textured]),
        rm_texture_bake_glyph=_mean_or_none([v.rm_texture_bake for v in textured if v.texture == "glyph_grid"]),
    )


def write_metrics_csv(path: Path, views: Sequence[ViewMetrics]) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=("scene", "view", "map", "metric", "value"))
            writer.writeheader()
            for v in views:
                writer.writerows(v.rows())
    except OSError as exc:
        raise RunIOError(f"cannot write {path}: {exc}") from exc


def prediction_maps(pred: MaterialPrediction, masks: Sequence[np.ndarray]) -> List[MaterialMaps]:
    """Tensor predictions -> per-view MaterialMaps carrying the given masks."""
    hwc = lambda t: t.detach().to("cpu", torch.float32).permute(1, 2, 0).numpy()  # noqa: E731
    return [
        MaterialMaps(
            albedo=hwc(pred.albedo[i]),
            roughness=hwc(pred.roughness[i]),
            metallic=hwc(pred.metallic[i]),
            mask=np.asarray(masks[i], dtype=bool),
        )
        for i in range(pred.albedo.shape[0])
    ]


Predictor = Callable[[ModelBundle, torch.Tensor], MaterialPrediction]


def evaluate_samples(
    bundle: ModelBundle,
    samples: Sequence[MultiViewSample],
    predictor: Predictor,
    use_mask_crop: bool = True,
) -> List[ViewMetrics]:
    results = []
    for sample in samples:
        pred = predictor(bundle, sample_tensors(sample)["rgb"])
        maps = prediction_maps(pred, [v.maps.mask for v in sample.views])
        for i, (p, view) in enumerate(zip(maps, sample.views)):
            results.append(evaluate_view(p, view.maps, sample.scene_id, i, sample.texture, use_mask_crop))
    return results


# -----------------------------------------------------------------------------
# Seed variance
# -----------------------------------------------------------------------------
@dataclass
class VarianceResult:
    mean_map: np.ndarray  # [V,H,W,5]: albedo rgb, roughness, metallic
    std_map: np.ndarray
    per_pixel_std_mean: float
    albedo_std_mean: float
    roughness_std_mean: float
    metallic_std_mean: float

    def summary(self, std_map_path: Optional[str] = None, sampler: str = "onestep") -> VarianceSummary:
        return VarianceSummary(
            per_pixel_std_mean=self.per_pixel_std_mean,
            albedo_std_mean=self.albedo_std_mean,
            roughness_std_mean=self.roughness_std_mean,
            metallic_std_mean=self.metallic_std_mean,
            std_map_path=std_map_path,
            sampler=sampler,
        )


def seed_statistics(outputs: Sequence[np.ndarray], mask: Optional[np.ndarray] = None) -> VarianceResult:
    """Per-pixel mean and population std across seeds of [V,H,W,5] outputs."""
    if len(outputs) < 2:
        raise InvalidArgumentError("need outputs from at least 2 seeds")
    stack = np.stack([o.astype(np.float64) for o in outputs])
    mean, std = stack.mean(axis=0), stack.std(axis=0)
    m = np.ones(std.shape[:-1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(std.shape[:-1])
    if not m.any():
        raise InvalidArgumentError("mask is empty")
    masked = std[m]
    return VarianceResult(
        mean_map=mean,
        std_map=std,
        per_pixel_std_mean=float(masked.mean()),
        albedo_std_mean=float(masked[:, 0:3].mean()),
        roughness_std_mean=float(masked[:, 3].mean()),
        metallic_std_mean=float(masked[:, 4].mean()),
    )


def _stack_prediction(pred: MaterialPrediction) -> np.ndarray:
    both = torch.cat((pred.albedo, pred.roughness, pred.metallic), dim=1)
    return both.detach().to("cpu", torch.float64).permute(0, 2, 3, 1).numpy()


def variance_harness(
    bundle: ModelBundle,
    images: torch.Tensor,
    n_seeds: int,
    mask: Optional[np.ndarray] = None,
    deterministic: bool = False,
    sampler: str = "onestep",
    ddim_steps: int = 50,
    use_din: bool = False,
    seeds: Optional[Sequence[int]] = None,
) -> VarianceResult:
    """Runs sampled-noise inference for each seed (0..n_seeds-1 by default)."""
    if deterministic:
        raise ContractError("seed variance is undefined for deterministic (eps = 0) inference")
    seeds = sorted(seeds) if seeds is not None else list(range(n_seeds))
    if len(seeds) < 2:
        raise InvalidArgumentError("n_seeds must be >= 2")
    outputs = []
    for seed in seeds:
        if sampler == "onestep":
            pred = infer_onestep(bundle, images, deterministic=False, seed=seed, use_din=use_din)
        else:
            pred = infer_multistep_ddim(bundle, images, ddim_steps, seed=seed, use_din=use_din)
        outputs.append(_stack_prediction(pred))
    return seed_statistics(outputs, mask)


def write_variance_maps(result: VarianceResult, out_dir: Path) -> Path:
    """Per view: std_{v}.sivr (raw, channel-mean std) and std_{v}.png (heat image)."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        vmax = float(result.std_map.mean(axis=-1).max())
        for v, std in enumerate(result.std_map):
            plane = std.mean(axis=-1)
            write_sivr(out_dir / f"std_{v:02d}.sivr", plane)
            write_heat8(out_dir / f"std_{v:02d}.png", plane, vmax=vmax)
    except OSError as exc:
        raise RunIOError(f"cannot write variance maps to {out_dir}: {exc}") from exc
    return out_dir


# -----------------------------------------------------------------------------
# Timing
# -----------------------------------------------------------------------------
def timing_harness(
    bundle: ModelBundle,
    images: torch.Tensor,
    mode: str,
    steps: int = 50,
    warmup: int = 3,
    repeats: int = 5,
    use_din: bool = False,
    views: Optional[Sequence[int]] = None,
) -> TimingRecord:
    """Median wall-clock seconds of encode / denoise / decode over ``repeats``
    runs after ``warmup`` untimed runs."""
    if mode not in ("onestep", "ddim"):
        raise InvalidArgumentError(f"mode must be 'onestep' or 'ddim', got {mode!r}")
    if warmup < 3 or repeats < 5:
        raise InvalidArgumentError("timing needs >= 3 warmup runs and >= 5 measured runs")
    if views is not None:
        images = images[list(views)]

    def run(timer: Optional[PhaseTimer]) -> None:
        if mode == "onestep":
            infer_onestep(bundle, images, deterministic=True, use_din=use_din, timer=timer)
        else:
            infer_multistep_ddim(bundle, images, steps, seed=0, use_din=use_din, timer=timer)

    for _ in range(warmup):
        run(None)
    samples: Dict[str, List[float]] = {p: [] for p in PhaseTimer.PHASES}
    calls = []
    for _ in range(repeats):
        timer = PhaseTimer()
        before = bundle.denoiser.forward_calls
        run(timer)
        calls.append(bundle.denoiser.forward_calls - before)
        for phase, seconds in timer.seconds.items():
            samples[phase].append(seconds)
    medians = {p: statistics.median(s) for p, s in samples.items()}
    n_views = int(images.shape[0])
    return TimingRecord(
        mode="onestep" if mode == "onestep" else f"ddim_{steps}",
        setting="single_view" if n_views == 1 else "multi_view",
        n_views=n_views,
        encode_s=medians["encode"],
        denoise_s=medians["denoise"],
        decode_s=medians["decode"],
        total_s=medians["encode"] + medians["denoise"] + medians["decode"],
        denoiser_calls=calls[-1],
    )


# -----------------------------------------------------------------------------
# Ablation grid
# -----------------------------------------------------------------------------
ABLATION_ROWS: Tuple[Tuple[str, str], ...] = (
    ("a", "w/o Opt."),
    ("b", "w/o $L_{GM}$"),
    ("c", "Ours (w/o DIN)"),
    ("d", "Ours (w/ DIN)"),
)


def ablation_predictor(key: str) -> Predictor:
    if key == "a":
        return lambda bundle, images: infer_multistep_ddim(bundle, images, 1, seed=0)
    use_din = key == "d"
    return lambda bundle, images: infer_onestep(bundle, images, deterministic=True, use_din=use_din)


BundleLoader = Callable[[Path], ModelBundle]


def run_ablation_grid(
    samples: Sequence[MultiViewSample],
    checkpoints: Dict[str, Optional[Path]],
    load_bundle: BundleLoader,
) -> List[AblationRow]:
    """One row per configuration a..d; a missing checkpoint yields an absent row."""
    rows = []
    for key, label in ABLATION_ROWS:
        path = checkpoints.get(key)
        if path is None or not Path(path).is_file():
            logger.warning("ablation row %r: no checkpoint, reporting absent", label)
            rows.append(AblationRow(config=label, status="absent"))
            continue
        bundle = load_bundle(Path(path))
        agg = aggregate(evaluate_samples(bundle, samples, ablation_predictor(key)))
        rows.append(AblationRow(
            config=label,
            albedo_ssim=agg.per_map.albedo.ssim,
            albedo_psnr=agg.per_map.albedo.si_psnr,
            metallic_mse=agg.per_map.metallic.mse,
            roughness_mse=agg.per_map.roughness.mse,
            rm_texture_bake=agg.rm_texture_bake if agg.rm_texture_bake is not None else math.nan,
        ))
    return rows


def write_ablation_csv(path: Path, rows: Sequence[AblationRow]) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=AblationRow.csv_columns())
            writer.writeheader()
            for row in rows:
                writer.writerow(row.model_dump())
    except OSError as exc:
        raise RunIOError(f"cannot write {path}: {exc}") from exc
