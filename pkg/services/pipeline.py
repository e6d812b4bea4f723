"""Staged training recipe, checkpoint IO and inference paths.

Stages run in order autoencoder -> multistep -> onestep -> din; each
optimizes one module and verifies by content hash that every other module
stayed untouched.
"""

from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader
from tqdm import tqdm

from framework.errors import (
    CheckpointLoadError,
    ConfigurationError,
    IntegrityError,
    InvalidArgumentError,
    InvariantViolation,
    NumericError,
    RunIOError,
)
from framework.rundir import RunDirectory
from models.checkpoint import CheckpointManifest
from models.config import ModelConfig, ScheduleConfig, Stage, Task, TrainConfig, architecture_sha256
from services.materials import PackedRM, unpack_rm
from services.networks import ModelBundle
from services.objectives import LossBreakdown, total_loss
from services.schedule import add_noise, eps_from_v, one_step_predict, v_target, z0_from_v
from services.synthdata import MaterialDataset

logger = logging.getLogger(__name__)

TASKS = (Task.ALBEDO, Task.RM)
RM_CHANNEL2_TOLERANCE = 0.05

# module each stage optimizes
STAGE_TRAINABLE = {
    Stage.AUTOENCODER_PRETRAIN: ("autoencoder",),
    Stage.MULTISTEP_PRETRAIN: ("denoiser",),
    Stage.ONESTEP_FINETUNE: ("denoiser",),
    Stage.DIN_TRAIN: ("din",),
}


@dataclass
class StageResult:
    stage: Stage
    steps: int
    losses: List[float] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


# -----------------------------------------------------------------------------
# Checkpoints
# -----------------------------------------------------------------------------
@dataclass
class LoadedCheckpoint:
    bundle: ModelBundle
    manifest: CheckpointManifest
    optimizer_state: Optional[dict] = None


def sidecar_path(path: Path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(
    path: Path,
    bundle: ModelBundle,
    stage: Stage,
    step: int,
    optimizer_state: Optional[dict] = None,
) -> CheckpointManifest:
    """Write the full bundle to ``path`` and its manifest to the .json sidecar."""
    path = Path(path)
    manifest = CheckpointManifest(
        module=stage,
        step=step,
        config_sha256=architecture_sha256(bundle.model_config, bundle.schedule_config),
    )
    payload = {
        "bundle": bundle.state_dict(),
        "model": bundle.model_config.model_dump(mode="json"),
        "schedule": bundle.schedule_config.model_dump(mode="json"),
        "optimizer": optimizer_state,
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
        sidecar_path(path).write_text(manifest.model_dump_json(by_alias=True, indent=2) + "\n")
    except OSError as exc:
        raise RunIOError(f"cannot write checkpoint {path}: {exc}") from exc
    logger.info("checkpoint %s (stage %s, step %d)", path, stage.value, step)
    return manifest


def read_checkpoint_manifest(path: Path) -> CheckpointManifest:
    sidecar = sidecar_path(path)
    try:
        return CheckpointManifest.model_validate_json(sidecar.read_text())
    except OSError as exc:
        raise CheckpointLoadError(f"missing checkpoint sidecar {sidecar}: {exc}") from exc
    except ValueError as exc:
        raise CheckpointLoadError(f"unreadable checkpoint sidecar {sidecar}: {exc}") from exc


def load_checkpoint(path: Path, expected_sha256: Optional[str] = None, device: str = "cpu") -> LoadedCheckpoint:
    """Rebuild the bundle a checkpoint describes; the embedded configs must hash
    to the sidecar's config_sha256 (and to ``expected_sha256`` when given)."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointLoadError(f"checkpoint {path} does not exist")
    manifest = read_checkpoint_manifest(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        model_config = ModelConfig.model_validate(payload["model"])
        schedule_config = ScheduleConfig.model_validate(payload["schedule"])
    except (OSError, RuntimeError, KeyError, ValueError) as exc:
        raise CheckpointLoadError(f"cannot read checkpoint {path}: {exc}") from exc
    actual = architecture_sha256(model_config, schedule_config)
    if actual != manifest.config_sha256:
        raise IntegrityError(f"{path}: payload config hash {actual[:12]} != sidecar {manifest.config_sha256[:12]}")
    if expected_sha256 is not None and expected_sha256 != manifest.config_sha256:
        raise IntegrityError(
            f"{path}: checkpoint config hash {manifest.config_sha256[:12]} != run config {expected_sha256[:12]}"
        )
    bundle = ModelBundle.build(model_config, schedule_config)
    try:
        bundle.load_state_dict(payload["bundle"])
    except (KeyError, RuntimeError) as exc:
        raise CheckpointLoadError(f"{path}: parameters do not fit the architecture: {exc}") from exc
    return LoadedCheckpoint(bundle=bundle.to(device), manifest=manifest, optimizer_state=payload.get("optimizer"))


# -----------------------------------------------------------------------------
# Training loop
# -----------------------------------------------------------------------------
def set_learning_rate(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def prepare_stage(bundle: ModelBundle, stage: Stage) -> None:
    """Freeze everything except the module ``stage`` optimizes."""
    bundle.set_trainable(*STAGE_TRAINABLE[stage])


def _batches(dataset: MaterialDataset, cfg: TrainConfig, generator: torch.Generator) -> Iterator[dict]:
    loader = DataLoader(
        dataset,
        batch_size=min(cfg.batch_scenes, len(dataset)),
        shuffle=True,
        generator=generator,
        num_workers=cfg.num_workers,
        drop_last=False,
    )
    while True:
        yield from loader


def _randn(shape: Sequence[int], generator: torch.Generator, like: torch.Tensor) -> torch.Tensor:
    # drawn on CPU so a seed means the same noise on every device
    return torch.randn(tuple(shape), generator=generator).to(device=like.device, dtype=like.dtype)


StepFn = Callable[[dict, torch.Generator], Dict[str, torch.Tensor]]


def _train_loop(
    stage: Stage,
    cfg: TrainConfig,
    bundle: ModelBundle,
    dataset: MaterialDataset,
    step_fn: StepFn,
    run_dir: Optional[RunDirectory],
    start_step: int = 0,
    optimizer_state: Optional[dict] = None,
) -> StageResult:
    if len(dataset) == 0:
        raise InvalidArgumentError("dataset is empty")
    trainable = STAGE_TRAINABLE[stage]
    modules = bundle.modules()
    params = [p for name in trainable for p in modules[name].parameters()]
    frozen_before = {name: h for name, h in bundle.parameter_hashes().items() if name not in trainable}
    for name in frozen_before:
        if not bundle.is_frozen(name):
            raise ConfigurationError(f"{name} must be frozen during {stage.value}")

    optimizer = torch.optim.AdamW(params, lr=cfg.lr_at(start_step), betas=cfg.betas, weight_decay=cfg.weight_decay)
    if optimizer_state:
        optimizer.load_state_dict(optimizer_state)
    generator = torch.Generator().manual_seed(cfg.seed)
    batches = _batches(dataset, cfg, generator)
    device = bundle.device
    for name, module in modules.items():
        module.train(name in trainable)

    result = StageResult(stage=stage, steps=cfg.steps)
    logger.info("stage %s: steps %d..%d, %d scenes, %d views", stage.value, start_step, cfg.steps, len(dataset), dataset.views)
    for step in tqdm(range(start_step, cfg.steps), desc=stage.value, leave=False):
        lr = cfg.lr_at(step)
        set_learning_rate(optimizer, lr)
        batch = {k: v.to(device) for k, v in next(batches).items()}
        optimizer.zero_grad(set_to_none=True)
        terms = step_fn(batch, generator)
        loss = terms["loss"]
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss at step {step}", component=stage.value)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        optimizer.step()

        row: Dict[str, object] = {k: float(v.detach()) for k, v in terms.items()}
        row.update(step=step + 1, stage=stage.value, lr=lr)
        result.losses.append(row["loss"])
        done = step + 1
        if run_dir is not None and (done % cfg.checkpoint_every == 0 or done == cfg.steps):
            path = run_dir.checkpoint_path(stage, done)
            save_checkpoint(path, bundle, stage, done, optimizer.state_dict())
            result.checkpoints.append(path)
            row["checkpoint"] = path.relative_to(run_dir.path).as_posix()
        if run_dir is not None:
            run_dir.append_metrics(row)

    for name, before in frozen_before.items():
        if bundle.parameter_hashes()[name] != before:
            raise InvariantViolation(f"{name} parameters changed during {stage.value}")
    bundle.eval()
    logger.info("stage %s finished, final loss %.6f", stage.value, result.final_loss)
    return result


# -----------------------------------------------------------------------------
# Stages
# -----------------------------------------------------------------------------
def _encode_batch(bundle: ModelBundle, batch: dict) -> Tuple[torch.Tensor, torch.Tensor]:
    """(z_c [B,V,C,h,w], z0 [B,K,V,C,h,w]) from posterior means."""
    with torch.no_grad():
        z_c = bundle.autoencoder.encode(batch["rgb"])
        z0 = bundle.autoencoder.encode(torch.stack((batch["albedo"], batch["rm"]), dim=1))
    return z_c, z0


def _task_tensor(device: torch.device) -> torch.Tensor:
    return torch.as_tensor([t.index for t in TASKS], device=device)


def _pair_condition(z_c: torch.Tensor, k: int) -> torch.Tensor:
    return z_c.unsqueeze(1).expand(-1, k, *z_c.shape[1:])


def stage_autoencoder_pretrain(
    config: TrainConfig,
    dataset: MaterialDataset,
    bundle: ModelBundle,
    run_dir: Optional[RunDirectory] = None,
    start_step: int = 0,
    optimizer_state: Optional[dict] = None,
) -> StageResult:
    """Reconstruction (+ small KL) on RGB, albedo and packed RM images; then
    sets latent_scale to 1/std of the training latents."""
    ae = bundle.autoencoder
    with torch.no_grad():
        ae.latent_scale.fill_(1.0)

    def step(batch: dict, generator: torch.Generator) -> Dict[str, torch.Tensor]:
        images = torch.stack((batch["rgb"], batch["albedo"], batch["rm"]), dim=1)
        mean, logvar = ae.moments(images)
        z = mean + torch.exp(0.5 * logvar) * _randn(mean.shape, generator, mean)
        rec = F.mse_loss(ae.decode(z), images)
        kl = -0.5 * torch.mean(1.0 + logvar - mean.pow(2) - logvar.exp())
        return {"loss": rec + config.kl_weight * kl, "rec": rec, "kl": kl}

    result = _train_loop(Stage.AUTOENCODER_PRETRAIN, config, bundle, dataset, step, run_dir, start_step, optimizer_state)
    scale = calibrate_latent_scale(bundle, dataset)
    logger.info("latent_scale set to %.5f", scale)
    if run_dir is not None and result.checkpoints:
        # the final checkpoint must carry the calibrated scale
        save_checkpoint(result.checkpoints[-1], bundle, Stage.AUTOENCODER_PRETRAIN, config.steps)
    return result


def calibrate_latent_scale(bundle: ModelBundle, dataset: MaterialDataset) -> float:
    ae = bundle.autoencoder
    device = bundle.device
    latents = []
    with torch.no_grad():
        ae.latent_scale.fill_(1.0)
        for i in range(len(dataset)):
            item = dataset[i]
            images = torch.cat((item["rgb"], item["albedo"], item["rm"])).to(device)
            latents.append(ae.encode(images).flatten())
        std = float(torch.cat(latents).std())
        scale = 1.0 / std if std > 1e-8 else 1.0
        ae.latent_scale.fill_(scale)
    return scale


def stage_multistep_pretrain(
    config: TrainConfig,
    dataset: MaterialDataset,
    bundle: ModelBundle,
    run_dir: Optional[RunDirectory] = None,
    start_step: int = 0,
    optimizer_state: Optional[dict] = None,
) -> StageResult:
    """v-prediction MSE at t ~ U{0..T}, one t per scene shared by its views and tasks."""
    schedule, denoiser = bundle.schedule, bundle.denoiser

    def step(batch: dict, generator: torch.Generator) -> Dict[str, torch.Tensor]:
        z_c, z0 = _encode_batch(bundle, batch)
        b, k = z0.shape[:2]
        t = torch.randint(0, schedule.T + 1, (b,), generator=generator).to(z0.device)
        eps = _randn(z0.shape, generator, z0)
        z_t = add_noise(z0, eps, t, schedule)
        target = v_target(z0, eps, t, schedule)
        v_hat = denoiser(torch.cat((z_t, _pair_condition(z_c, k)), dim=3), t, _task_tensor(z0.device))
        return {"loss": F.mse_loss(v_hat, target)}

    return _train_loop(Stage.MULTISTEP_PRETRAIN, config, bundle, dataset, step, run_dir, start_step, optimizer_state)


def onestep_losses(
    bundle: ModelBundle,
    batch: dict,
    eps: torch.Tensor,
    config: TrainConfig,
    use_din: bool = False,
) -> LossBreakdown:
    """Pixel-space objective of the t = T prediction for one batch and noise draw."""
    with torch.no_grad():
        z_c = bundle.autoencoder.encode(batch["rgb"])
    b = z_c.shape[0]
    t = torch.full((b,), bundle.schedule.T, dtype=torch.long, device=z_c.device)
    with torch.set_grad_enabled(torch.is_grad_enabled() and not bundle.is_frozen("denoiser")):
        v_hat = bundle.denoiser(torch.cat((eps, _pair_condition(z_c, len(TASKS))), dim=3), t, _task_tensor(z_c.device))
    z0_hat = -v_hat
    if use_din:
        pred_albedo = bundle.decode_with_din(z0_hat[:, 0], batch["rgb"])
        pred_rm = bundle.decode_with_din(z0_hat[:, 1], batch["rgb"])
    else:
        pred_albedo = bundle.autoencoder.decode(z0_hat[:, 0])
        pred_rm = bundle.autoencoder.decode(z0_hat[:, 1])
    mask = batch["mask"] if config.masked_loss else None
    return total_loss(pred_albedo, batch["albedo"], pred_rm, batch["rm"], mask=mask, use_gm=config.use_gm_loss)


def _onestep_step(bundle: ModelBundle, config: TrainConfig, use_din: bool) -> StepFn:
    def step(batch: dict, generator: torch.Generator) -> Dict[str, torch.Tensor]:
        rgb = batch["rgb"]
        b, v = rgb.shape[:2]
        h, w = rgb.shape[-2] // 8, rgb.shape[-1] // 8
        eps = _randn((b, len(TASKS), v, bundle.model_config.latent_channels, h, w), generator, rgb)
        terms = onestep_losses(bundle, batch, eps, config, use_din=use_din)
        return {"loss": terms.total, "mse_albedo": terms.mse_albedo, "mse_rm": terms.mse_rm, "gm_rm": terms.gm_rm}

    return step


def stage_onestep_finetune(
    config: TrainConfig,
    dataset: MaterialDataset,
    bundle: ModelBundle,
    run_dir: Optional[RunDirectory] = None,
    start_step: int = 0,
    optimizer_state: Optional[dict] = None,
) -> StageResult:
    """Denoiser at t = T only, decoded through the frozen decoder, pixel losses."""
    return _train_loop(
        Stage.ONESTEP_FINETUNE, config, bundle, dataset,
        _onestep_step(bundle, config, use_din=False), run_dir, start_step, optimizer_state,
    )


def stage_din_train(
    config: TrainConfig,
    dataset: MaterialDataset,
    bundle: ModelBundle,
    run_dir: Optional[RunDirectory] = None,
    start_step: int = 0,
    optimizer_state: Optional[dict] = None,
) -> StageResult:
    """Only the DIN learns; the objective is the one-step loss on decode_with_din outputs."""
    return _train_loop(
        Stage.DIN_TRAIN, config, bundle, dataset,
        _onestep_step(bundle, config, use_din=True), run_dir, start_step, optimizer_state,
    )


STAGE_FUNCTIONS = {
    Stage.AUTOENCODER_PRETRAIN: stage_autoencoder_pretrain,
    Stage.MULTISTEP_PRETRAIN: stage_multistep_pretrain,
    Stage.ONESTEP_FINETUNE: stage_onestep_finetune,
    Stage.DIN_TRAIN: stage_din_train,
}


def run_stage(
    config: TrainConfig,
    dataset: MaterialDataset,
    bundle: ModelBundle,
    run_dir: Optional[RunDirectory] = None,
    start_step: int = 0,
    optimizer_state: Optional[dict] = None,
) -> StageResult:
    prepare_stage(bundle, config.stage)
    return STAGE_FUNCTIONS[config.stage](config, dataset, bundle, run_dir, start_step, optimizer_state)


# -----------------------------------------------------------------------------
# Inference
# -----------------------------------------------------------------------------
class PhaseTimer:
    """Accumulates wall-clock seconds per inference phase."""

    PHASES = ("encode", "denoise", "decode")

    def __init__(self) -> None:
        self.seconds = {p: 0.0 for p in self.PHASES}

    @contextmanager
    def phase(self, name: str) -> Iterator[None]:
        _synchronize()
        start = time.perf_counter()
        try:
            yield
        finally:
            _synchronize()
            self.seconds[name] += time.perf_counter() - start


def _synchronize() -> None:
    if torch.cuda.is_available():
        torch.cuda.synchronize()


@contextmanager
def _maybe_phase(timer: Optional[PhaseTimer], name: str) -> Iterator[None]:
    if timer is None:
        yield
    else:
        with timer.phase(name):
            yield


@dataclass
class MaterialPrediction:
    """Per-view predictions, [V,C,H,W] in [0,1]."""
    albedo: torch.Tensor
    rm: torch.Tensor

    @property
    def roughness(self) -> torch.Tensor:
        return self.rm[:, 0:1]

    @property
    def metallic(self) -> torch.Tensor:
        return self.rm[:, 1:2]


def _check_images(images: torch.Tensor) -> None:
    if images.ndim != 4 or images.shape[1] != 3:
        raise InvalidArgumentError(f"images must be [V,3,H,W], got {tuple(images.shape)}")


def initial_noise(bundle: ModelBundle, images: torch.Tensor, seed: int) -> torch.Tensor:
    """Seeded Gaussian [K,V,C,h,w] shared by the one-step and DDIM paths."""
    v, _, h, w = images.shape
    generator = torch.Generator().manual_seed(seed)
    shape = (len(TASKS), v, bundle.model_config.latent_channels, h // 8, w // 8)
    return _randn(shape, generator, images)


def _finish(
    bundle: ModelBundle,
    z0: torch.Tensor,
    images: torch.Tensor,
    use_din: bool,
    timer: Optional[PhaseTimer],
) -> MaterialPrediction:
    with _maybe_phase(timer, "decode"):
        out = bundle.decode_with_din(z0, images) if use_din else bundle.autoencoder.decode(z0)
        out = out.clamp(0.0, 1.0)
    albedo = out[0]
    packed = PackedRM(out[1].permute(0, 2, 3, 1).cpu().numpy())
    roughness, metallic = unpack_rm(packed, tolerance=RM_CHANNEL2_TOLERANCE, strict=False)
    rm = torch.from_numpy(np.concatenate([roughness, metallic, np.zeros_like(roughness)], axis=-1))
    return MaterialPrediction(albedo=albedo, rm=rm.permute(0, 3, 1, 2).to(out.device))


@torch.no_grad()
def infer_onestep(
    bundle: ModelBundle,
    images: torch.Tensor,
    deterministic: bool = True,
    seed: int = 0,
    use_din: bool = False,
    timer: Optional[PhaseTimer] = None,
) -> MaterialPrediction:
    """z_c = E(images); eps = 0 (deterministic) or seeded noise; one denoiser
    pass for both tasks; decode (with DIN when asked)."""
    _check_images(images)
    images = images.to(bundle.device)
    with _maybe_phase(timer, "encode"):
        z_c = bundle.autoencoder.encode(images)
    eps = torch.zeros((len(TASKS),) + tuple(z_c.shape), device=z_c.device, dtype=z_c.dtype) if deterministic \
        else initial_noise(bundle, images, seed)
    with _maybe_phase(timer, "denoise"):
        z0 = one_step_predict(eps, z_c, bundle.denoiser, TASKS)
    return _finish(bundle, z0, images, use_din, timer)


def ddim_timesteps(T: int, n_steps: int) -> List[int]:
    """Uniform decreasing ladder T = t_0 > ... > t_n = 0."""
    if n_steps < 1 or n_steps > T:
        raise InvalidArgumentError(f"n_steps must be in [1, {T}], got {n_steps}")
    return [int(t) for t in torch.linspace(T, 0, n_steps + 1, dtype=torch.float64).round().long()]


@torch.no_grad()
def infer_multistep_ddim(
    bundle: ModelBundle,
    images: torch.Tensor,
    n_steps: int,
    seed: int = 0,
    use_din: bool = False,
    timer: Optional[PhaseTimer] = None,
) -> MaterialPrediction:
    """Deterministic DDIM (eta = 0) with v-prediction, starting from seeded noise at t = T."""
    _check_images(images)
    schedule = bundle.schedule
    ladder = ddim_timesteps(schedule.T, n_steps)
    images = images.to(bundle.device)
    with _maybe_phase(timer, "encode"):
        z_c = bundle.autoencoder.encode(images)
    z = initial_noise(bundle, images, seed)
    x0 = z
    with _maybe_phase(timer, "denoise"):
        for t, t_prev in zip(ladder[:-1], ladder[1:]):
            v = bundle.denoiser.predict_v(z, z_c, t, TASKS)
            x0 = z0_from_v(z, v, t, schedule)
            eps = eps_from_v(z, v, t, schedule)
            a_prev, b_prev = schedule.coefficients(t_prev, z)
            z = a_prev * x0 + b_prev * eps
    return _finish(bundle, x0, images, use_din, timer)
