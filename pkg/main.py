from __future__ import annotations

import functools
import sys
from pathlib import Path
from typing import Callable, List, Optional

import click
import numpy as np
import torch

from framework.errors import (
    ConfigurationError,
    DatasetFormatError,
    RunIOError,
    ServiceError,
    StageOrderError,
)
from framework.rundir import RunDirectory
from models.config import STAGE_ALIASES, STAGE_PREREQUISITE, RunConfig, Stage, load_run_config, resolve_device
from models.report import EvalMeta, EvalReport, PredictionRecord
from services.evaluation import (
    aggregate,
    evaluate_view,
    run_ablation_grid,
    timing_harness,
    variance_harness,
    write_ablation_csv,
    write_metrics_csv,
    write_variance_maps,
)
from services.materials import MaterialMaps
from services.networks import ModelBundle
from services.pipeline import LoadedCheckpoint, infer_onestep, load_checkpoint, run_stage
from services.synthdata import MaterialDataset, generate_dataset, load_dataset, read_manifest, sample_tensors
from utils.hashing import sha256_file
from utils.imageio import read_gray16, read_rgb8, write_gray16, write_rgb8
from utils.logging import configure_logging, detach_file_handlers

DEFAULT_CONFIG = Path(__file__).resolve().parent / "resources" / "default_config.json"


def handles_errors(fn: Callable) -> Callable:
    """ServiceError -> `error: <detail>` on stderr and its exit code."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ServiceError as exc:
            click.echo(f"error: {exc.detail}", err=True)
            sys.exit(exc.exit_code)

    return wrapper


def read_run_config(path: Optional[Path]) -> RunConfig:
    path = path or DEFAULT_CONFIG
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return load_run_config(text)


def write_report(out_dir: Path, report: EvalReport) -> Path:
    path = Path(out_dir) / "eval_report.json"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report.model_dump_json(indent=2) + "\n")
    except OSError as exc:
        raise RunIOError(f"cannot write {path}: {exc}") from exc
    return path


@click.group()
@click.option("--log-level", default="INFO", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
def cli(log_level: str) -> None:
    """One-step diffusion material estimation: data, training, inference, evaluation."""
    configure_logging(log_level.upper())


# -----------------------------------------------------------------------------
# Dataset
# -----------------------------------------------------------------------------
@cli.command("gen-data")
@click.option("--scenes", type=int, default=16, show_default=True)
@click.option("--views", type=int, default=4, show_default=True)
@click.option("--res", type=int, default=64, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@handles_errors
def gen_data(scenes: int, views: int, res: int, seed: int, out: Path) -> None:
    """Render a procedural multi-view dataset."""
    generate_dataset(scenes, views, res, seed, out)
    manifest_path = out / "manifest.json"
    click.echo(f"{manifest_path} sha256={sha256_file(manifest_path)}")


# -----------------------------------------------------------------------------
# Training
# -----------------------------------------------------------------------------
def _starting_point(
    stage: Stage,
    run_config: RunConfig,
    run_dir: RunDirectory,
    resume: Optional[Path],
    device: str,
) -> tuple[ModelBundle, int, Optional[dict]]:
    """(bundle, start_step, optimizer_state) for ``stage``; enforces stage order."""
    expected = run_config.architecture_sha256()
    prerequisite = STAGE_PREREQUISITE[stage]
    if resume is not None:
        loaded = load_checkpoint(resume, expected, device)
        if loaded.manifest.module is stage:
            return loaded.bundle, loaded.manifest.step, loaded.optimizer_state
        if prerequisite is None or loaded.manifest.module is not prerequisite:
            raise StageOrderError(
                f"cannot start {stage.value} from a {loaded.manifest.module.value} checkpoint"
                + (f"; it needs {prerequisite.value}" if prerequisite else "")
            )
        return loaded.bundle, 0, None
    if prerequisite is None:
        torch.manual_seed(run_config.train.seed)
        return ModelBundle.build(run_config.model, run_config.schedule).to(device), 0, None
    found = run_dir.latest_checkpoint(prerequisite)
    if found is None and stage is Stage.ONESTEP_FINETUNE and run_config.train.from_scratch:
        found = run_dir.latest_checkpoint(Stage.AUTOENCODER_PRETRAIN)
        if found is None:
            raise StageOrderError("--from-scratch still needs an autoencoder_pretrain checkpoint")
    if found is None:
        raise StageOrderError(
            f"{stage.value} needs a {prerequisite.value} checkpoint in {run_dir.checkpoints_dir}"
            " (train that stage first, or pass --resume"
            + (" / --from-scratch)" if stage is Stage.ONESTEP_FINETUNE else ")")
        )
    return load_checkpoint(found, expected, device).bundle, 0, None


@cli.command()
@click.option("--stage", type=click.Choice(list(STAGE_ALIASES)), required=True)
@click.option("--config", "config_path", type=click.Path(path_type=Path), default=None,
              help="Run config JSON; defaults to resources/default_config.json.")
@click.option("--data", type=click.Path(path_type=Path), required=True)
@click.option("--run-dir", type=click.Path(path_type=Path), required=True)
@click.option("--resume", type=click.Path(path_type=Path), default=None, help="Checkpoint to continue from.")
@click.option("--from-scratch", is_flag=True, help="Fine-tune one-step without a multistep checkpoint.")
@click.option("--no-gm-loss", is_flag=True, help="Drop the gradient-matching term.")
@handles_errors
def train(stage: str, config_path: Optional[Path], data: Path, run_dir: Path,
          resume: Optional[Path], from_scratch: bool, no_gm_loss: bool) -> None:
    """Run one training stage."""
    base = read_run_config(config_path)
    train_cfg = base.train.model_copy(update={
        "stage": STAGE_ALIASES[stage],
        "from_scratch": base.train.from_scratch or from_scratch,
        "use_gm_loss": base.train.use_gm_loss and not no_gm_loss,
    })
    run_config = base.model_copy(update={"train": train_cfg})
    device = resolve_device(run_config.device)
    if run_config.deterministic_algorithms:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    rd = RunDirectory(run_dir)
    bundle, start_step, optimizer_state = _starting_point(train_cfg.stage, run_config, rd, resume, device)

    manifest = read_manifest(data)
    if manifest.resolution != train_cfg.resolution:
        raise ConfigurationError(f"dataset resolution {manifest.resolution} != config resolution {train_cfg.resolution}")
    try:
        with rd.lock():
            rd.create(run_config)
            configure_logging(level=None, log_file=rd.log_path)
            dataset = MaterialDataset(load_dataset(data), views=train_cfg.views)
            result = run_stage(train_cfg, dataset, bundle, rd, start_step, optimizer_state)
    finally:
        detach_file_handlers()
    last = result.checkpoints[-1] if result.checkpoints else rd.latest_checkpoint(train_cfg.stage)
    click.echo(f"{train_cfg.stage.value}: final loss {result.final_loss:.6f}, checkpoint {last}")


# -----------------------------------------------------------------------------
# Inference
# -----------------------------------------------------------------------------
def _load(ckpt: Path) -> LoadedCheckpoint:
    loaded = load_checkpoint(ckpt, device=resolve_device("auto"))
    loaded.bundle.eval()
    return loaded


@cli.command()
@click.option("--ckpt", type=click.Path(path_type=Path), required=True)
@click.option("--input", "input_dir", type=click.Path(path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--deterministic", is_flag=True, help="eps = 0 instead of seeded noise.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--no-din", is_flag=True, help="Skip the detail injection network.")
@handles_errors
def infer(ckpt: Path, input_dir: Path, out: Path, deterministic: bool, seed: int, no_din: bool) -> None:
    """Predict albedo / roughness / metallic maps for every view of a dataset."""
    loaded = _load(ckpt)
    use_din = loaded.manifest.module is Stage.DIN_TRAIN and not no_din
    samples = load_dataset(input_dir)
    try:
        for sample in samples:
            pred = infer_onestep(loaded.bundle, sample_tensors(sample)["rgb"], deterministic, seed, use_din)
            for v in range(pred.albedo.shape[0]):
                view_dir = out / f"scene_{sample.scene_id:04d}" / f"view_{v:02d}"
                view_dir.mkdir(parents=True, exist_ok=True)
                write_rgb8(view_dir / "albedo.png", pred.albedo[v].permute(1, 2, 0).cpu().numpy())
                write_gray16(view_dir / "roughness.png", pred.roughness[v, 0].cpu().numpy())
                write_gray16(view_dir / "metallic.png", pred.metallic[v, 0].cpu().numpy())
        record = PredictionRecord(
            checkpoint=str(ckpt), module=loaded.manifest.module.value, step=loaded.manifest.step,
            deterministic=deterministic, seed=seed, use_din=use_din,
        )
        (out / "prediction.json").write_text(record.model_dump_json(indent=2) + "\n")
    except OSError as exc:
        raise RunIOError(f"cannot write predictions to {out}: {exc}") from exc
    click.echo(f"{len(samples)} scenes -> {out}")


# -----------------------------------------------------------------------------
# Evaluation
# -----------------------------------------------------------------------------
def _read_prediction(view_dir: Path, mask: np.ndarray) -> MaterialMaps:
    try:
        return MaterialMaps(
            albedo=read_rgb8(view_dir / "albedo.png"),
            roughness=read_gray16(view_dir / "roughness.png"),
            metallic=read_gray16(view_dir / "metallic.png"),
            mask=mask,
        )
    except OSError as exc:
        raise DatasetFormatError(f"missing prediction under {view_dir}: {exc}") from exc


@cli.command("eval")
@click.option("--pred", type=click.Path(path_type=Path), required=True)
@click.option("--gt", type=click.Path(path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--no-mask-crop", is_flag=True)
@handles_errors
def evaluate(pred: Path, gt: Path, out: Path, no_mask_crop: bool) -> None:
    """Score predicted maps against a ground-truth dataset."""
    manifest = read_manifest(gt)
    views = []
    for sample in load_dataset(gt):
        for v, view in enumerate(sample.views):
            view_dir = pred / f"scene_{sample.scene_id:04d}" / f"view_{v:02d}"
            maps = _read_prediction(view_dir, view.maps.mask)
            views.append(evaluate_view(maps, view.maps, sample.scene_id, v, sample.texture, not no_mask_crop))
    agg = aggregate(views)
    checkpoint = None
    record_path = pred / "prediction.json"
    if record_path.is_file():
        checkpoint = PredictionRecord.model_validate_json(record_path.read_text()).checkpoint
    report = EvalReport(
        per_map=agg.per_map,
        rm_texture_bake=agg.rm_texture_bake,
        rm_texture_bake_glyph=agg.rm_texture_bake_glyph,
        meta=EvalMeta(resolution=manifest.resolution, n_views=manifest.views, checkpoint=checkpoint,
                      mask_crop=not no_mask_crop),
    )
    report_path = write_report(out, report)
    write_metrics_csv(out / "metrics.csv", views)
    click.echo(report_path)


@cli.command()
@click.option("--ckpt", type=click.Path(path_type=Path), required=True)
@click.option("--input", "input_dir", type=click.Path(path_type=Path), required=True)
@click.option("--seeds", type=click.IntRange(min=2), default=8, show_default=True)
@click.option("--mode", type=click.Choice(["onestep", "ddim"]), default="onestep", show_default=True)
@click.option("--steps", type=int, default=50, show_default=True, help="DDIM steps when --mode ddim.")
@click.option("--out", type=click.Path(path_type=Path), required=True)
@handles_errors
def variance(ckpt: Path, input_dir: Path, seeds: int, mode: str, steps: int, out: Path) -> None:
    """Per-pixel std of predictions across noise seeds."""
    loaded = _load(ckpt)
    manifest = read_manifest(input_dir)
    results = []
    for sample in load_dataset(input_dir):
        masks = np.stack([v.maps.mask for v in sample.views])
        result = variance_harness(loaded.bundle, sample_tensors(sample)["rgb"], seeds, mask=masks,
                                  sampler=mode, ddim_steps=steps)
        write_variance_maps(result, out / "std_maps" / f"scene_{sample.scene_id:04d}")
        results.append(result)
    sampler = "onestep" if mode == "onestep" else f"ddim_{steps}"
    summary = results[0].summary(str(out / "std_maps"), sampler).model_copy(update={
        name: float(np.mean([getattr(r, name) for r in results]))
        for name in ("per_pixel_std_mean", "albedo_std_mean", "roughness_std_mean", "metallic_std_mean")
    })
    report = EvalReport(
        variance=summary,
        meta=EvalMeta(resolution=manifest.resolution, n_views=manifest.views, n_seeds=seeds, checkpoint=str(ckpt)),
    )
    click.echo(f"per_pixel_std_mean={summary.per_pixel_std_mean:.6f} -> {write_report(out, report)}")


@cli.command()
@click.option("--ckpt", type=click.Path(path_type=Path), required=True)
@click.option("--input", "input_dir", type=click.Path(path_type=Path), required=True)
@click.option("--mode", type=click.Choice(["onestep", "ddim"]), required=True)
@click.option("--steps", type=int, default=50, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@handles_errors
def timing(ckpt: Path, input_dir: Path, mode: str, steps: int, out: Path) -> None:
    """Encode / denoise / decode wall-clock, single-view and multi-view."""
    loaded = _load(ckpt)
    manifest = read_manifest(input_dir)
    images = sample_tensors(load_dataset(input_dir)[0])["rgb"]
    records = [timing_harness(loaded.bundle, images, mode, steps=steps, views=[0])]
    if images.shape[0] > 1:
        records.append(timing_harness(loaded.bundle, images, mode, steps=steps))
    report = EvalReport(
        timing=records,
        meta=EvalMeta(resolution=manifest.resolution, n_views=manifest.views, checkpoint=str(ckpt)),
    )
    for r in records:
        click.echo(f"{r.mode} {r.setting}: encode {r.encode_s:.4f}s denoise {r.denoise_s:.4f}s "
                   f"decode {r.decode_s:.4f}s total {r.total_s:.4f}s ({r.denoiser_calls} denoiser calls)")
    click.echo(write_report(out, report))


@cli.command()
@click.option("--dataset", type=click.Path(path_type=Path), required=True)
@click.option("--ckpt-a", type=click.Path(path_type=Path), default=None, help="Multistep pretrain (1 DDIM step).")
@click.option("--ckpt-b", type=click.Path(path_type=Path), default=None, help="One-step fine-tune without gradient matching.")
@click.option("--ckpt-c", type=click.Path(path_type=Path), default=None, help="One-step fine-tune, full loss.")
@click.option("--ckpt-d", type=click.Path(path_type=Path), default=None, help="One-step fine-tune + DIN.")
@click.option("--out", type=click.Path(path_type=Path), required=True)
@handles_errors
def ablate(dataset: Path, ckpt_a: Optional[Path], ckpt_b: Optional[Path], ckpt_c: Optional[Path],
           ckpt_d: Optional[Path], out: Path) -> None:
    """Evaluate the four ablation configurations into one CSV."""
    samples = load_dataset(dataset)
    checkpoints = {"a": ckpt_a, "b": ckpt_b, "c": ckpt_c, "d": ckpt_d}
    rows = run_ablation_grid(samples, checkpoints, lambda path: _load(path).bundle)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RunIOError(f"cannot create {out.parent}: {exc}") from exc
    write_ablation_csv(out, rows)
    present: List[str] = [r.config for r in rows if r.status == "ok"]
    click.echo(f"{out}: {len(present)} of {len(rows)} configurations evaluated")


# -----------------------------------------------------------------------------
# Entrypoint for `python main.py`
# -----------------------------------------------------------------------------
if __name__ == "__main__":
    cli()
