import csv
import logging
import statistics

import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from framework.errors import CheckpointLoadError, ConfigurationError, IntegrityError, InvalidArgumentError
from framework.rundir import RunDirectory
from models.config import RunConfig, Stage
from services.networks import ModelBundle
from services.pipeline import (
    PhaseTimer,
    ddim_timesteps,
    infer_multistep_ddim,
    infer_onestep,
    initial_noise,
    load_checkpoint,
    onestep_losses,
    prepare_stage,
    read_checkpoint_manifest,
    run_stage,
    save_checkpoint,
    sidecar_path,
    stage_onestep_finetune,
)


def test_lr_linear_decay(tiny_train_config):
    cfg = tiny_train_config.model_copy(update={"steps": 100, "lr_start": 1e-4, "lr_end": 1e-5})
    assert cfg.lr_at(0) == pytest.approx(1e-4)
    assert cfg.lr_at(50) == pytest.approx(5.5e-5)
    assert cfg.lr_at(100) == pytest.approx(1e-5)


def test_ddim_ladder():
    ladder = ddim_timesteps(1000, 50)
    assert len(ladder) == 51
    assert ladder[0] == 1000 and ladder[-1] == 0
    assert all(a - b == 20 for a, b in zip(ladder, ladder[1:]))
    assert ddim_timesteps(1000, 1) == [1000, 0]


@pytest.mark.parametrize("n", [0, 51])
def test_ddim_ladder_rejects_bad_step_count(n):
    with pytest.raises(InvalidArgumentError):
        ddim_timesteps(50, n)


# -----------------------------------------------------------------------------
# Inference
# -----------------------------------------------------------------------------
def test_deterministic_onestep_is_reproducible(tiny_bundle, rgb_views):
    a = infer_onestep(tiny_bundle, rgb_views, deterministic=True)
    b = infer_onestep(tiny_bundle, rgb_views, deterministic=True)
    assert torch.equal(a.albedo, b.albedo) and torch.equal(a.rm, b.rm)


def test_onestep_output_contract(tiny_bundle, rgb_views):
    pred = infer_onestep(tiny_bundle, rgb_views, deterministic=False, seed=4)
    assert pred.albedo.shape == (2, 3, 32, 32)
    assert pred.rm.shape == (2, 3, 32, 32)
    assert pred.albedo.min() >= 0 and pred.albedo.max() <= 1
    assert torch.all(pred.rm[:, 2] == 0)
    assert pred.roughness.shape == (2, 1, 32, 32)


def test_onestep_drops_excess_rm_channel(tiny_bundle, rgb_views, caplog):
    with torch.no_grad():
        tiny_bundle.autoencoder.decoder.last[-1].bias[2] = 5.0
    with caplog.at_level(logging.WARNING, logger="services.materials"):
        pred = infer_onestep(tiny_bundle, rgb_views, deterministic=True)
    assert torch.all(pred.rm[:, 2] == 0)
    assert "channel 2" in caplog.text


def test_onestep_uses_a_single_denoiser_call(tiny_bundle, rgb_views):
    before = tiny_bundle.denoiser.forward_calls
    infer_onestep(tiny_bundle, rgb_views)
    assert tiny_bundle.denoiser.forward_calls == before + 1


def test_single_ddim_step_matches_onestep(tiny_bundle, rgb_views):
    ddim = infer_multistep_ddim(tiny_bundle, rgb_views, n_steps=1, seed=9)
    onestep = infer_onestep(tiny_bundle, rgb_views, deterministic=False, seed=9)
    assert torch.equal(ddim.albedo, onestep.albedo) and torch.equal(ddim.rm, onestep.rm)


def test_ddim_counts_steps_and_times_phases(tiny_bundle, rgb_views):
    timer = PhaseTimer()
    before = tiny_bundle.denoiser.forward_calls
    infer_multistep_ddim(tiny_bundle, rgb_views, n_steps=5, seed=0, timer=timer)
    assert tiny_bundle.denoiser.forward_calls == before + 5
    assert all(timer.seconds[p] > 0 for p in PhaseTimer.PHASES)


def test_initial_noise_is_seeded(tiny_bundle, rgb_views):
    assert torch.equal(initial_noise(tiny_bundle, rgb_views, 3), initial_noise(tiny_bundle, rgb_views, 3))
    assert initial_noise(tiny_bundle, rgb_views, 3).shape == (2, 2, 4, 4, 4)


def test_inference_rejects_bad_images(tiny_bundle):
    with pytest.raises(InvalidArgumentError):
        infer_onestep(tiny_bundle, torch.zeros(3, 32, 32))


# -----------------------------------------------------------------------------
# Training
# -----------------------------------------------------------------------------
def test_onestep_requires_frozen_autoencoder(tiny_bundle, tiny_train_config, material_dataset):
    tiny_bundle.set_trainable("autoencoder", "denoiser")
    cfg = tiny_train_config.model_copy(update={"stage": Stage.ONESTEP_FINETUNE})
    with pytest.raises(ConfigurationError):
        stage_onestep_finetune(cfg, material_dataset, tiny_bundle)


def test_stage_writes_metrics_and_checkpoints(tmp_path, tiny_bundle, tiny_train_config, material_dataset):
    run_dir = RunDirectory(tmp_path / "run").create(RunConfig())
    cfg = tiny_train_config.model_copy(update={"stage": Stage.MULTISTEP_PRETRAIN})
    before = tiny_bundle.parameter_hashes()
    result = run_stage(cfg, material_dataset, tiny_bundle, run_dir)

    assert len(result.losses) == 3
    assert [p.name for p in result.checkpoints] == ["step_2.pt", "step_3.pt"]
    assert run_dir.latest_checkpoint(Stage.MULTISTEP_PRETRAIN) == result.checkpoints[-1]
    with open(run_dir.metrics_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["step"]) for r in rows] == [1, 2, 3]
    assert rows[1]["checkpoint"] == "checkpoints/multistep_pretrain/step_2.pt"
    after = tiny_bundle.parameter_hashes()
    assert after["autoencoder"] == before["autoencoder"] and after["din"] == before["din"]
    assert after["denoiser"] != before["denoiser"]


def test_onestep_stage_only_touches_denoiser(tiny_bundle, tiny_train_config, material_dataset):
    cfg = tiny_train_config.model_copy(update={"stage": Stage.ONESTEP_FINETUNE, "steps": 2})
    before = tiny_bundle.parameter_hashes()
    result = run_stage(cfg, material_dataset, tiny_bundle)
    assert all(torch.isfinite(torch.tensor(result.losses)))
    after = tiny_bundle.parameter_hashes()
    assert after["autoencoder"] == before["autoencoder"]


def test_fresh_din_does_not_change_onestep_loss(tiny_bundle, tiny_train_config, material_dataset):
    batch = {k: v.unsqueeze(0) for k, v in material_dataset[0].items()}
    eps = torch.randn(1, 2, 2, 4, 4, 4, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        plain = onestep_losses(tiny_bundle, batch, eps, tiny_train_config, use_din=False)
        injected = onestep_losses(tiny_bundle, batch, eps, tiny_train_config, use_din=True)
    assert torch.equal(plain.total, injected.total)


def test_din_stage_runs_from_zero_init(tiny_bundle, tiny_train_config, material_dataset):
    cfg = tiny_train_config.model_copy(update={"stage": Stage.DIN_TRAIN, "steps": 2})
    before = tiny_bundle.parameter_hashes()
    run_stage(cfg, material_dataset, tiny_bundle)
    after = tiny_bundle.parameter_hashes()
    assert after["denoiser"] == before["denoiser"]
    assert after["din"] != before["din"]


def test_multistep_pretrain_is_reproducible(tiny_model_config, tiny_schedule_config, tiny_train_config, material_dataset):
    cfg = tiny_train_config.model_copy(update={"stage": Stage.MULTISTEP_PRETRAIN, "steps": 4})
    runs = []
    for _ in range(2):
        bundle = ModelBundle.build(tiny_model_config, tiny_schedule_config, seed=0)
        result = run_stage(cfg, material_dataset, bundle)
        runs.append((result.losses, bundle.parameter_hashes()["denoiser"]))
    assert runs[0][0] == pytest.approx(runs[1][0], abs=1e-6)
    assert runs[0][1] == runs[1][1]


def test_multistep_pretrain_loss_descends(tiny_bundle, tiny_train_config, material_dataset):
    cfg = tiny_train_config.model_copy(update={
        "stage": Stage.MULTISTEP_PRETRAIN, "steps": 150, "lr_start": 1e-3, "lr_end": 1e-4, "checkpoint_every": 150,
    })
    losses = run_stage(cfg, material_dataset, tiny_bundle).losses
    assert statistics.mean(losses[-20:]) < statistics.mean(losses[:20])


def test_din_path_receives_all_gradient(tiny_bundle):
    prepare_stage(tiny_bundle, Stage.DIN_TRAIN)
    for branch in tiny_bundle.din.branches:
        nn.init.normal_(branch.out.weight, std=0.1)
    latents = torch.randn(2, 4, 4, 4, generator=torch.Generator().manual_seed(0))
    noise = torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(1))
    plain = tiny_bundle.autoencoder.decode(latents).detach()
    out = tiny_bundle.decode_with_din(latents, noise)
    (out - plain).pow(2).sum().backward()
    for name in ("autoencoder", "denoiser"):
        assert all(p.grad is None for p in tiny_bundle.modules()[name].parameters()), name
    din_grads = [p.grad for p in tiny_bundle.din.parameters()]
    assert all(g is not None for g in din_grads)
    assert any(float(g.abs().sum()) > 0 for g in din_grads)


def test_autoencoder_reconstructs_flat_colors(tiny_bundle):
    ae = tiny_bundle.autoencoder.train()
    optimizer = torch.optim.AdamW(ae.parameters(), lr=3e-3, weight_decay=0.0)
    gen = torch.Generator().manual_seed(0)

    def flat_images(n):
        colors = torch.rand(n, 3, 1, 1, generator=gen) * 0.9 + 0.05
        return colors.expand(n, 3, 32, 32).contiguous()

    for _ in range(500):
        images = flat_images(16)
        optimizer.zero_grad(set_to_none=True)
        F.mse_loss(ae.decode(ae.encode(images)), images).backward()
        optimizer.step()
    ae.eval()
    held_out = flat_images(16)
    with torch.no_grad():
        error = (ae.decode(ae.encode(held_out)) - held_out).abs().mean()
    assert float(error) <= 0.05


# -----------------------------------------------------------------------------
# Checkpoints
# -----------------------------------------------------------------------------
def test_checkpoint_round_trip(tmp_path, tiny_bundle, rgb_views):
    path = tmp_path / "ckpt" / "step_7.pt"
    manifest = save_checkpoint(path, tiny_bundle, Stage.ONESTEP_FINETUNE, 7)
    assert '"schema": 1' in sidecar_path(path).read_text()
    assert read_checkpoint_manifest(path) == manifest

    loaded = load_checkpoint(path, expected_sha256=manifest.config_sha256)
    assert loaded.manifest.step == 7
    assert loaded.bundle.parameter_hashes() == tiny_bundle.parameter_hashes()
    a = infer_onestep(tiny_bundle, rgb_views)
    b = infer_onestep(loaded.bundle.eval(), rgb_views)
    assert torch.equal(a.albedo, b.albedo)


def test_checkpoint_hash_mismatch(tmp_path, tiny_bundle):
    path = tmp_path / "step_1.pt"
    save_checkpoint(path, tiny_bundle, Stage.MULTISTEP_PRETRAIN, 1)
    with pytest.raises(IntegrityError):
        load_checkpoint(path, expected_sha256="f" * 64)


def test_checkpoint_tampered_sidecar(tmp_path, tiny_bundle):
    path = tmp_path / "step_1.pt"
    manifest = save_checkpoint(path, tiny_bundle, Stage.MULTISTEP_PRETRAIN, 1)
    tampered = manifest.model_copy(update={"config_sha256": "0" * 64})
    sidecar_path(path).write_text(tampered.model_dump_json(by_alias=True))
    with pytest.raises(IntegrityError):
        load_checkpoint(path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointLoadError):
        load_checkpoint(tmp_path / "nope.pt")
