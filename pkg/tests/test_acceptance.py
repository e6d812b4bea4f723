"""End-to-end training runs at desk scale. Deselected by default; run with `pytest -m slow`."""

import copy
import statistics
from dataclasses import dataclass
from typing import Dict

import numpy as np
import pytest

from models.config import ModelConfig, ScheduleConfig, Stage, TrainConfig
from services.evaluation import (
    ablation_predictor,
    aggregate,
    evaluate_samples,
    run_ablation_grid,
    timing_harness,
    variance_harness,
)
from services.networks import ModelBundle
from services.pipeline import load_checkpoint, run_stage, save_checkpoint
from services.synthdata import MaterialDataset, generate_dataset, load_dataset, sample_tensors

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
STEPS = {
    Stage.AUTOENCODER_PRETRAIN: 1000,
    Stage.MULTISTEP_PRETRAIN: 500,
    Stage.ONESTEP_FINETUNE: 2000,
    Stage.DIN_TRAIN: 1000,
}


@dataclass
class TrainedChain:
    multistep: ModelBundle
    without_gm: ModelBundle
    onestep: ModelBundle
    with_din: ModelBundle


def _train(bundle: ModelBundle, stage: Stage, dataset: MaterialDataset, seed: int, use_gm: bool = True) -> ModelBundle:
    cfg = TrainConfig(
        stage=stage, steps=STEPS[stage], batch_scenes=4, views=4, resolution=64,
        seed=seed, use_gm_loss=use_gm, checkpoint_every=STEPS[stage],
    )
    run_stage(cfg, dataset, bundle)
    return bundle


class Chains:
    def __init__(self, dataset: MaterialDataset):
        self.dataset = dataset
        self._cache: Dict[int, TrainedChain] = {}

    def __getitem__(self, seed: int) -> TrainedChain:
        if seed not in self._cache:
            bundle = ModelBundle.build(ModelConfig(), ScheduleConfig(), seed=seed)
            _train(bundle, Stage.AUTOENCODER_PRETRAIN, self.dataset, seed)
            multistep = _train(bundle, Stage.MULTISTEP_PRETRAIN, self.dataset, seed)
            without_gm = _train(copy.deepcopy(multistep), Stage.ONESTEP_FINETUNE, self.dataset, seed, use_gm=False)
            onestep = _train(copy.deepcopy(multistep), Stage.ONESTEP_FINETUNE, self.dataset, seed)
            with_din = _train(copy.deepcopy(onestep), Stage.DIN_TRAIN, self.dataset, seed)
            self._cache[seed] = TrainedChain(
                multistep=multistep.eval(), without_gm=without_gm.eval(), onestep=onestep.eval(), with_din=with_din.eval()
            )
        return self._cache[seed]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    generate_dataset(n_scenes=16, views_per_scene=4, resolution=64, seed=0, out_dir=root / "train")
    generate_dataset(n_scenes=6, views_per_scene=4, resolution=64, seed=1, out_dir=root / "val")
    return load_dataset(root / "train"), load_dataset(root / "val")


@pytest.fixture(scope="module")
def chains(data):
    return Chains(MaterialDataset(data[0], views=4))


def test_overfit_reaches_calibration_targets(data, chains):
    train = data[0]
    agg = aggregate(evaluate_samples(chains[0].onestep, train, ablation_predictor("c")))
    assert agg.per_map.albedo.si_psnr >= 30.0
    assert agg.per_map.roughness.mse <= 0.01


def test_ablation_ordering(tmp_path, data, chains):
    val = data[1]
    psnr = {k: [] for k in "acd"}
    metallic = {k: [] for k in "ad"}
    for seed in SEEDS:
        chain = chains[seed]
        paths = {}
        for key, bundle, stage in (("a", chain.multistep, Stage.MULTISTEP_PRETRAIN),
                                   ("b", chain.without_gm, Stage.ONESTEP_FINETUNE),
                                   ("c", chain.onestep, Stage.ONESTEP_FINETUNE),
                                   ("d", chain.with_din, Stage.DIN_TRAIN)):
            paths[key] = tmp_path / f"{seed}_{key}.pt"
            save_checkpoint(paths[key], bundle, stage, 0)
        rows = dict(zip("abcd", run_ablation_grid(val, paths, lambda p: load_checkpoint(p).bundle.eval())))
        for k in psnr:
            psnr[k].append(rows[k].albedo_psnr)
        for k in metallic:
            metallic[k].append(rows[k].metallic_mse)
    med = {k: statistics.median(v) for k, v in psnr.items()}
    assert med["a"] <= med["c"] <= med["d"]
    assert statistics.median(metallic["d"]) <= statistics.median(metallic["a"])


def test_gradient_matching_reduces_texture_baking(data, chains):
    glyph = [s for s in data[1] if s.texture == "glyph_grid"]
    assert glyph
    with_gm, without_gm = [], []
    for seed in SEEDS:
        chain = chains[seed]
        with_gm.append(aggregate(evaluate_samples(chain.onestep, glyph, ablation_predictor("c"))).rm_texture_bake_glyph)
        without_gm.append(aggregate(evaluate_samples(chain.without_gm, glyph, ablation_predictor("b"))).rm_texture_bake_glyph)
    assert statistics.median(with_gm) <= statistics.median(without_gm)


def test_one_step_variance_is_at_most_half_of_ddim(data, chains):
    chain = chains[0]
    onestep, ddim = [], []
    for sample in data[1]:
        images = sample_tensors(sample)["rgb"]
        masks = np.stack([v.maps.mask for v in sample.views])
        onestep.append(variance_harness(chain.onestep, images, 8, mask=masks).per_pixel_std_mean)
        ddim.append(variance_harness(chain.multistep, images, 8, mask=masks, sampler="ddim", ddim_steps=50).per_pixel_std_mean)
    assert np.mean(onestep) <= 0.5 * np.mean(ddim)


def test_denoise_time_ratio(data, chains):
    images = sample_tensors(data[1][0])["rgb"]
    onestep = timing_harness(chains[0].onestep, images, "onestep")
    ddim = timing_harness(chains[0].multistep, images, "ddim", steps=50)
    assert onestep.denoiser_calls == 1 and ddim.denoiser_calls == 50
    assert ddim.denoise_s / onestep.denoise_s >= 25
