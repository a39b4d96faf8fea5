"""End-to-end acceptance checks at desk scale.

Each test records one PASS/FAIL line (printed in the "acceptance" section of
the pytest summary) and then asserts it. Criteria 7 to 9 pretrain the desk
model several times and take roughly half an hour on one core.
"""

import math
import time

import numpy as np
import pytest

from nucleimim import autodiff as ad
from nucleimim.autodiff import Tensor
from nucleimim.config import desk_preset, from_dict, paper_preset
from nucleimim.instance import roi_align
from nucleimim.model import forward, init_params
from nucleimim.objective import mim_step_loss
from nucleimim.patching import blockwise_mask
from nucleimim.positional import encode_geometry, gamma, grid_geometries
from nucleimim.rng import Rng
from nucleimim.tokenizer import LuminanceTokenizer
from nucleimim.training import (finetune_classifier, linear_probe, load_state, params_digest,
                                prepare_pretrain_batch, pretrain, save_state)
from nucleimim.workflow import experiment_data, full_pipeline_gradcheck, synthetic_corpus
from oracles import roi_oracle

SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def desk64():
    return from_dict({"precision": "float64"}, desk_preset())


class _Runs:
    """Pretraining runs shared between the progress, ablation and fine-tuning checks."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.data: dict[int, tuple] = {}
        self.states: dict[tuple[int, bool], object] = {}
        self.seconds: dict[tuple[int, bool], float] = {}

    def samples(self, seed):
        if seed not in self.data:
            self.data[seed] = experiment_data(self.cfg, seed)
        return self.data[seed]

    def state(self, seed, use_inst):
        key = (seed, use_inst)
        if key not in self.states:
            c = from_dict({"train": {"use_inst_loss": use_inst}, "seed": seed}, self.cfg)
            start = time.perf_counter()
            self.states[key] = pretrain(c, self.samples(seed)[0], seed=seed)
            self.seconds[key] = time.perf_counter() - start
        return self.states[key]

    def config(self, use_inst):
        return from_dict({"train": {"use_inst_loss": use_inst}}, self.cfg)


@pytest.fixture(scope="module")
def runs(desk64):
    return _Runs(desk64)


def test_01_gradient_integrity(verdict):
    report = full_pipeline_gradcheck(desk_preset(), seed=0, batch_size=2, coords_per_tensor=16)
    ok = report.max_rel_error < 1e-4 and report.seconds < 120
    worst = max(report.per_tensor, key=report.per_tensor.get)
    verdict(1, "full-pipeline gradient check (64-bit, desk scale)", ok,
            f"max rel error {report.max_rel_error:.2e} on {worst} over {len(report.per_tensor)} tensors "
            f"x {report.coords_per_tensor} coords (< 1e-4), {report.seconds:.1f}s (< 120s)")


def test_02_roi_align_oracle(verdict):
    rng = np.random.default_rng(2024)
    worst = 0.0
    with ad.precision(np.float64):
        for n in range(200):
            k = (1, 3)[n % 2]
            patch = int(rng.choice([4, 8, 16]))
            gh, gw = rng.integers(1, 9, size=2)
            fmap = rng.normal(size=(gh, gw, 3))
            h, w = gh * patch, gw * patch
            x0, y0 = rng.uniform(0, w - 1), rng.uniform(0, h - 1)
            box = [x0, y0, rng.uniform(x0 + 0.5, w), rng.uniform(y0 + 0.5, h)]
            out = roi_align(fmap[None], [box], [0], patch=patch, k=k).data[0]
            worst = max(worst, float(np.max(np.abs(out - roi_oracle(fmap, box, patch, k, 2)))))
    verdict(2, "RoI Align against dense bilinear oracle", worst <= 1e-6,
            f"200 pairs, k in {{1,3}}, max abs deviation {worst:.1e} (<= 1e-6)")


def test_03_masking_statistics(verdict):
    cfg = desk_preset()
    g = cfg.model.grid
    total = g * g
    target = math.ceil(cfg.mask.ratio * total)
    max_block = cfg.mask.max_block or max(cfg.mask.min_block, target)
    sizes = np.array([blockwise_mask(g, g, cfg.mask.ratio, cfg.mask.min_block, cfg.mask.max_block, Rng(s)).sum()
                      for s in range(1000)])
    frac = float(sizes.mean() / total)
    ok = sizes.min() >= target and sizes.max() <= target + max_block and 0.40 <= frac <= 0.45
    verdict(3, "blockwise masking statistics (8x8 grid, ratio 0.4)", ok,
            f"|M| in [{sizes.min()}, {sizes.max()}] within [{target}, {target + max_block}], "
            f"mean |M|/L {frac:.4f} in [0.40, 0.45]")


def test_04_positional_encoding(verdict):
    zero_ok = np.array_equal(gamma(0.0, 64), np.tile([0.0, 1.0], 8))
    model = paper_preset().model
    enc = encode_geometry(grid_geometries(model.grid, model.grid), model.dim)
    distinct = len({row.tobytes() for row in enc})
    try:
        encode_geometry(np.array([[0.5, 0.5, 0.1, 0.1]]), 60)
        rejected = False
    except ValueError:
        rejected = True
    ok = zero_ok and distinct == model.grid ** 2 == 784 and rejected
    verdict(4, "sinusoidal geometry encoding", ok,
            f"gamma(0) exact {zero_ok}, {distinct}/784 distinct grid encodings at D={model.dim}, D=60 rejected {rejected}")


def _random_batch(cfg, seed):
    samples, _ = synthetic_corpus(from_dict({"data": {"pretrain_images": 4}}, cfg), seed, "pretrain")
    return prepare_pretrain_batch(samples, cfg, LuminanceTokenizer(cfg.model.vocab_size), Rng(seed).child("batch"))


def test_05_loss_calibration(verdict, desk64):
    m = desk64.model
    worst_uniform, worst_split, terms = 0.0, 0.0, 0
    with ad.precision(np.float64):
        params = init_params(m, Rng(5))
        uniform = dict(params)
        for name in ("grid_head_w", "grid_head_b", "inst_head_w", "inst_head_b"):
            uniform[name] = Tensor(np.zeros(params[name].shape))
        for seed in range(5):
            pb = _random_batch(desk64, seed)
            b = len(pb.batch.images)
            n_m = int(pb.targets.mask.sum())
            n_b = sum(len(ix) for ix in pb.targets.masked_instances)
            terms += n_b
            expect = (n_m + m.inst_tokens ** 2 * n_b) * math.log(m.vocab_size) / b
            got = mim_step_loss(uniform, m, pb.batch, pb.targets).loss.item()
            worst_uniform = max(worst_uniform, abs(got - expect) / expect)
            full = mim_step_loss(params, m, pb.batch, pb.targets)
            grid_only = mim_step_loss(params, m, pb.batch, pb.targets, inst_weight=0.0)
            worst_split = max(worst_split,
                              abs(full.loss.item() - (full.beit_term + full.inst_term) / b) / full.loss.item(),
                              abs(grid_only.loss.item() - full.beit_term / b) / grid_only.loss.item())
    ok = worst_uniform <= 1e-9 and worst_split <= 1e-9 and terms > 0
    verdict(5, "loss calibration and two-term decomposition", ok,
            f"uniform-logit rel error {worst_uniform:.1e}, decomposition rel error {worst_split:.1e} "
            f"over 5 batches ({terms} masked nuclei), both <= 1e-9")


def test_06_pad_correctness(verdict, desk64):
    mass, same = 0.0, True
    for dtype in (np.float32, np.float64):
        with ad.precision(dtype):
            params = init_params(desk64.model, Rng(6))
            pb = _random_batch(desk64, 11)
            res = forward(params, desk64.model, pb.batch, record_attention=True)
            pad = res.sequence.pad_mask
            for att in res.attention:
                mass = max(mass, float(np.abs(att[np.broadcast_to(pad[:, None, None, :], att.shape)]).max()))
            params["pad_token"] = Tensor(np.random.default_rng(0).normal(0, 50, size=desk64.model.dim))
            other = forward(params, desk64.model, pb.batch).sequence.tokens.data
            keep = ~pad
            same &= res.sequence.tokens.data[keep].tobytes() == other[keep].tobytes()
    n_pad = int(pad.sum())
    verdict(6, "PAD keys receive no attention and do not leak", mass == 0.0 and same and n_pad > 0,
            f"max attention on {n_pad} PAD keys {mass:g} (== 0), non-PAD outputs bit-identical after "
            f"perturbing PAD embedding: {same} (32- and 64-bit)")


def test_07_pretraining_progress(verdict, runs):
    state = runs.state(0, True)
    losses = [r["loss"] for r in state.trace]
    ratio = losses[-1] / losses[0]
    repeat = pretrain(runs.config(True), runs.samples(0)[0], seed=0)
    same = repeat.trace == state.trace and params_digest(repeat.params) == params_digest(state.params)
    minutes = runs.seconds[(0, True)] / 60
    ok = ratio <= 0.5 and same and len(losses) == 30
    verdict(7, "pretraining progress and determinism (512 images, 30 epochs)", ok,
            f"final/first epoch loss {losses[-1]:.2f}/{losses[0]:.2f} = {ratio:.3f} (<= 0.5), "
            f"64-bit repeat bit-identical {same}, {minutes:.1f} min per run")


def test_08_ablation_direction(verdict, runs):
    acc = {True: [], False: []}
    for seed in SEEDS:
        _, train, test = runs.samples(seed)
        for use in (True, False):
            probe = linear_probe(runs.state(seed, use).params, runs.config(use), train, test, runs.cfg.data.n_classes)
            acc[use].append(probe.metrics.accuracy)
    with_, without = float(np.mean(acc[True])), float(np.mean(acc[False]))
    ok = with_ - without >= 0.03 and min(with_, without) >= 0.35
    verdict(8, "instance term improves the linear probe (3 seeds)", ok,
            f"mean accuracy with {with_:.3f} {np.round(acc[True], 3).tolist()} vs without {without:.3f} "
            f"{np.round(acc[False], 3).tolist()}: +{100 * (with_ - without):.1f} points (>= 3), "
            f"both >= 0.35")


def test_09_finetune_vs_probe(verdict, runs):
    ft_acc, probe_acc = [], []
    for seed in SEEDS:
        _, train, test = runs.samples(seed)
        res = finetune_classifier(runs.state(seed, True).params, runs.config(True), train, test, seed=seed,
                                  n_classes=runs.cfg.data.n_classes)
        ft_acc.append(res.metrics.accuracy)
        probe_acc.append(res.probe.metrics.accuracy)
    ft, pr = float(np.mean(ft_acc)), float(np.mean(probe_acc))
    verdict(9, "fine-tuning matches or beats the linear probe (3 seeds)", ft >= pr,
            f"mean fine-tuned {ft:.3f} {np.round(ft_acc, 3).tolist()} vs probe {pr:.3f} "
            f"{np.round(probe_acc, 3).tolist()}")


def test_10_persistence(verdict, desk64, tmp_path):
    cfg = from_dict({"train": {"epochs": 3}, "data": {"pretrain_images": 48}}, desk64)
    pre = experiment_data(cfg, 3)[0]
    full = pretrain(cfg, pre, seed=3)
    part = pretrain(cfg, pre, seed=3, epochs=2)
    save_state(part, tmp_path / "ck", seed=3)
    resumed = load_state(tmp_path / "ck")
    exact = all(resumed.params[n].data.tobytes() == p.data.tobytes() for n, p in part.params.items())
    exact &= set(resumed.params) == set(part.params)
    pretrain(cfg, pre, seed=3, state=resumed)
    next_loss = resumed.trace[-1]["loss"] == full.trace[-1]["loss"]
    same_end = params_digest(resumed.params) == params_digest(full.params)
    verdict(10, "checkpoint round trip and resume", exact and next_loss and same_end,
            f"parameters bit-exact after load {exact}, resumed epoch-3 loss identical {next_loss} "
            f"({full.trace[-1]['loss']:.6f}), final parameters identical {same_end}")
