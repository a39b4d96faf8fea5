"""Glue shared by the command line, the demos and the acceptance suite.

Resolves datasets from a run configuration (folders on disk when paths are
set, the synthetic generator otherwise) and runs the full-pipeline
gradient check.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig, from_dict
from .data import AnnotatedSample, SyntheticConfig, generate_synthetic, load_dataset
from .model import init_params
from .objective import mim_step_loss
from .rng import Rng
from .tokenizer import LuminanceTokenizer
from .training import prepare_pretrain_batch, split_samples


def synthetic_config(cfg: RunConfig, n_images: int, prefix: str) -> SyntheticConfig:
    s = cfg.model.image_size
    return SyntheticConfig(n_images=n_images, height=s, width=s, nuclei_per_image=tuple(cfg.data.nuclei_per_image),
                           n_classes=cfg.data.n_classes, prefix=prefix)


_STREAMS = {"pretrain": ("pre", "pretrain-data"), "labeled": ("lab", "labeled-data")}


def synthetic_corpus(cfg: RunConfig, seed: int, which: str) -> tuple[list[AnnotatedSample], dict]:
    """The synthetic stand-in for the pretraining ("pretrain") or labelled ("labeled") corpus."""
    prefix, stream = _STREAMS[which]
    n = cfg.data.pretrain_images if which == "pretrain" else cfg.data.labeled_images
    return generate_synthetic(synthetic_config(cfg, n, prefix), Rng(seed).child(stream))


def pretrain_samples(cfg: RunConfig, seed: int) -> list[AnnotatedSample]:
    if cfg.data.pretrain_path:
        return list(load_dataset(cfg.data.pretrain_path))
    return synthetic_corpus(cfg, seed, "pretrain")[0]


def labeled_split(cfg: RunConfig, seed: int) -> tuple[list[AnnotatedSample], list[AnnotatedSample]]:
    """(train, test). A labelled folder with train/ and test/ subfolders is used as is."""
    path = cfg.data.labeled_path
    if path:
        root = Path(path)
        if (root / "train").is_dir() and (root / "test").is_dir():
            return list(load_dataset(root, "train")), list(load_dataset(root, "test"))
        return split_samples(list(load_dataset(root)), cfg.data.train_fraction)
    return split_samples(synthetic_corpus(cfg, seed, "labeled")[0], cfg.data.train_fraction)


def experiment_data(cfg: RunConfig, seed: int):
    """(pretrain, probe-train, probe-test) for one seed."""
    return (pretrain_samples(cfg, seed), *labeled_split(cfg, seed))


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float]
    seconds: float
    coords_per_tensor: int

    def to_dict(self) -> dict:
        worst = max(self.per_tensor, key=self.per_tensor.get)
        return {"max_rel_error": float(self.max_rel_error), "worst_tensor": worst, "tensors": len(self.per_tensor),
                "coords_per_tensor": self.coords_per_tensor, "seconds": round(self.seconds, 2)}


def full_pipeline_gradcheck(cfg: RunConfig, seed: int = 0, batch_size: int = 2, coords_per_tensor: int = 4,
                            eps: float = 1e-5) -> GradCheckReport:
    """Finite-difference check of every parameter through embed, mask, RoI Align, encoder, heads and loss.

    Runs in float64 on a synthetic batch at the configured model scale.
    Augmentation is switched off so every loss evaluation sees the same
    batch; a random subset of coordinates is perturbed per tensor.
    """
    cfg = from_dict({"augment": {"enabled": False}, "precision": "float64"}, cfg)
    start = time.perf_counter()
    rng = Rng(seed).child("gradcheck")
    samples, _ = generate_synthetic(synthetic_config(cfg, batch_size, "gc"), rng.child("data"))
    with ad.precision(np.float64):
        params = init_params(cfg.model, rng.child("init"))
        # scale up the small init so second-order terms are exercised, not just near-linear maps
        for name, p in params.items():
            if not name.endswith(("_g", "_b", "_bias")):
                p.data *= 10.0
        tok = LuminanceTokenizer(cfg.model.vocab_size)
        pb = prepare_pretrain_batch(samples, cfg, tok, rng.child("batch"))
        errors = ad.grad_check_params(lambda: mim_step_loss(params, cfg.model, pb.batch, pb.targets).loss,
                                      params, eps=eps, max_coords=coords_per_tensor,
                                      rng=np.random.default_rng(seed))
    return GradCheckReport(max(errors.values()), errors, time.perf_counter() - start, coords_per_tensor)
