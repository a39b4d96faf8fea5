"""Token-prediction heads and the two-term MIM loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .instance import masked_instance_set
from .model import Batch, Params, forward


def grid_head(h, weight, bias) -> Tensor:
    return ad.as_tensor(h) @ weight + bias


def instance_head(h, weight, bias, t: int) -> Tensor:
    """(n, D) -> (n, t*t, V) logits; block k is crop cell k in row-major order."""
    h = ad.as_tensor(h)
    out = h @ weight + bias
    if out.shape[-1] % (t * t):
        raise ValueError(f"instance head width {out.shape[-1]} is not a multiple of t*t={t * t}")
    return out.reshape(h.shape[0], t * t, out.shape[-1] // (t * t))


@dataclass
class MimTargets:
    grid_tokens: np.ndarray            # (B, L)
    instance_tokens: list[np.ndarray]  # per sample (n_b, t*t)
    mask: np.ndarray                   # (B, L) bool
    masked_instances: list[np.ndarray]  # per sample indices into its boxes


@dataclass
class MimLoss:
    loss: Tensor
    beit_term: float
    inst_term: float
    n_grid_terms: int
    n_inst_terms: int


def mim_loss(grid_logits: Tensor, inst_logits: Tensor | None, targets: MimTargets, batch_size: int,
             inst_weight: float = 1.0) -> MimLoss:
    """Sum of token NLLs over masked patches plus all t*t tokens of masked nuclei.

    ``grid_logits`` rows follow the flat (sample, patch) order of masked
    patches; ``inst_logits`` rows follow (sample, box) order over the masked
    instances. The returned loss is the batch mean of per-image sums; the
    two terms are unnormalised sums.
    """
    grid_t = np.asarray(targets.grid_tokens).reshape(-1)[np.flatnonzero(np.asarray(targets.mask).reshape(-1))]
    if grid_logits.shape[0] != grid_t.shape[0]:
        raise ValueError(f"got logits for {grid_logits.shape[0]} grid positions, {grid_t.shape[0]} are masked")
    beit = ad.cross_entropy(grid_logits, grid_t, reduction="sum")
    inst_t = [np.asarray(tok)[np.asarray(idx, dtype=np.int64)]
              for tok, idx in zip(targets.instance_tokens, targets.masked_instances) if len(idx)]
    n_inst = sum(len(x) for x in inst_t)
    n_logit_rows = 0 if inst_logits is None else inst_logits.shape[0]
    if n_logit_rows != n_inst:
        raise ValueError(f"got logits for {n_logit_rows} instances, {n_inst} intersect the mask")
    total = beit
    inst_val = 0.0
    n_inst_terms = 0
    if n_inst:
        flat_t = np.concatenate(inst_t).reshape(-1)
        v = inst_logits.shape[-1]
        inst = ad.cross_entropy(inst_logits.reshape(-1, v), flat_t, reduction="sum")
        inst_val = inst.item()
        n_inst_terms = flat_t.size
        if inst_weight:
            total = total + inst * float(inst_weight)
    loss = total * (1.0 / max(batch_size, 1))
    return MimLoss(loss, beit.item(), inst_val, grid_t.size, n_inst_terms)


def build_targets(batch_boxes: list[np.ndarray], mask: np.ndarray, grid_tokens: np.ndarray,
                  instance_tokens: list[np.ndarray], patch: int) -> MimTargets:
    """``mask`` is (B, grid_h, grid_w); B_M is derived per sample from box/patch overlap."""
    mask = np.asarray(mask, dtype=bool)
    b = mask.shape[0]
    masked = [masked_instance_set(bx, mask[i], patch) for i, bx in enumerate(batch_boxes)]
    return MimTargets(np.asarray(grid_tokens).reshape(b, -1), instance_tokens, mask.reshape(b, -1), masked)


def mim_step_loss(params: Params, cfg: ModelConfig, batch: Batch, targets: MimTargets,
                  inst_weight: float = 1.0) -> MimLoss:
    """Full forward pass through both heads into the MIM loss.

    ``inst_weight=0`` drops the instance term from the objective (it is
    still evaluated for logging).
    """
    res = forward(params, cfg, batch, targets.mask)
    tokens = res.sequence.tokens
    b, _, d = tokens.shape
    l = cfg.n_grid
    grid_rows = tokens[:, 1:1 + l].reshape(b * l, d)
    sel = np.flatnonzero(targets.mask.reshape(-1))
    glog = grid_head(grid_rows[sel], params["grid_head_w"], params["grid_head_b"])
    picks = [i * cfg.n_max + np.asarray(idx, dtype=np.int64) for i, idx in enumerate(targets.masked_instances)]
    picks = np.concatenate(picks) if picks else np.zeros(0, np.int64)
    ilog = None
    if picks.size:
        inst_rows = tokens[:, 1 + l:].reshape(b * cfg.n_max, d)[picks]
        ilog = instance_head(inst_rows, params["inst_head_w"], params["inst_head_b"], cfg.inst_tokens)
    return mim_loss(glog, ilog, targets, b, inst_weight)
