"""Sequence assembly and the ViT-style encoder with PAD attention masking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .instance import embed_instance, roi_align
from .patching import apply_mask, embed_grid, split_grid
from .positional import add_positions, box_geometries, encode_geometry, grid_geometries
from .rng import Rng

Params = dict[str, Tensor]

ENCODER_PREFIXES = ("patch_", "cls_", "pad_", "mask_", "inst_conv", "inst_bias", "blocks.", "norm_")


def trunc_normal(rng: Rng, shape, std: float = 0.02) -> np.ndarray:
    x = rng.normal(0.0, 1.0, size=shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.normal(0.0, 1.0, size=int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(cfg: ModelConfig, rng: Rng) -> Params:
    """Truncated-normal(0.02) weights, zero biases, unit layer-norm scales.

    Every tensor draws from its own named sub-stream, so adding or dropping
    a parameter never shifts the others.
    """
    d, p, c = cfg.dim, cfg.patch_size, cfg.channels
    hidden = cfg.mlp_ratio * d
    spec: dict[str, tuple] = {
        "patch_proj": (p * p * c, d), "patch_bias": None,
        "cls_token": (d,), "pad_token": (d,), "mask_token": (d,), "cls_pos": (d,),
        "inst_conv": (cfg.roi_k, cfg.roi_k, d, d), "inst_bias": None,
    }
    for layer in range(cfg.layers):
        pre = f"blocks.{layer}."
        spec.update({pre + "ln1_g": "ones", pre + "ln1_b": None,
                     pre + "qkv_w": (d, 3 * d), pre + "qkv_b": (3 * d,),
                     pre + "proj_w": (d, d), pre + "proj_b": (d,),
                     pre + "ln2_g": "ones", pre + "ln2_b": None,
                     pre + "fc1_w": (d, hidden), pre + "fc1_b": (hidden,),
                     pre + "fc2_w": (hidden, d), pre + "fc2_b": (d,)})
    spec.update({"norm_g": "ones", "norm_b": None,
                 "grid_head_w": (d, cfg.vocab_size), "grid_head_b": (cfg.vocab_size,),
                 "inst_head_w": (d, cfg.inst_tokens ** 2 * cfg.vocab_size),
                 "inst_head_b": (cfg.inst_tokens ** 2 * cfg.vocab_size,)})
    params = {}
    dt = ad.get_default_dtype()
    for name, shape in spec.items():
        if shape is None:
            arr = np.zeros(d)
        elif shape == "ones":
            arr = np.ones(d)
        elif name.endswith("_b") and len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = trunc_normal(rng.child(name), shape)
        params[name] = Tensor(arr.astype(dt), requires_grad=True, name=name)
    return params


def encoder_param_names(params: Params) -> list[str]:
    return [k for k in params if k.startswith(ENCODER_PREFIXES)]


@dataclass
class Batch:
    """Images already normalised, (B, H, W, C); boxes as one (n_b, 4) pixel array per image."""

    images: np.ndarray
    boxes: list[np.ndarray]

    @property
    def size(self) -> int:
        return self.images.shape[0]

    def counts(self) -> np.ndarray:
        return np.array([len(b) for b in self.boxes], dtype=np.int64)


@dataclass
class SequenceState:
    tokens: Tensor            # (B, S, D)
    pad_mask: np.ndarray      # (B, S) True at PAD slots
    geometry: np.ndarray      # (B, S-1, 4) normalised x, y, w, h for non-CLS slots (0 at PAD)
    n_grid: int
    counts: np.ndarray        # nuclei per sample

    @property
    def n_max(self) -> int:
        return self.tokens.shape[1] - 1 - self.n_grid


def instance_slots(counts: np.ndarray, n_max: int) -> np.ndarray:
    """(B, n_max) row indices into the flat instance list; PAD slots point one past the end."""
    total = int(counts.sum())
    slots = np.full((len(counts), n_max), total, dtype=np.int64)
    start = 0
    for b, n in enumerate(counts):
        slots[b, :n] = np.arange(start, start + n)
        start += n
    return slots


def assemble_sequence(masked_grid: Tensor, inst: Tensor | None, counts, params: Params, n_max: int,
                      geometry: np.ndarray) -> SequenceState:
    """[CLS, grid tokens (row-major), instance tokens (box order), PAD ...] with fixed length 1+L+n_max."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.size and counts.max() > n_max:
        raise ValueError(f"{counts.max()} nuclei exceed n_max={n_max}; raise model.n_max or subsample boxes")
    b, n_grid, d = masked_grid.shape
    pad = params["pad_token"].reshape(1, d)
    rows = pad if inst is None or inst.shape[0] == 0 else ad.concat([inst, pad], axis=0)
    slots = instance_slots(counts, n_max) if inst is not None and inst.shape[0] else np.zeros((b, n_max), np.int64)
    inst_seq = rows[slots]
    cls = ad.broadcast_to(params["cls_token"].reshape(1, 1, d), (b, 1, d))
    tokens = ad.concat([cls, masked_grid, inst_seq], axis=1)
    pad_mask = np.zeros((b, 1 + n_grid + n_max), dtype=bool)
    for i, n in enumerate(counts):
        pad_mask[i, 1 + n_grid + n:] = True
    return SequenceState(tokens, pad_mask, geometry, n_grid, counts)


def attention(x: Tensor, params: Params, pre: str, heads: int, pad_mask: np.ndarray, record: list | None = None):
    b, s, d = x.shape
    dh = d // heads
    qkv = (x @ params[pre + "qkv_w"] + params[pre + "qkv_b"]).reshape(b, s, 3, heads, dh)
    qkv = qkv.transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    logits = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    att = ad.softmax(logits, axis=-1, key_mask=pad_mask[:, None, None, :])
    if record is not None:
        record.append(att.data)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(b, s, d)
    return out @ params[pre + "proj_w"] + params[pre + "proj_b"]


def encoder_forward(seq: SequenceState, params: Params, layers: int, heads: int,
                    record_attention: list | None = None, final_norm: bool = True) -> SequenceState:
    """Pre-norm transformer blocks; keys at PAD slots get exactly zero attention."""
    x = seq.tokens
    for layer in range(layers):
        pre = f"blocks.{layer}."
        h = ad.layer_norm(x, params[pre + "ln1_g"], params[pre + "ln1_b"])
        x = x + attention(h, params, pre, heads, seq.pad_mask, record_attention)
        h = ad.layer_norm(x, params[pre + "ln2_g"], params[pre + "ln2_b"])
        h = ad.gelu(h @ params[pre + "fc1_w"] + params[pre + "fc1_b"])
        x = x + (h @ params[pre + "fc2_w"] + params[pre + "fc2_b"])
    if final_norm and layers > 0:
        x = ad.layer_norm(x, params["norm_g"], params["norm_b"])
    return SequenceState(x, seq.pad_mask, seq.geometry, seq.n_grid, seq.counts)


def split_outputs(seq: SequenceState):
    """-> (h_cls (B, D), grid reps (B, L, D), list of per-sample nuclei reps (n_b, D))."""
    t = seq.tokens.data
    l = seq.n_grid
    nuclei = [t[i, 1 + l:1 + l + n] for i, n in enumerate(seq.counts)]
    return t[:, 0], t[:, 1:1 + l], nuclei


def sequence_geometry(boxes: list[np.ndarray], cfg: ModelConfig) -> np.ndarray:
    b = len(boxes)
    grid = grid_geometries(cfg.grid, cfg.grid)
    geom = np.zeros((b, cfg.n_grid + cfg.n_max, 4))
    geom[:, :cfg.n_grid] = grid
    for i, bx in enumerate(boxes):
        if len(bx):
            geom[i, cfg.n_grid:cfg.n_grid + len(bx)] = box_geometries(bx, cfg.image_size, cfg.image_size)
    return geom


@dataclass
class ForwardResult:
    features: Tensor          # c before masking, (B, L, D)
    sequence: SequenceState   # final encoder state
    instance_embeddings: Tensor | None
    attention: list | None


def forward(params: Params, cfg: ModelConfig, batch: Batch, mask: np.ndarray | None = None,
            record_attention: bool = False) -> ForwardResult:
    """Patch embed -> mask -> RoI Align -> conv -> aggregate -> positions -> encoder."""
    b = batch.size
    patches = Tensor(split_grid(batch.images, cfg.patch_size))
    c = embed_grid(patches, params["patch_proj"], params["patch_bias"])
    cm = c if mask is None else apply_mask(c, np.asarray(mask).reshape(b, cfg.n_grid), params["mask_token"])
    counts = batch.counts()
    inst = None
    if counts.sum():
        fmap = cm.reshape(b, cfg.grid, cfg.grid, cfg.dim)
        all_boxes = np.concatenate([np.asarray(x, dtype=np.float64).reshape(-1, 4) for x in batch.boxes])
        bidx = np.repeat(np.arange(b), counts)
        c_ins = roi_align(fmap, all_boxes, bidx, cfg.patch_size, cfg.roi_k, cfg.roi_samples)
        inst = embed_instance(c_ins, params["inst_conv"], params["inst_bias"])
    geom = sequence_geometry(batch.boxes, cfg)
    seq = assemble_sequence(cm, inst, counts, params, cfg.n_max, geom)
    enc = encode_geometry(geom, cfg.dim)
    tokens = add_positions(seq.tokens, enc, params["cls_pos"], seq.pad_mask)
    seq = SequenceState(tokens, seq.pad_mask, geom, seq.n_grid, counts)
    rec = [] if record_attention else None
    out = encoder_forward(seq, params, cfg.layers, cfg.heads, rec)
    return ForwardResult(c, out, inst, rec)
