"""Grid patches, linear patch embedding and blockwise masking."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import Rng


def split_grid(image: np.ndarray, patch: int) -> np.ndarray:
    """Cut an (H, W, C) image (or a batch (B, H, W, C)) into row-major flattened patches.

    Each patch is flattened in (row, col, channel) order, giving (L, P*P*C)
    or (B, L, P*P*C).
    """
    batched = image.ndim == 4
    x = image if batched else image[None]
    b, h, w, c = x.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    out = x.reshape(b, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, patch * patch * c)
    return out if batched else out[0]


def merge_grid(patches: np.ndarray, grid_h: int, grid_w: int, patch: int) -> np.ndarray:
    """Inverse of :func:`split_grid`."""
    batched = patches.ndim == 3
    x = patches if batched else patches[None]
    b = x.shape[0]
    c = x.shape[-1] // (patch * patch)
    out = x.reshape(b, grid_h, grid_w, patch, patch, c).transpose(0, 1, 3, 2, 4, 5)
    out = out.reshape(b, grid_h * patch, grid_w * patch, c)
    return out if batched else out[0]


def embed_grid(patches, proj, bias) -> Tensor:
    """Affine patch embedding ``patches @ proj + bias`` -> (..., L, D)."""
    patches, proj, bias = ad.as_tensor(patches), ad.as_tensor(proj), ad.as_tensor(bias)
    if proj.ndim != 2 or patches.shape[-1] != proj.shape[0]:
        raise ad.ShapeError("embed_grid", patches.shape, proj.shape)
    if bias.shape != (proj.shape[1],):
        raise ad.ShapeError("embed_grid", proj.shape, bias.shape)
    return patches @ proj + bias


def blockwise_mask(grid_h: int, grid_w: int, ratio: float, min_block: int = 4,
                   max_block: int | None = None, rng: Rng | None = None,
                   aspect: tuple[float, float] = (0.3, 1 / 0.3), max_attempts: int = 10) -> np.ndarray:
    """Union of random rectangles covering at least ceil(ratio * L) cells.

    Block areas are drawn in [min_block, cap] with cap = min(max_block,
    max(remaining, min_block)), so the final block never overshoots by more
    than max(min_block, max_block) - 1 cells. Returns a boolean (grid_h, grid_w)
    array.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    total = grid_h * grid_w
    if max_block is None:
        max_block = max(min_block, math.ceil(ratio * total))
    if not 1 <= min_block <= max_block <= total:
        raise ValueError(f"need 1 <= min_block ({min_block}) <= max_block ({max_block}) <= L ({total})")
    rng = rng or Rng(0)
    target = math.ceil(ratio * total)
    mask = np.zeros((grid_h, grid_w), dtype=bool)
    log_lo, log_hi = math.log(aspect[0]), math.log(aspect[1])
    count = 0
    stalls = 0
    while count < target:
        remaining = target - count
        cap = min(max_block, max(remaining, min_block))
        added = 0
        for _ in range(max_attempts):
            area = rng.uniform(min_block, cap)
            ar = math.exp(rng.uniform(log_lo, log_hi))
            h = int(round(math.sqrt(area * ar)))
            w = int(round(math.sqrt(area / ar)))
            if not (1 <= h <= grid_h and 1 <= w <= grid_w) or h * w > max_block:
                continue
            top = int(rng.integers(0, grid_h - h + 1))
            left = int(rng.integers(0, grid_w - w + 1))
            new = h * w - int(mask[top:top + h, left:left + w].sum())
            if 0 < new <= cap:
                mask[top:top + h, left:left + w] = True
                added = new
                break
        count += added
        stalls = 0 if added else stalls + 1
        if stalls > 100:
            # grid nearly full of awkward holes: finish with single cells
            free = np.flatnonzero(~mask.reshape(-1))
            pick = rng.choice(free, size=target - count, replace=False)
            mask.reshape(-1)[pick] = True
            count = target
    return mask


def apply_mask(c, mask, mask_token) -> Tensor:
    """Replace cells of ``c`` (..., L, D) flagged in ``mask`` (..., L) by ``mask_token`` (D,)."""
    c, mask_token = ad.as_tensor(c), ad.as_tensor(mask_token)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != c.shape[:-1]:
        raise IndexError(f"mask shape {mask.shape} does not match feature grid {c.shape[:-1]}")
    if mask_token.shape[-1] != c.shape[-1]:
        raise ad.ShapeError("apply_mask", c.shape, mask_token.shape)
    return ad.where(mask[..., None], mask_token.reshape(-1), c)


def mask_indices(mask: np.ndarray) -> np.ndarray:
    return np.flatnonzero(np.asarray(mask).reshape(-1))


def mask_from_indices(indices, grid_h: int, grid_w: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= grid_h * grid_w):
        raise IndexError(f"mask index out of range [0, {grid_h * grid_w})")
    m = np.zeros(grid_h * grid_w, dtype=bool)
    m[idx] = True
    return m.reshape(grid_h, grid_w)
