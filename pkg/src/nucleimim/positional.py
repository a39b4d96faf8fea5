"""Sinusoidal position-and-shape encoding shared by grid patches and nucleus boxes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class PatchGeometry:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0 and 0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"geometry outside the unit square: {self}")


def _check_dim(dim: int) -> None:
    if dim <= 0 or dim % 8:
        raise ValueError(f"embedding dimension must be a positive multiple of 8, got {dim}")


def gamma(t, dim: int) -> np.ndarray:
    """[sin(2^0 pi t), cos(2^0 pi t), ..., sin(2^(dim/8-1) pi t), cos(...)]; vectorised over t."""
    _check_dim(dim)
    t = np.asarray(t, dtype=np.float64)
    freqs = (2.0 ** np.arange(dim // 8)) * np.pi
    ang = t[..., None] * freqs
    out = np.stack([np.sin(ang), np.cos(ang)], axis=-1)
    return out.reshape(t.shape + (dim // 4,))


def encode_geometry(geom: np.ndarray, dim: int) -> np.ndarray:
    """Encode an (..., 4) array of normalised (x, y, w, h) rows into (..., dim)."""
    geom = np.asarray(geom, dtype=np.float64)
    parts = [gamma(geom[..., i], dim) for i in range(4)]
    return np.concatenate(parts, axis=-1)


def encode_position(g: PatchGeometry, dim: int) -> np.ndarray:
    return encode_geometry(np.array([g.x, g.y, g.w, g.h]), dim)


def grid_geometries(grid_h: int, grid_w: int) -> np.ndarray:
    """Row-major (L, 4) normalised geometries of the grid cells."""
    ii, jj = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    return np.stack([(jj.reshape(-1) + 0.5) / grid_w, (ii.reshape(-1) + 0.5) / grid_h,
                     np.full(grid_h * grid_w, 1.0 / grid_w), np.full(grid_h * grid_w, 1.0 / grid_h)], axis=1)


def box_geometries(boxes: np.ndarray, height: int, width: int) -> np.ndarray:
    """(n, 4) pixel boxes -> normalised centre/extent rows, clipped to the image first."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x0, x1 = np.clip(b[:, 0], 0, width), np.clip(b[:, 2], 0, width)
    y0, y1 = np.clip(b[:, 1], 0, height), np.clip(b[:, 3], 0, height)
    return np.stack([(x0 + x1) / (2 * width), (y0 + y1) / (2 * height), (x1 - x0) / width, (y1 - y0) / height], 1)


def add_positions(h0, encodings, cls_pos, pad_mask) -> Tensor:
    """Add positional terms to a (B, S, D) sequence whose slot 0 is CLS.

    ``encodings`` (B, S-1, D) covers every non-CLS slot; rows at PAD slots
    (``pad_mask`` True, shape (B, S)) are ignored so PAD embeddings pass
    through bit-identical. CLS receives the learnable ``cls_pos``.
    """
    h0, cls_pos = ad.as_tensor(h0), ad.as_tensor(cls_pos)
    enc = np.asarray(encodings)
    b, s, d = h0.shape
    if enc.shape != (b, s - 1, d):
        raise ValueError(f"expected {(b, s - 1, d)} positional rows, got {enc.shape}")
    pad = np.asarray(pad_mask, dtype=bool)
    enc = np.where(pad[:, 1:, None], 0.0, enc)
    head = h0[:, :1] + cls_pos.reshape(1, 1, d)
    body = h0[:, 1:]
    # skip the add where padded so PAD rows stay bit-identical
    body = ad.where(pad[:, 1:, None], body, body + Tensor(enc))
    return ad.concat([head, body], axis=1)
