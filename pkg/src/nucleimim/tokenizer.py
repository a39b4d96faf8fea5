"""Discrete visual tokenizers: a deterministic luminance quantiser and a k-means VQ codebook."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import NucleusBox, crop_resize, resize
from .rng import Rng

log = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])
INSTANCE_CROP = 32


def _cells(image: np.ndarray, rows: int, cols: int) -> np.ndarray:
    h, w, c = image.shape
    if h % rows or w % cols:
        raise ValueError(f"image {h}x{w} not divisible into a {rows}x{cols} token grid")
    ph, pw = h // rows, w // cols
    return image.reshape(rows, ph, cols, pw, c).transpose(0, 2, 1, 3, 4).reshape(rows * cols, ph, pw, c)


class LuminanceTokenizer:
    """token = floor(mean luminance * |V|), clamped to |V| - 1."""

    kind = "luminance"

    def __init__(self, vocab_size: int):
        self.vocab_size = int(vocab_size)

    def encode_cells(self, cells: np.ndarray) -> np.ndarray:
        lum = (cells @ LUMA).reshape(cells.shape[0], -1).mean(axis=1)
        return np.clip(np.floor(lum * self.vocab_size), 0, self.vocab_size - 1).astype(np.int64)


@dataclass
class Codebook:
    centroids: np.ndarray
    cell_size: int
    iterations: int = 0
    inertia_trace: list[float] = field(default_factory=list)

    @property
    def vocab_size(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def nearest_centroid(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the closest centroid per row (squared Euclidean; ties -> lowest index)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(x.shape[0], dtype=np.int64)
    step = max(1, 2_000_000 // max(1, centroids.size))
    for i in range(0, x.shape[0], step):
        diff = x[i:i + step, None, :] - centroids[None]
        out[i:i + step] = np.einsum("nkd,nkd->nk", diff, diff).argmin(axis=1)
    return out


class VQTokenizer:
    """Nearest-centroid tokens over flattened cell pixels.

    Cells of any size are resampled to ``codebook.cell_size`` square before
    lookup, so one codebook serves both grid patches and nucleus crops.
    """

    kind = "vq"

    def __init__(self, codebook: Codebook):
        self.codebook = codebook

    @property
    def vocab_size(self) -> int:
        return self.codebook.vocab_size

    def prepare_cells(self, cells: np.ndarray) -> np.ndarray:
        s = self.codebook.cell_size
        if cells.shape[1:3] != (s, s):
            cells = np.stack([resize(cell, s, s) for cell in cells])
        return cells.reshape(cells.shape[0], -1)

    def encode_cells(self, cells: np.ndarray) -> np.ndarray:
        return nearest_centroid(self.prepare_cells(cells), self.codebook.centroids)


def tokenize_image(image: np.ndarray, grid_shape: tuple[int, int], tokenizer) -> np.ndarray:
    rows, cols = grid_shape
    return tokenizer.encode_cells(_cells(image, rows, cols)).reshape(rows, cols)


def tokenize_instance(image: np.ndarray, box: NucleusBox | tuple, tokenizer, t: int = 2,
                      crop: int = INSTANCE_CROP) -> np.ndarray:
    """Crop the box, resize to crop x crop, tokenise into a t x t grid."""
    region = box.as_tuple() if isinstance(box, NucleusBox) else tuple(box)
    if not (region[2] > region[0] and region[3] > region[1]):
        raise ValueError(f"degenerate nucleus box {region}")
    patch = crop_resize(image, region, crop, crop)
    return tokenize_image(patch, (t, t), tokenizer)


def _kmeans_pp(x: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    n = x.shape[0]
    first = int(rng.integers(0, n))
    centers = [x[first]]
    d2 = ((x - x[first]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(0, n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.uniform() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(1))
    return np.array(centers)


def train_vq_codebook(samples: np.ndarray, vocab_size: int, iterations: int, rng: Rng,
                      cell_size: int | None = None) -> Codebook:
    """Lloyd's k-means with k-means++ seeding over (n, dim) flattened cells.

    ``inertia_trace[i]`` is the quantisation error after i Lloyd steps
    (entry 0 is the initialisation); it never increases.
    """
    x = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    if cell_size is None:
        cell_size = int(round(np.sqrt(x.shape[1] / 3)))
    if x.shape[0] < vocab_size:
        log.warning("only %d training vectors for %d centroids; duplicating centroids", x.shape[0], vocab_size)
        reps = np.resize(np.arange(x.shape[0]), vocab_size)
        return Codebook(x[reps].copy(), cell_size, 0, [0.0])
    centroids = _kmeans_pp(x, vocab_size, rng)
    assign = nearest_centroid(x, centroids)
    trace = [float(((x - centroids[assign]) ** 2).sum())]
    steps = 0
    for _ in range(iterations):
        counts = np.bincount(assign, minlength=vocab_size)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        keep = counts > 0
        centroids = centroids.copy()
        centroids[keep] = sums[keep] / counts[keep, None]
        new_assign = nearest_centroid(x, centroids)
        steps += 1
        trace.append(float(((x - centroids[new_assign]) ** 2).sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return Codebook(centroids, cell_size, steps, trace)


def collect_training_cells(images, grid_shape: tuple[int, int], boxes_per_image=None, cell_size: int | None = None,
                           t: int = 2, crop: int = INSTANCE_CROP) -> np.ndarray:
    """Flattened grid cells, plus resized nucleus-crop cells when boxes are given."""
    rows, cols = grid_shape
    out = []
    for i, img in enumerate(images):
        cells = _cells(img, rows, cols)
        s = cell_size or cells.shape[1]
        if cells.shape[1] != s:
            cells = np.stack([resize(c, s, s) for c in cells])
        out.append(cells.reshape(cells.shape[0], -1))
        if boxes_per_image is not None:
            for b in boxes_per_image[i]:
                region = b.as_tuple() if isinstance(b, NucleusBox) else tuple(b)
                patch = crop_resize(img, region, crop, crop)
                sub = _cells(patch, t, t)
                sub = np.stack([resize(c, s, s) for c in sub])
                out.append(sub.reshape(sub.shape[0], -1))
    return np.concatenate(out, axis=0) if out else np.zeros((0, 0))
