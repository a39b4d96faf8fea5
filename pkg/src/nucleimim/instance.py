"""Per-nucleus features: RoI Align on the feature map, conv reduction, masked-instance set."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def roi_sample_points(boxes: np.ndarray, patch: int, k: int, samples_per_bin: int = 2):
    """Sampling positions, in feature-cell-centre units, for RoI Align.

    ``boxes`` is (n, 4) in image pixels. Returns ys, xs of shape
    (n, k, k, s*s).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) / patch
    s = samples_per_bin
    x0, y0, x1, y1 = (boxes[:, i][:, None] for i in range(4))
    frac = (np.arange(k)[:, None] + (np.arange(s)[None, :] + 0.5) / s).reshape(-1) / k  # (k*s,)
    # half-cell shift: cell j covers [j, j+1) and is centred at j + 0.5
    xs = x0 + frac[None, :] * (x1 - x0) - 0.5  # (n, k*s)
    ys = y0 + frac[None, :] * (y1 - y0) - 0.5
    n = boxes.shape[0]
    ys = ys.reshape(n, k, 1, s, 1)
    xs = xs.reshape(n, 1, k, 1, s)
    ys, xs = np.broadcast_arrays(ys, xs)
    return ys.reshape(n, k, k, s * s), xs.reshape(n, k, k, s * s)


def roi_align(c, boxes, batch_index, patch: int, k: int = 3, samples_per_bin: int = 2) -> Tensor:
    """RoI Align over a (B, gh, gw, D) feature map.

    Boxes are image-pixel (x_min, y_min, x_max, y_max), mapped to feature
    coordinates by dividing by ``patch`` with no quantisation. Each of the
    k x k bins averages samples_per_bin**2 bilinear samples. Returns
    (n, k, k, D).
    """
    c = ad.as_tensor(c)
    if c.ndim == 3:
        c = c.reshape((1,) + c.shape)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    bi = np.asarray(batch_index, dtype=np.int64).reshape(-1)
    if k < 1:
        raise ValueError("k must be >= 1")
    _, gh, gw, d = c.shape
    n = boxes.shape[0]
    if bi.shape[0] != n:
        raise ValueError("one batch index per box required")
    lo = np.array([0.0, 0.0, 0.0, 0.0])
    hi = np.array([gw * patch, gh * patch, gw * patch, gh * patch], dtype=np.float64)
    clipped = np.clip(boxes, lo, hi)
    bad = (clipped[:, 2] <= clipped[:, 0]) | (clipped[:, 3] <= clipped[:, 1])
    if bad.any():
        raise ValueError(f"box {boxes[np.argmax(bad)].tolist()} lies outside the feature-map extent")
    ys, xs = roi_sample_points(clipped, patch, k, samples_per_bin)
    ss = samples_per_bin * samples_per_bin
    bidx = np.broadcast_to(bi[:, None, None, None], ys.shape)
    vals = ad.bilinear_sample(c, bidx.reshape(-1), ys.reshape(-1), xs.reshape(-1))
    return vals.reshape(n, k, k, ss, d).mean(axis=3)


def embed_instance(c_ins, kernel, bias) -> Tensor:
    """Valid k x k convolution of (n, k, k, D) features to (n, D) embeddings."""
    c_ins, kernel = ad.as_tensor(c_ins), ad.as_tensor(kernel)
    if c_ins.ndim == 3:
        c_ins = c_ins.reshape((1,) + c_ins.shape)
    if kernel.shape[:2] != c_ins.shape[1:3] or kernel.shape[2] != c_ins.shape[3]:
        raise ad.ShapeError("embed_instance", c_ins.shape, kernel.shape)
    out = ad.conv2d(c_ins, kernel, bias)
    return out.reshape(out.shape[0], out.shape[-1])


def masked_instance_set(boxes, mask: np.ndarray, patch: int) -> np.ndarray:
    """Indices of boxes whose overlap with the union of masked patches has positive area."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    mask = np.asarray(mask, dtype=bool)
    rows, cols = np.nonzero(mask)
    if boxes.shape[0] == 0 or rows.size == 0:
        return np.zeros(0, dtype=np.int64)
    px0, py0 = cols * patch, rows * patch
    ox = np.minimum(boxes[:, None, 2], px0[None] + patch) - np.maximum(boxes[:, None, 0], px0[None])
    oy = np.minimum(boxes[:, None, 3], py0[None] + patch) - np.maximum(boxes[:, None, 1], py0[None])
    hit = ((ox > 0) & (oy > 0)).any(axis=1)
    return np.flatnonzero(hit)
