"""Slow, obviously-correct reference implementations used by the tests."""

import numpy as np


def tent_sample(fmap, y, x):
    """Bilinear sample of an (h, w, d) map at a cell-centred (y, x), edges clamped, via tent weights over every cell."""
    gh, gw, _ = fmap.shape
    y, x = np.clip(y, 0, gh - 1), np.clip(x, 0, gw - 1)
    wy = np.maximum(0.0, 1.0 - np.abs(y - np.arange(gh)))
    wx = np.maximum(0.0, 1.0 - np.abs(x - np.arange(gw)))
    return np.einsum("i,j,ijd->d", wy, wx, fmap)


def roi_oracle(fmap, box, patch, k, s):
    """Average of s*s dense bilinear samples per bin of a k*k grid over a pixel box."""
    x0, y0, x1, y1 = np.asarray(box, float) / patch
    out = np.zeros((k, k, fmap.shape[-1]))
    for by in range(k):
        for bx in range(k):
            acc = 0.0
            for sy in range(s):
                for sx in range(s):
                    py = y0 + (by + (sy + 0.5) / s) * (y1 - y0) / k - 0.5
                    px = x0 + (bx + (sx + 0.5) / s) * (x1 - x0) / k - 0.5
                    acc = acc + tent_sample(fmap, py, px)
            out[by, bx] = acc / (s * s)
    return out
