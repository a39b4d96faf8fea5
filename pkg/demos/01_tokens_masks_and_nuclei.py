"""
From an annotated image to prediction targets
=============================================

Walks one synthetic image through the pieces that build the pretraining
targets: grid tokens, a blockwise mask, and the nuclei that the mask touches.
"""

import numpy as np

from nucleimim.config import desk_preset
from nucleimim.data import SyntheticConfig, generate_synthetic
from nucleimim.instance import masked_instance_set
from nucleimim.patching import blockwise_mask
from nucleimim.rng import Rng
from nucleimim.tokenizer import LuminanceTokenizer, tokenize_image, tokenize_instance
from nucleimim.training import build_tokenizer

cfg = desk_preset()
m = cfg.model

# a handful of 64x64 images with labelled nucleus boxes
samples, manifest = generate_synthetic(SyntheticConfig(n_images=32), Rng(0))
s = samples[0]
print("image", s.image.shape, "nuclei", len(s.boxes), "labels", [b.label for b in s.boxes])

# the deterministic luminance tokenizer: one token per 8x8 cell
lum = LuminanceTokenizer(m.vocab_size)
print(tokenize_image(s.image, (m.grid, m.grid), lum))

# the k-means codebook learns its cells from the corpus instead
vq = build_tokenizer(cfg, samples, Rng(0).child("tokenizer"))
grid_tokens = tokenize_image(s.image, (m.grid, m.grid), vq)
print("distinct VQ tokens in this image:", len(np.unique(grid_tokens)))

# each nucleus crop is resampled and cut into t x t tokens from the same codebook
box = s.boxes[0]
print("nucleus 0 tokens", tokenize_instance(s.image, box, vq, t=m.inst_tokens).tolist())

# blockwise masking covers at least 40% of the 64 cells with rectangles
mask = blockwise_mask(m.grid, m.grid, cfg.mask.ratio, cfg.mask.min_block, rng=Rng(1))
print("masked cells", int(mask.sum()), "of", mask.size)
print(mask.astype(int))

# a nucleus joins the instance objective when its box overlaps any masked cell
boxes = np.array([b.as_tuple() for b in s.boxes])
print("masked nuclei", masked_instance_set(boxes, mask, m.patch_size).tolist())
