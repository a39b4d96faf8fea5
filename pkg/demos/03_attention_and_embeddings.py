"""
Looking inside the encoder
==========================

Reads the CLS attention row of a briefly pretrained model and writes the
per-nucleus representations to CSV.
"""

import numpy as np

from nucleimim.config import desk_preset, from_dict
from nucleimim.training import export_attention, export_embeddings, pretrain
from nucleimim.workflow import experiment_data

cfg = from_dict({"train": {"epochs": 2}, "data": {"pretrain_images": 64, "labeled_images": 8}}, desk_preset())
pre, train, test = experiment_data(cfg, seed=0)
state = pretrain(cfg, pre, seed=0)

# attention of CLS over the 8x8 grid and the nuclei in the last layer
sample = train[0]
att = export_attention(state.params, cfg, sample, layer=cfg.model.layers - 1, head=0, query="cls")
np.set_printoptions(precision=3, suppress=True)
print("self", round(att["cls"], 4))
print(att["grid"])
print("nuclei", att["instances"])
# PAD slots are excluded, so the visible parts sum to one
print("total", att["cls"] + att["grid"].sum() + att["instances"].sum())

# one CSV row per nucleus: sample id, box index, label, then D values
text = export_embeddings(state.params, cfg, train)
header, first = text.splitlines()[:2]
print(header[:60], "...")
print(first[:60], "...")
print(len(text.splitlines()) - 1, "rows for", sum(len(s.boxes) for s in train), "nuclei")
