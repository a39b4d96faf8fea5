"""
Checking gradients end to end
=============================

Compares reverse-mode gradients of the full pretraining loss with central
finite differences, in float64, for every parameter tensor of the desk model.
"""

import numpy as np

from nucleimim import autodiff as ad
from nucleimim.config import desk_preset
from nucleimim.workflow import full_pipeline_gradcheck

# a single op first: the error is |analytic - numeric| / max(1, |analytic|)
with ad.precision(np.float64):
    x = np.random.default_rng(0).normal(size=(3, 4))
    print("softmax-CE", ad.grad_check(lambda t: ad.cross_entropy(t, np.array([0, 2, 1])), x))

# the whole pipeline: embed, mask, RoI Align, encoder, both heads, loss
report = full_pipeline_gradcheck(desk_preset(), coords_per_tensor=8)
print(report.to_dict())
for name, err in sorted(report.per_tensor.items(), key=lambda kv: -kv[1])[:5]:
    print("%-20s %.2e" % (name, err))
