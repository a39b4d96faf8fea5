"""
Pretrain, probe and fine-tune
=============================

A shortened version of the desk experiment: pretrain the 2-layer encoder on
synthetic images, then read the nuclei representations with a frozen linear
probe and with full fine-tuning. Pass an epoch count on the command line for
a longer run (the acceptance suite uses 30).
"""

import sys

from nucleimim.config import desk_preset, from_dict
from nucleimim.training import finetune_classifier, linear_probe, pretrain
from nucleimim.workflow import experiment_data

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 3
cfg = from_dict({"train": {"epochs": epochs}, "data": {"pretrain_images": 128}}, desk_preset())

# pretraining images, plus a labelled corpus split in half for evaluation
pre, train, test = experiment_data(cfg, seed=0)
print(len(pre), "pretraining images;", len(train), "/", len(test), "labelled train/test images")

# each epoch reports the total loss and its grid and nucleus parts
state = pretrain(cfg, pre, seed=0, on_epoch=lambda r: print(r))

# frozen encoder and an affine map on per-nucleus outputs
probe = linear_probe(state.params, cfg, train, test, cfg.data.n_classes)
print("probe accuracy %.3f  macro-F1 %.3f" % (probe.metrics.accuracy, probe.metrics.macro_f1))

# every encoder weight trains; the classifier starts from the probe solution
ft = finetune_classifier(state.params, cfg, train, test, seed=0, n_classes=cfg.data.n_classes)
print("fine-tuned accuracy %.3f  macro-F1 %.3f" % (ft.metrics.accuracy, ft.metrics.macro_f1))
print("fine-tuning loss per epoch", [round(x, 3) for x in ft.metrics.loss_trace])
