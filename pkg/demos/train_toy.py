"""
Pretraining on the toy dataset
==============================

A short end-to-end run: generate the synthetic shapes, pretrain with the
desk preset, then probe each stage and draw a final-stage attention map.
Pass a step count on the command line for a longer run (default 30).
"""

import sys
import tempfile
from pathlib import Path

import numpy as np
import torch

from detco.augment import resize_bilinear
from detco.config import desk_config
from detco.data import ToySpec, generate_toy
from detco.evaluation import probe, random_init_probe
from detco.model import to_tensor
from detco.trainer import run
from detco.viz import attention_map, overlay, plot_metrics

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 30
cfg = desk_config(**{"trainer.total_steps": steps, "trainer.checkpoint_every": max(steps, 1)})
ds = generate_toy(ToySpec(8, 40, 96, seed=1))
out = Path(tempfile.mkdtemp(prefix="detco-demo-"))

# the untrained encoder is the baseline every probe is compared with
before = random_init_probe(cfg, ds.images, ds.labels)
print("random init:", {k: round(v, 3) for k, v in before.accuracy.items()})

result = run(cfg, ds.images, out)
print("run directory:", result.run_dir)

after = probe(result.state.query, ds.images, ds.labels, cfg.eval, side=cfg.augment.global_side)
print(f"after {steps} steps:", {k: round(v, 3) for k, v in after.accuracy.items()})

plot_metrics(result.metrics_log, result.run_dir / "plots")

# Res5 activations, reduced over channels and laid over the input
img = ds.images[0]
with torch.no_grad():
    feats = result.state.query.eval().stage_features(to_tensor([resize_bilinear(img, 64, 64)]))
amap = attention_map(feats.f5[0].numpy())
print("attention map", amap.values.shape, "range", float(np.min(amap.values)), float(np.max(amap.values)))
print("overlay:", overlay(img, amap, result.run_dir / "attention.png"))
