"""
Who benefits from images?
=========================

Stratify held-out pairs by the summed degree of both entities and compare the
model with and without its image channel.
"""

from dataclasses import replace

import numpy as np

from mmea.cli import SYNTH_TRAINING, train_config
from mmea.inference import stratified_evaluate
from mmea.synth import SynthConfig, make_task
from mmea.trainer import fused_similarity, train

###############################################################################
# Clean images, noisy side features. Rare entities have few edges, so without
# images they depend on weak signals.

task, _ = make_task(SynthConfig(seed=0, noise={"image": 0.1, "relation": 1.0, "attribute": 1.0}))
deg = task.source.degree
print("degree: max %d, median %.0f, isolated %d" % (deg.max(), np.median(deg), np.sum(deg == 0)))

cfg = train_config(SYNTH_TRAINING, seed=0)
reports = {}
for label, c in (("with images", cfg), ("without", replace(cfg, disabled=("image",)))):
    state = train(task, c)
    reports[label] = stratified_evaluate(fused_similarity(state), task.test_pivots, task)

###############################################################################
# Quintiles run from the sparsest pairs to the best connected ones.

print("DegSum range   with   without  gain")
for a, b in zip(reports["with images"].per_stratum, reports["without"].per_stratum):
    print(f"{a['lo']:4d}-{a['hi']:<4d}    {a['h1']:.3f}  {b['h1']:.3f}   {a['h1'] - b['h1']:+.3f}")
