"""
Growing the seed set with probation
===================================

With only 5% labelled pairs, mutual nearest neighbours proposed during
training must survive several consecutive rounds before they become pivots.
"""

from dataclasses import replace

from mmea.cli import SYNTH_TRAINING, train_config
from mmea.synth import SynthConfig, make_task
from mmea.trainer import evaluate_state, train

task, _ = make_task(SynthConfig(seed=2, seed_fraction=0.05))
gold = set(map(tuple, task.gold_pairs().tolist()))
cfg = train_config(SYNTH_TRAINING, seed=2)

###############################################################################
# The callback sees the ledger after each epoch. We log it every 50 epochs
# of the second phase.

trace = []


def watch(state, record):
    if record.epoch >= cfg.base_epochs and (record.epoch + 1) % 50 == 0:
        perm = state.ledger.permanent
        correct = sum(p in gold for p in perm)
        trace.append((record.epoch + 1, len(perm), correct, len(state.ledger.candidates)))


state = train(task, cfg, callback=watch)
print("epoch  permanent  correct  on probation")
for row in trace:
    print("%5d  %9d  %7d  %12d" % row)

###############################################################################
# The same model without the second phase, for comparison.

plain = train(task, replace(cfg, il_epochs=0))
print("H@1 with IL %.3f, without %.3f" % (evaluate_state(state, task).hits_at_1,
                                           evaluate_state(plain, task).hits_at_1))
