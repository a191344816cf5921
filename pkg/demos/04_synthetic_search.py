"""
Learning visual search on synthetic shelves
===========================================

Render 6x6 shelves of procedural items, let a scripted searcher produce
"human-like" scanpaths, train the model on them with the desk preset and
compare its scanpaths with the baselines. Takes a few CPU minutes.
"""

import logging

import numpy as np

from oat.baselines import BaselineConfig, baseline_scanpaths, mean_training_length
from oat.config import load_run_config
from oat.datasets import synth_dataset
from oat.generation import generate_dataset, heatmap, history_swap_probe
from oat.metrics import aggregate, format_table
from oat.training import train

logging.basicConfig(level=logging.INFO, format="%(message)s")

trials = synth_dataset(6, 6, 20, 100, seed=0, paths_per_trial=8)
print(trials[0].trial_id, "target object", trials[0].target, "first oracle path", trials[0].scanpaths[0])

cfg = load_run_config(preset="desk")
result = train(trials, cfg.train, cfg.model, cfg.pe)
model = result.model
print(f"best epoch {result.best_epoch}, validation loss {result.best_val:.3f}")

train_trials = [trials[i] for i in result.split[0]]
test = [trials[i] for i in result.split[2]]


def by_trial(records):
    out = {}
    for r in records:
        out.setdefault(r.trial_id, []).append(r.object_ids)
    return out


reports = [aggregate(test, by_trial(generate_dataset(model, test, 20, "sample", seed=0)), name="oat")]
mean_len = mean_training_length(train_trials)
for kind in ("random", "center", "wta"):
    recs = baseline_scanpaths(test, BaselineConfig(kind, mean_len), 20)
    reports.append(aggregate(test, by_trial(recs), name=kind))
print(format_table(reports, reports[0].reference))

# where does the model look on one shelf?
trial = test[0]
samples = generate_dataset(model, [trial], 100, "sample", seed=1)
grid = heatmap(samples, trial.layout)
top3 = np.argsort(grid.ravel())[::-1][:3] + 1
print(f"\n{trial.trial_id}: target {trial.target}, most viewed objects {top3.tolist()}")
print(np.round(grid * 100, 1))

# swap one remembered fixation and see how the pull back to that object changes
history = trial.scanpaths[0]
if len(history) >= 3:
    repl = next(o for o in range(1, 37) if o not in history)
    deltas = history_swap_probe(model, trial, history, 0, repl, range(1, len(history) + 1))
    print("\nrelative change in p(original object) after swapping fixation 1:")
    print({s: f"{100 * d:+.1f}%" for s, d in deltas.items()})
