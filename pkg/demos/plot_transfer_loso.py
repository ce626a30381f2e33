"""
Transfer to attention classes and leave-one-subject-out evaluation
==================================================================

The attention classifier reuses the gaze network: convolutional weights are
copied and frozen, the fully connected layer is copied and stays trainable, and
a fresh three-way head is attached. Each LOSO fold trains on every subject but
one and tests on the held-out subject.
"""

from pathlib import Path

import numpy as np

from gazeattn.datasets import generate_synthetic, split_by_subject
from gazeattn.eval import format_table, render_report, run_loso
from gazeattn.model import (
    BackboneConfig,
    TrainConfig,
    build_gaze_model,
    train_attention,
    train_gaze,
    transfer_to_attention,
)

OUT = Path(__file__).with_name("_output") / "loso"
ds = generate_synthetic(OUT / "data", subjects=4, per_class=15, seed=3,
                        gaze_subjects=10, gaze_per_subject=80)

# %%
# Gaze stage first (see the gaze training demo for details).
train, val = split_by_subject(ds.gaze, ds.gaze.subjects[-2:])
gaze = train_gaze(build_gaze_model(BackboneConfig("tiny")), train, val,
                  TrainConfig.gaze_defaults(lr=0.01, momentum=0.9, max_epochs=20))

# %%
# Transfer: only the fully connected layer and the new head will change.
model = transfer_to_attention(gaze, seed=0)
print("frozen:", model.frozen_names())
print("trainable:", [n for n, p in model.named_parameters() if p.requires_grad])


def trainer(manifest, seed):
    m = transfer_to_attention(gaze, seed)
    train_attention(m, manifest, TrainConfig.attention_defaults(max_epochs=20))
    return m


# %%
# Four subjects give four folds. ``render_report`` writes the table, a CSV and
# one confusion-matrix heatmap per fold.
report = run_loso(ds.attention, trainer, seed=0,
                  on_fold=lambda s, m, r: print(f"fold {s}: accuracy {r.accuracy:.3f}"))
print(format_table(report))
files = render_report(report, OUT)
print("wrote", sorted(str(p.name) for p in files.values()))
print("confusion of first fold:\n", np.array(report.folds[0].confusion.to_list()))
