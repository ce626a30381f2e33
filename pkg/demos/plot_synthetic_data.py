"""
Synthetic gaze and attention data
=================================

Real gaze corpora are large and licence-bound, so every training test in this
package runs on rendered images instead. A bright disc on a tinted background
stands in for the eyes: its offset from the centre is proportional to yaw
(horizontal) and pitch (vertical). Attention zones are regions of gaze space.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from gazeattn.datasets import SyntheticRenderer, ZoneGeometry, generate_synthetic
from gazeattn.types import GazeDirection

OUT = Path(__file__).with_name("_output") / "synthetic"

# %%
# Write a small dataset: gaze.jsonl and attention.jsonl plus PNG images.
ds = generate_synthetic(OUT, subjects=4, per_class=5, seed=0, gaze_subjects=4, gaze_per_subject=20)
print(len(ds.gaze), "gaze samples,", len(ds.attention), "attention samples")
print("subjects:", ds.attention.subjects)
print("first record:", ds.attention.records[0])

# %%
# The zone map: looking down is Table, looking right (positive yaw) is Cobot,
# anything else counts as Distracted.
geom = ZoneGeometry()
pitch, yaw = np.meshgrid(np.linspace(-0.8, 0.8, 161), np.linspace(-0.8, 0.8, 161), indexing="ij")
zones = np.vectorize(lambda p, y: int(geom.zone(GazeDirection(p, y))))(pitch, yaw)

renderer, rng = SyntheticRenderer(), np.random.default_rng(0)
fig, axes = plt.subplots(1, 4, figsize=(12, 3))
axes[0].imshow(zones, origin="lower", extent=(-0.8, 0.8, -0.8, 0.8), cmap="Set2")
axes[0].set(xlabel="yaw (rad)", ylabel="pitch (rad)", title="zones")
for ax, (name, g) in zip(axes[1:], [("Table", (-0.5, 0.0)), ("Cobot", (0.1, 0.6)),
                                     ("Distracted", (0.4, -0.5))]):
    ax.imshow(renderer.render(GazeDirection(*g), (90, 70, 60), rng))
    ax.set_title(f"{name} {g}")
    ax.axis("off")
fig.tight_layout()
fig.savefig(OUT / "zones.png", dpi=100)
print("wrote", OUT / "zones.png")
