"""
Streaming attention and the cobot policy
========================================

At run time each frame is classified, a sliding majority vote removes
single-frame flicker, and a dwell-time rule decides when the robot changes
behaviour:

* Table (operator still assembling): proceed to the next part.
* Cobot (operator waiting on the robot): increase pace.
* Distracted: normal pace, with a distracted flag.

Here the classifier is replaced by a scripted event stream so the smoothing and
hysteresis are easy to see. Logs are JSON lines and replay byte for byte.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from gazeattn.runtime import AttentionEvent, read_event_log, replay, smooth_majority, write_log
from gazeattn.types import AttentionClass, ClassProbabilities

OUT = Path(__file__).with_name("_output") / "stream"
FPS = 25.0

# %%
# Script: 3 s of Table, a 1 s glance at the cobot, 2 s of Table, then 4 s of
# waiting on the cobot. 10% of frames get a random wrong label and 5% lose the face.
rng = np.random.default_rng(0)
script = ([AttentionClass.TABLE] * 75 + [AttentionClass.COBOT] * 25
          + [AttentionClass.TABLE] * 50 + [AttentionClass.COBOT] * 100)
events = []
for i, label in enumerate(script):
    if rng.random() < 0.05:
        events.append(AttentionEvent(i, i / FPS, None))
        continue
    if rng.random() < 0.10:
        label = AttentionClass(int(rng.integers(0, 3)))
    p = np.full(3, 0.1)
    p[int(label)] = 0.8
    events.append(AttentionEvent(i, i / FPS, ClassProbabilities.from_sequence(p)))

states = list(smooth_majority(events, window=7))
commands = replay(events, window=7, dwell=2.0)
for c in commands:
    if c.switched:
        print(f"t={c.timestamp:5.2f}s  -> {c.command.value}")

# %%
# The 1 s glance is shorter than the 2 s dwell and does not change the command.
fig, ax = plt.subplots(figsize=(8, 3))
t = [e.timestamp for e in events]
ax.scatter(t, [-1 if e.label is None else int(e.label) for e in events], s=4, label="raw")
ax.step(t, [int(s.label) for s in states], where="post", label="smoothed")
ax.set_yticks([-1, 0, 1, 2], ["no face", "Cobot", "Table", "Distracted"])
for c in commands:
    if c.switched:
        ax.axvline(c.timestamp, color="k", lw=0.8)
ax.set_xlabel("time (s)")
ax.legend(loc="upper left")
fig.tight_layout()
OUT.mkdir(parents=True, exist_ok=True)
fig.savefig(OUT / "timeline.png", dpi=100)

# %%
# Replay from the event log reproduces the command log exactly.
ev_log = write_log(events, OUT / "events.jsonl")
a = write_log(commands, OUT / "commands.jsonl").read_bytes()
b = write_log(replay(read_event_log(ev_log)), OUT / "commands_replayed.jsonl").read_bytes()
print("replay identical:", a == b)
