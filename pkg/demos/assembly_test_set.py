"""
Building a test set from annotated assembly video
=================================================

Assembly sessions are annotated as time segments with an activity label.
Three activities map to attention classes (assembling -> Table, waiting and
looking at the cobot -> Cobot, waiting distracted -> Distracted). From each
segment the first, middle and last frame are taken; segments flagged for
poor visibility and frames without a detected face are rejected and logged.
"""

from pathlib import Path

import numpy as np

from gazeattn.datasets import (
    Activity,
    ArrayFrames,
    QualityFlag,
    SegmentAnnotation,
    SyntheticRenderer,
    build_assembly_test_set,
    segment_frame_indices,
)
from gazeattn.types import GazeDirection
from gazeattn.vision import ContrastDetector

OUT = Path(__file__).with_name("_output") / "assembly"

# %%
# A fake 200-frame video. Blank frames (60-64) simulate detector misses.
renderer, rng = SyntheticRenderer(side=96), np.random.default_rng(0)
gaze_by_frame = [(-0.5, 0.0)] * 80 + [(0.0, 0.6)] * 60 + [(0.4, -0.5)] * 60
frames = [renderer.render(GazeDirection(*g), (70, 90, 110), rng) for g in gaze_by_frame]
for i in range(60, 65):
    frames[i] = np.zeros_like(frames[i])
video = ArrayFrames(frames, fps=25.0, name="session01.mp4")

segments = [
    SegmentAnnotation("session01.mp4", 0, 40, Activity.ASSEMBLING, id="s1"),
    SegmentAnnotation("session01.mp4", 41, 62, Activity.ASSEMBLING, id="s2"),
    SegmentAnnotation("session01.mp4", 80, 139, Activity.WAITING_LOOKING_AT_COBOT, id="s3"),
    SegmentAnnotation("session01.mp4", 140, 199, Activity.WAITING_DISTRACTED, id="s4"),
    SegmentAnnotation("session01.mp4", 150, 160, Activity.WAITING_DISTRACTED,
                      frozenset({QualityFlag.BLURRY}), id="s5"),
    SegmentAnnotation("session01.mp4", 0, 5, Activity.GATHERING_PARTS, id="s6"),
]
for s in segments:
    print(s.id, s.activity.value, segment_frame_indices(s))

# %%
# Gathering parts has no attention label and is skipped. The blurry segment is
# rejected without decoding, and frame 62 of s2 has no face.
test, rejections = build_assembly_test_set(segments, {"session01.mp4": video}, ContrastDetector(), OUT)
print(len(test), "crops;", len(rejections), "rejections", rejections.counts())
for r in test.records:
    print(" ", r.image, r.label.label)
rejections.write_csv(OUT / "rejections.csv")
