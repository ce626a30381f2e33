"""Streaming attention recognition and the cobot adaptation policy.

Three stages, each a generator over the previous one::

    frames -> stream_classify -> AttentionEvent
           -> smooth_majority -> SmoothedState
           -> adapt_policy    -> CommandState

Event and command logs are JSON-lines; replaying an event log through the last
two stages reproduces the command log byte for byte.
"""

from __future__ import annotations

import json
import queue
import threading
from collections import Counter, deque
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import NoFace
from .types import AttentionClass, ClassProbabilities
from .vision import DEFAULT_MARGIN, FaceDetector, detect_and_crop, resize_to_input

DEFAULT_WINDOW = 7
DEFAULT_DWELL = 2.0


class CobotCommand(str, Enum):
    PROCEED_NEXT_PART = "ProceedNextPart"
    INCREASE_PACE = "IncreasePace"
    NORMAL_PACE = "NormalPace"


# Table: operator still assembling, so keep working rather than wait visibly.
# Cobot: operator is waiting on the robot, so speed up.
POLICY = {
    AttentionClass.TABLE: CobotCommand.PROCEED_NEXT_PART,
    AttentionClass.COBOT: CobotCommand.INCREASE_PACE,
    AttentionClass.DISTRACTED: CobotCommand.NORMAL_PACE,
}


@dataclass(frozen=True)
class AttentionEvent:
    frame: int
    timestamp: float
    probabilities: Optional[ClassProbabilities]

    @property
    def label(self) -> Optional[AttentionClass]:
        return None if self.probabilities is None else self.probabilities.argmax()

    @property
    def no_face(self) -> bool:
        return self.probabilities is None

    def to_json(self) -> dict:
        label = self.label
        return {"frame": self.frame, "t": self.timestamp,
                "probs": None if self.probabilities is None else list(self.probabilities.values),
                "class": None if label is None else label.label}

    @classmethod
    def from_json(cls, d: dict) -> "AttentionEvent":
        probs = d.get("probs")
        return cls(int(d["frame"]), float(d["t"]),
                   None if probs is None else ClassProbabilities.from_sequence(probs))


@dataclass(frozen=True)
class SmoothedState:
    frame: int
    timestamp: float
    label: AttentionClass
    window: int
    support: int

    def to_json(self) -> dict:
        return {"frame": self.frame, "t": self.timestamp, "class": self.label.label,
                "window": self.window, "support": self.support}


@dataclass(frozen=True)
class CommandState:
    frame: int
    timestamp: float
    command: CobotCommand
    distracted: bool
    switched: bool

    def to_json(self) -> dict:
        return {"frame": self.frame, "t": self.timestamp, "command": self.command.value,
                "distracted": self.distracted, "switched": self.switched}


# -- stages -------------------------------------------------------------------------


def _frames_with_time(frames, fps: float) -> Iterator[tuple[int, float, np.ndarray]]:
    if hasattr(frames, "read") and hasattr(frames, "__len__"):
        rate = float(getattr(frames, "fps", fps) or fps)
        for i in range(len(frames)):
            yield i, i / rate, frames.read(i)
    else:
        for i, image in enumerate(frames):
            yield i, i / fps, image


def stream_classify(
    frames,
    model,
    detector: FaceDetector,
    fps: float = 25.0,
    margin: float = DEFAULT_MARGIN,
) -> Iterator[AttentionEvent]:
    """One event per frame, in order. Frames without a face yield a no-face event.

    ``frames`` is a frame source (``read``/``len``/``fps``) or any iterable of raw
    RGB images, timestamped at ``index / fps``.
    """
    from .model import predict_attention

    side = model.backbone.side
    for index, ts, image in _frames_with_time(frames, fps):
        try:
            crop = detect_and_crop(image, detector, margin)
        except NoFace:
            yield AttentionEvent(index, ts, None)
            continue
        (probs,) = predict_attention(model, [resize_to_input(crop, side)])
        yield AttentionEvent(index, ts, probs)


def smooth_majority(events: Iterable[AttentionEvent], window: int = DEFAULT_WINDOW) -> Iterator[SmoothedState]:
    """Sliding plurality vote over the last ``window`` classified events.

    No-face events do not vote; they carry the previous state forward. While the
    window is still filling a tie resolves to Distracted; afterwards a tie keeps
    the previous state.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    votes: deque[AttentionClass] = deque(maxlen=window)
    counts: Counter = Counter()
    current: Optional[AttentionClass] = None
    for ev in events:
        label = ev.label
        if label is not None:
            votes.append(label)
            counts = Counter(votes)
            top = max(counts.values())
            leaders = [c for c in AttentionClass if counts[c] == top]
            if len(leaders) == 1:
                current = leaders[0]
            elif len(votes) < window or current is None:
                current = AttentionClass.DISTRACTED
        elif current is None:
            current = AttentionClass.DISTRACTED
        yield SmoothedState(ev.frame, ev.timestamp, current, window, counts[current])


def adapt_policy(states: Iterable[SmoothedState], dwell: float = DEFAULT_DWELL) -> Iterator[CommandState]:
    """Map smoothed attention to cobot commands with dwell-time hysteresis.

    The first state sets the command immediately. Later, a different state must
    persist for at least ``dwell`` seconds before the command switches.
    """
    if dwell < 0:
        raise ValueError(f"dwell must be >= 0, got {dwell}")
    active: Optional[AttentionClass] = None
    pending: Optional[AttentionClass] = None
    since = 0.0
    for s in states:
        switched = False
        if active is None:
            active, switched = s.label, True
        elif s.label == active:
            pending = None
        else:
            if s.label != pending:
                pending, since = s.label, s.timestamp
            if s.timestamp - since >= dwell:
                active, pending, switched = s.label, None, True
        yield CommandState(s.frame, s.timestamp, POLICY[active],
                           active is AttentionClass.DISTRACTED, switched)


def run_pipeline(
    frames,
    model,
    detector: FaceDetector,
    window: int = DEFAULT_WINDOW,
    dwell: float = DEFAULT_DWELL,
    fps: float = 25.0,
    margin: float = DEFAULT_MARGIN,
    threaded: bool = False,
) -> tuple[list[AttentionEvent], list[SmoothedState], list[CommandState]]:
    """Run all three stages. With ``threaded=True`` each stage runs in its own thread,
    connected by FIFO queues; the output is identical either way."""
    events: list[AttentionEvent] = []
    states: list[SmoothedState] = []

    def tee(it, sink):
        for item in it:
            sink.append(item)
            yield item

    if not threaded:
        ev = tee(stream_classify(frames, model, detector, fps, margin), events)
        st = tee(smooth_majority(ev, window), states)
        return events, states, list(adapt_policy(st, dwell))

    done = object()
    q1: queue.Queue = queue.Queue(maxsize=64)
    q2: queue.Queue = queue.Queue(maxsize=64)
    errors: list[BaseException] = []

    def drain(q):
        while True:
            item = q.get()
            if item is done:
                return
            yield item

    def stage(source, sink):
        try:
            for item in source:
                sink.put(item)
        except BaseException as exc:  # re-raised in the caller
            errors.append(exc)
        finally:
            sink.put(done)

    t1 = threading.Thread(target=stage, args=(tee(stream_classify(frames, model, detector, fps, margin), events), q1))
    t2 = threading.Thread(target=stage, args=(tee(smooth_majority(drain(q1), window), states), q2))
    t1.start()
    t2.start()
    commands = list(adapt_policy(drain(q2), dwell))
    t1.join()
    t2.join()
    if errors:
        raise errors[0]
    return events, states, commands


# -- logs --------------------------------------------------------------------------


def dumps_line(record) -> str:
    return json.dumps(record.to_json(), sort_keys=True, separators=(",", ":")) + "\n"


def write_log(records: Iterable, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(dumps_line(r))
    return path


def read_event_log(path: str | Path) -> list[AttentionEvent]:
    events = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                events.append(AttentionEvent.from_json(json.loads(line)))
    return events


def replay(events: Sequence[AttentionEvent], window: int = DEFAULT_WINDOW,
           dwell: float = DEFAULT_DWELL) -> list[CommandState]:
    return list(adapt_policy(smooth_majority(events, window), dwell))
