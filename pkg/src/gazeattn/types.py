"""Core value types: gaze angles, attention classes, class probabilities, face boxes."""

from __future__ import annotations

import math
import numbers
from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence


class AttentionClass(IntEnum):
    """Where the operator is looking. Index order is fixed: it is the model's output order."""

    COBOT = 0
    TABLE = 1
    DISTRACTED = 2

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, value: "str | int | AttentionClass") -> "AttentionClass":
        if isinstance(value, AttentionClass):
            return value
        if isinstance(value, numbers.Integral):
            return cls(int(value))
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise ValueError(f"unknown attention class {value!r}") from None


CLASS_NAMES = tuple(c.label for c in AttentionClass)


@dataclass(frozen=True)
class GazeDirection:
    """Gaze angles in radians."""

    pitch: float
    yaw: float

    def __post_init__(self):
        for name in ("pitch", "yaw"):
            v = getattr(self, name)
            if not math.isfinite(v) or abs(v) > math.pi:
                raise ValueError(f"{name}={v!r} must be finite and within [-pi, pi]")


@dataclass(frozen=True)
class ClassProbabilities:
    values: tuple[float, float, float]

    def __post_init__(self):
        if len(self.values) != 3:
            raise ValueError("exactly three class probabilities are required")
        if any(not (0.0 <= v <= 1.0) for v in self.values):
            raise ValueError(f"probabilities out of [0, 1]: {self.values}")
        if abs(sum(self.values) - 1.0) > 1e-6:
            raise ValueError(f"probabilities do not sum to 1: {self.values}")

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> "ClassProbabilities":
        return cls(tuple(float(v) for v in values))

    def argmax(self) -> AttentionClass:
        # max() returns the first maximal element, i.e. the lowest index on ties.
        best = max(range(3), key=lambda i: self.values[i])
        return AttentionClass(best)

    def __getitem__(self, cls: AttentionClass | int) -> float:
        return self.values[int(cls)]


@dataclass(frozen=True)
class FaceBox:
    x: float
    y: float
    width: float
    height: float
    confidence: float = 1.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"face box must have positive size, got {self.width}x{self.height}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.width, self.height]

    @classmethod
    def from_list(cls, values: Sequence[float], confidence: float = 1.0) -> "FaceBox":
        x, y, w, h = values
        return cls(float(x), float(y), float(w), float(h), confidence)
