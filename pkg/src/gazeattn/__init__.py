"""Gaze-based attention recognition: gaze regression, transfer to attention classes,
subject-wise evaluation and a streaming runtime for cobot adaptation."""

from .types import AttentionClass, ClassProbabilities, FaceBox, GazeDirection

__all__ = ["AttentionClass", "ClassProbabilities", "FaceBox", "GazeDirection"]
__version__ = "0.1.0"
