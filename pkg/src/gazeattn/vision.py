"""Image preprocessing: face cropping, resizing, brightness augmentation, normalization.

Images are plain ``numpy`` arrays of shape ``(height, width, 3)``. A ``uint8``
array is a *raw* image (values 0..255); a floating array is a *normalized*
image. All functions are pure and never modify their input.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Callable, Mapping, Optional, Protocol, Sequence

import cv2
import numpy as np

from .errors import FactorOutOfRange, InvalidImage, NoFace
from .types import FaceBox

DEFAULT_MARGIN = 0.1
BRIGHTNESS_RANGE = (0.75, 1.25)
DEFAULT_MEANS = (0.0, 0.0, 0.0)
DEFAULT_SCALE = 1.0 / 255.0


class FaceDetector(Protocol):
    """Anything that maps an RGB image to a face box, or ``None`` when no face is found."""

    def __call__(self, image: np.ndarray) -> Optional[FaceBox]: ...


def check_image(image: np.ndarray, stage: str | None = None) -> np.ndarray:
    if not isinstance(image, np.ndarray):
        raise InvalidImage(f"expected a numpy array, got {type(image).__name__}")
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidImage(f"expected shape (H, W, 3), got {image.shape}")
    if image.shape[0] == 0 or image.shape[1] == 0:
        raise InvalidImage(f"zero-sized image {image.shape}")
    actual = image_stage(image)
    if stage is not None and actual != stage:
        raise InvalidImage(f"expected a {stage} image, got {actual} ({image.dtype})")
    return image


def image_stage(image: np.ndarray) -> str:
    return "raw" if image.dtype == np.uint8 else "normalized"


def read_image(path: str | Path) -> np.ndarray:
    """Read a PNG/JPEG file as a raw RGB array."""
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise InvalidImage(f"cannot read image {path}")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)


def write_image(path: str | Path, image: np.ndarray) -> None:
    check_image(image, "raw")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(image, cv2.COLOR_RGB2BGR)):
        raise InvalidImage(f"cannot write image {path}")


def crop_bounds(box: FaceBox, shape: Sequence[int], margin: float) -> tuple[int, int, int, int]:
    """Pixel bounds ``(x0, y0, x1, y1)`` of ``box`` grown by ``margin`` and clamped to ``shape``."""
    h, w = shape[:2]
    dx, dy = margin * box.width, margin * box.height
    x0 = max(0, math.floor(box.x - dx))
    y0 = max(0, math.floor(box.y - dy))
    x1 = min(w, math.ceil(box.x + box.width + dx))
    y1 = min(h, math.ceil(box.y + box.height + dy))
    return x0, y0, x1, y1


def crop_to_box(image: np.ndarray, box: FaceBox, margin: float = DEFAULT_MARGIN) -> np.ndarray:
    check_image(image)
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    x0, y0, x1, y1 = crop_bounds(box, image.shape, margin)
    if x1 <= x0 or y1 <= y0:
        raise NoFace(f"face box {box} lies outside the {image.shape[1]}x{image.shape[0]} image")
    return image[y0:y1, x0:x1].copy()


def detect_and_crop(
    image: np.ndarray, detector: FaceDetector, margin: float = DEFAULT_MARGIN
) -> np.ndarray:
    """Crop the detected face, grown by ``margin`` of the box size on each side.

    Raises :class:`NoFace` when the detector returns nothing; the caller decides
    whether that rejects the frame.
    """
    check_image(image, "raw")
    box = detector(image)
    if box is None:
        raise NoFace("detector found no face")
    return crop_to_box(image, box, margin)


def resize_to_input(image: np.ndarray, side: int = 224) -> np.ndarray:
    """Bilinear resize to ``side x side``; aspect ratio is not preserved."""
    check_image(image)
    if side <= 0:
        raise ValueError(f"side must be positive, got {side}")
    if image.shape[0] == side and image.shape[1] == side:
        return image.copy()
    return cv2.resize(image, (side, side), interpolation=cv2.INTER_LINEAR)


def adjust_brightness(image: np.ndarray, factor: float) -> np.ndarray:
    lo, hi = BRIGHTNESS_RANGE
    if not lo <= factor <= hi:
        raise FactorOutOfRange(f"brightness factor {factor} outside [{lo}, {hi}]")
    check_image(image, "raw")
    if factor == 1.0:
        return image.copy()
    scaled = np.rint(image.astype(np.float64) * factor)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def sample_brightness_factors(
    rng: np.random.Generator, n: int, bounds: tuple[float, float] = BRIGHTNESS_RANGE
) -> np.ndarray:
    return rng.uniform(bounds[0], bounds[1], size=n)


def normalize(
    image: np.ndarray,
    means: Sequence[float] = DEFAULT_MEANS,
    scale: float = DEFAULT_SCALE,
) -> np.ndarray:
    """``(v - mean_c) * scale`` per channel, as float32. Works on a single image or a batch."""
    if image.ndim == 3:
        check_image(image, "raw")
    elif image.dtype != np.uint8 or image.shape[-1] != 3:
        raise InvalidImage(f"expected raw (..., 3) uint8 data, got {image.dtype} {image.shape}")
    m = np.asarray(means, dtype=np.float32).reshape(3)
    return (image.astype(np.float32) - m) * np.float32(scale)


def denormalize(
    image: np.ndarray,
    means: Sequence[float] = DEFAULT_MEANS,
    scale: float = DEFAULT_SCALE,
) -> np.ndarray:
    m = np.asarray(means, dtype=np.float32).reshape(3)
    raw = np.rint(image.astype(np.float32) / np.float32(scale) + m)
    return np.clip(raw, 0, 255).astype(np.uint8)


def preprocess(
    image: np.ndarray,
    side: int,
    box: FaceBox | None = None,
    detector: FaceDetector | None = None,
    margin: float = DEFAULT_MARGIN,
) -> np.ndarray:
    """Crop (precomputed box, else detector, else whole frame) then resize. Output stays raw."""
    if box is not None:
        image = crop_to_box(image, box, margin)
    elif detector is not None:
        image = detect_and_crop(image, detector, margin)
    return resize_to_input(image, side)


# -- detectors ---------------------------------------------------------------


class StubDetector:
    """Returns a fixed box for every image (or ``None`` to simulate a miss)."""

    def __init__(self, box: FaceBox | Sequence[float] | None):
        if box is not None and not isinstance(box, FaceBox):
            box = FaceBox.from_list(box)
        self.box = box

    def __call__(self, image: np.ndarray) -> Optional[FaceBox]:
        return self.box


class PrecomputedDetector:
    """Looks boxes up by a key computed from the image (default: a content hash)."""

    def __init__(
        self,
        boxes: Mapping[str, FaceBox],
        key: Callable[[np.ndarray], str] | None = None,
    ):
        self.boxes = dict(boxes)
        self.key = key or image_key

    def __call__(self, image: np.ndarray) -> Optional[FaceBox]:
        return self.boxes.get(self.key(image))


def image_key(image: np.ndarray) -> str:
    import hashlib

    return hashlib.sha1(np.ascontiguousarray(image).tobytes()).hexdigest()


class ContrastDetector:
    """Reports the whole frame as the face unless the frame is (nearly) uniform.

    Intended for synthetic renders and smoke tests where the subject fills the
    frame; blank or dropped frames come out as misses.
    """

    def __init__(self, min_std: float = 4.0):
        self.min_std = min_std

    def __call__(self, image: np.ndarray) -> Optional[FaceBox]:
        check_image(image)
        if float(image.std()) < self.min_std:
            return None
        return FaceBox(0, 0, image.shape[1], image.shape[0], 1.0)


class CascadeDetector:
    """OpenCV Haar/LBP cascade wrapper; keeps the largest detection."""

    def __init__(self, cascade_path: str | Path, scale_factor: float = 1.1, min_neighbors: int = 5):
        self.classifier = cv2.CascadeClassifier(str(cascade_path))
        if self.classifier.empty():
            raise FileNotFoundError(f"cannot load cascade {cascade_path}")
        self.scale_factor = scale_factor
        self.min_neighbors = min_neighbors

    def __call__(self, image: np.ndarray) -> Optional[FaceBox]:
        gray = cv2.cvtColor(image, cv2.COLOR_RGB2GRAY)
        faces = self.classifier.detectMultiScale(
            gray, scaleFactor=self.scale_factor, minNeighbors=self.min_neighbors
        )
        if len(faces) == 0:
            return None
        x, y, w, h = max(faces, key=lambda f: f[2] * f[3])
        return FaceBox(float(x), float(y), float(w), float(h), 1.0)
