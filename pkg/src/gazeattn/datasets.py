"""Dataset manifests, subject-wise splitting, assembly-video test sets and synthetic data.

Manifests are JSON-lines files. The first line is a header
``{"format_version": 1, "kind": "<gaze|attention|segment>"}``; every other line is
one record. Image and video locators are stored relative to the manifest file.

Record schemas::

    gaze:      {"image": str, "subject": str, "pitch": float, "yaw": float}
    attention: {"image": str, "subject": str, "label": "Cobot"|"Table"|"Distracted",
                "face_box": [x, y, w, h]  (optional)}
    segment:   {"video": str, "start": int, "end": int, "activity": str,
                "flags": [str, ...]  (optional), "id": str (optional),
                "subject": str (optional)}
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Protocol, Sequence, Union

import cv2
import numpy as np

from .errors import (
    EmptyManifest,
    FrameReadError,
    InvalidGeometry,
    InvalidSegment,
    NoFace,
    ParseError,
    SchemaError,
    TooFewSubjects,
    UnknownSubject,
)
from .types import AttentionClass, FaceBox, GazeDirection
from .vision import (
    DEFAULT_MARGIN,
    FaceDetector,
    detect_and_crop,
    preprocess,
    read_image,
    write_image,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_KINDS = ("gaze", "attention", "segment")


class Activity(str, Enum):
    GATHERING_PARTS = "GatheringParts"
    ASSEMBLING = "Assembling"
    COLLABORATIVE_JOINING = "CollaborativeJoining"
    WAITING_LOOKING_AT_COBOT = "WaitingLookingAtCobot"
    WAITING_DISTRACTED = "WaitingDistracted"


class QualityFlag(str, Enum):
    EYES_NOT_VISIBLE = "EyesNotVisible"
    OCCLUDED = "Occluded"
    BLURRY = "Blurry"


# Activities without an entry here carry no attention label and are skipped.
ACTIVITY_TO_CLASS = {
    Activity.ASSEMBLING: AttentionClass.TABLE,
    Activity.WAITING_LOOKING_AT_COBOT: AttentionClass.COBOT,
    Activity.WAITING_DISTRACTED: AttentionClass.DISTRACTED,
}


@dataclass(frozen=True)
class GazeSample:
    image: str
    subject: str
    gaze: GazeDirection

    def to_json(self) -> dict:
        return {"image": self.image, "subject": self.subject,
                "pitch": self.gaze.pitch, "yaw": self.gaze.yaw}


@dataclass(frozen=True)
class AttentionSample:
    image: str
    subject: str
    label: AttentionClass
    face_box: FaceBox | None = None

    def to_json(self) -> dict:
        out = {"image": self.image, "subject": self.subject, "label": self.label.label}
        if self.face_box is not None:
            out["face_box"] = self.face_box.as_list()
        return out


@dataclass(frozen=True)
class SegmentAnnotation:
    video: str
    start: int
    end: int
    activity: Activity
    flags: frozenset[QualityFlag] = frozenset()
    id: str = ""
    subject: str = ""

    def __post_init__(self):
        if self.start < 0 or self.start > self.end:
            raise InvalidSegment(f"segment needs 0 <= start <= end, got [{self.start}, {self.end}]")

    @property
    def subject_id(self) -> str:
        return self.subject or Path(self.video).stem

    def to_json(self) -> dict:
        out = {"video": self.video, "start": self.start, "end": self.end,
               "activity": self.activity.value}
        if self.flags:
            out["flags"] = sorted(f.value for f in self.flags)
        if self.id:
            out["id"] = self.id
        if self.subject:
            out["subject"] = self.subject
        return out


Record = Union[GazeSample, AttentionSample, SegmentAnnotation]


@dataclass(frozen=True)
class DatasetManifest:
    kind: str
    records: tuple[Record, ...]
    root: Path = Path(".")
    version: int = FORMAT_VERSION

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[Record]:
        return iter(self.records)

    @property
    def subjects(self) -> list[str]:
        return sorted({_subject_of(r) for r in self.records})

    def subject_counts(self) -> Counter:
        return Counter(_subject_of(r) for r in self.records)

    def resolve(self, locator: str) -> Path:
        p = Path(locator)
        return p if p.is_absolute() else self.root / p

    def with_records(self, records: Iterable[Record]) -> "DatasetManifest":
        return replace(self, records=tuple(records))


def _subject_of(record: Record) -> str:
    if isinstance(record, SegmentAnnotation):
        return record.subject_id
    return record.subject


# -- manifest IO ---------------------------------------------------------------


def _require(obj: dict, key: str, line: int):
    if key not in obj:
        raise SchemaError(key, line)
    return obj[key]


def _parse_record(kind: str, obj: dict, line: int) -> Record:
    try:
        if kind == "gaze":
            image = str(_require(obj, "image", line))
            subject = str(_require(obj, "subject", line))
            gaze = GazeDirection(float(_require(obj, "pitch", line)), float(_require(obj, "yaw", line)))
            rec: Record = GazeSample(image, subject, gaze)
        elif kind == "attention":
            image = str(_require(obj, "image", line))
            subject = str(_require(obj, "subject", line))
            label = AttentionClass.parse(_require(obj, "label", line))
            box = obj.get("face_box")
            rec = AttentionSample(image, subject, label, FaceBox.from_list(box) if box else None)
        else:
            rec = SegmentAnnotation(
                video=str(_require(obj, "video", line)),
                start=int(_require(obj, "start", line)),
                end=int(_require(obj, "end", line)),
                activity=Activity(_require(obj, "activity", line)),
                flags=frozenset(QualityFlag(f) for f in obj.get("flags", [])),
                id=str(obj.get("id", "")),
                subject=str(obj.get("subject", "")),
            )
    except ParseError:
        raise
    except (TypeError, ValueError) as exc:
        raise ParseError(f"invalid {kind} record: {exc}", line) from exc
    if not isinstance(rec, SegmentAnnotation) and not rec.subject:
        raise SchemaError("subject", line, detail="empty field")
    return rec


def load_manifest(path: str | Path, kind: str) -> DatasetManifest:
    """Load and validate a JSON-lines manifest of the given kind."""
    if kind not in MANIFEST_KINDS:
        raise ValueError(f"unknown manifest kind {kind!r}")
    path = Path(path)
    records: list[Record] = []
    version = FORMAT_VERSION
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from exc
            if not isinstance(obj, dict):
                raise ParseError("record is not a JSON object", lineno)
            if "format_version" in obj:
                if records:
                    raise ParseError("header must be the first line", lineno)
                version = int(obj["format_version"])
                if version > FORMAT_VERSION:
                    raise ParseError(f"unsupported format_version {version}", lineno)
                if obj.get("kind", kind) != kind:
                    raise ParseError(f"manifest kind is {obj['kind']!r}, expected {kind!r}", lineno)
                continue
            records.append(_parse_record(kind, obj, lineno))
    if not records:
        raise EmptyManifest(f"{path} contains no records")
    return DatasetManifest(kind, tuple(records), path.parent, version)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format_version": manifest.version, "kind": manifest.kind}) + "\n")
        for rec in manifest.records:
            fh.write(json.dumps(rec.to_json()) + "\n")
    return path


# -- subject-wise splitting ----------------------------------------------------


def split_by_subject(
    manifest: DatasetManifest, held_out: Iterable[str]
) -> tuple[DatasetManifest, DatasetManifest]:
    held = set(held_out)
    unknown = held - set(manifest.subjects)
    if unknown:
        raise UnknownSubject(f"subjects not in manifest: {sorted(unknown)}")
    train = [r for r in manifest.records if _subject_of(r) not in held]
    val = [r for r in manifest.records if _subject_of(r) in held]
    return manifest.with_records(train), manifest.with_records(val)


def loso_folds(manifest: DatasetManifest) -> list[tuple[DatasetManifest, DatasetManifest]]:
    """Leave-one-subject-out folds, ordered by subject id. Fold ``i`` tests on subject ``i``."""
    subjects = manifest.subjects
    if len(subjects) < 2:
        raise TooFewSubjects(f"LOSO needs at least 2 subjects, got {len(subjects)}")
    return [split_by_subject(manifest, [s]) for s in subjects]


# -- image arrays ----------------------------------------------------------------


def load_gaze_arrays(manifest: DatasetManifest, side: int) -> tuple[np.ndarray, np.ndarray]:
    """Images resized to ``side`` (uint8, N x side x side x 3) and (pitch, yaw) targets."""
    if manifest.kind != "gaze":
        raise ValueError(f"expected a gaze manifest, got {manifest.kind!r}")
    X = np.empty((len(manifest), side, side, 3), dtype=np.uint8)
    y = np.empty((len(manifest), 2), dtype=np.float32)
    for i, rec in enumerate(manifest.records):
        X[i] = preprocess(read_image(manifest.resolve(rec.image)), side)
        y[i] = (rec.gaze.pitch, rec.gaze.yaw)
    return X, y


def load_attention_arrays(
    manifest: DatasetManifest,
    side: int,
    detector: FaceDetector | None = None,
    margin: float = DEFAULT_MARGIN,
) -> tuple[np.ndarray, np.ndarray]:
    """Face-cropped, resized images and class indices.

    A record's stored face box wins over ``detector``; with neither, the whole
    image is used. Detector misses raise :class:`NoFace`.
    """
    if manifest.kind != "attention":
        raise ValueError(f"expected an attention manifest, got {manifest.kind!r}")
    X = np.empty((len(manifest), side, side, 3), dtype=np.uint8)
    y = np.empty(len(manifest), dtype=np.int64)
    for i, rec in enumerate(manifest.records):
        image = read_image(manifest.resolve(rec.image))
        X[i] = preprocess(image, side, box=rec.face_box, detector=detector, margin=margin)
        y[i] = int(rec.label)
    return X, y


# -- frame sources ---------------------------------------------------------------


class FrameSource(Protocol):
    fps: float

    def __len__(self) -> int: ...

    def read(self, index: int) -> np.ndarray: ...


class ArrayFrames:
    """In-memory frame source over a sequence of raw RGB images."""

    def __init__(self, frames: Sequence[np.ndarray], fps: float = 25.0, name: str = "<memory>"):
        self.frames = frames
        self.fps = fps
        self.name = name

    def __len__(self) -> int:
        return len(self.frames)

    def read(self, index: int) -> np.ndarray:
        if not 0 <= index < len(self.frames):
            raise FrameReadError(index, self.name)
        frame = self.frames[index]
        if frame is None:
            raise FrameReadError(index, self.name)
        return frame


_NUMBER = re.compile(r"(\d+)")


class DirectoryFrames:
    """Numbered image files in a directory (``frame_000012.png`` etc.), ordered by number."""

    def __init__(self, path: str | Path, fps: float = 25.0):
        self.path = Path(path)
        self.fps = fps
        files = [p for p in self.path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")]

        def number(p: Path) -> int:
            digits = _NUMBER.findall(p.stem)
            if not digits:
                raise ParseError(f"frame file {p.name} has no frame number")
            return int(digits[-1])

        self.files = sorted(files, key=number)

    def __len__(self) -> int:
        return len(self.files)

    def read(self, index: int) -> np.ndarray:
        if not 0 <= index < len(self.files):
            raise FrameReadError(index, str(self.path))
        try:
            return read_image(self.files[index])
        except Exception as exc:
            raise FrameReadError(index, str(self.files[index])) from exc


class VideoFrames:
    """Video container read through OpenCV. Seeks per frame, so random access is allowed."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        cap = cv2.VideoCapture(str(self.path))
        if not cap.isOpened():
            raise FileNotFoundError(f"cannot open video {path}")
        self.fps = float(cap.get(cv2.CAP_PROP_FPS)) or 25.0
        self._length = int(cap.get(cv2.CAP_PROP_FRAME_COUNT))
        self._cap = cap

    def __len__(self) -> int:
        return self._length

    def read(self, index: int) -> np.ndarray:
        if not 0 <= index < self._length:
            raise FrameReadError(index, str(self.path))
        self._cap.set(cv2.CAP_PROP_POS_FRAMES, index)
        ok, bgr = self._cap.read()
        if not ok:
            raise FrameReadError(index, str(self.path))
        return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)


def open_frame_source(path: str | Path, fps: float = 25.0) -> FrameSource:
    path = Path(path)
    if path.is_dir():
        return DirectoryFrames(path, fps)
    return VideoFrames(path)


# -- assembly test set -------------------------------------------------------------


def segment_frame_indices(segment: SegmentAnnotation) -> list[int]:
    middle = (segment.start + segment.end) // 2
    return sorted({segment.start, middle, segment.end})


def extract_segment_frames(
    segment: SegmentAnnotation, video: FrameSource
) -> list[tuple[int, np.ndarray]]:
    """First, middle (floor of the midpoint) and last frame, duplicates dropped, ascending."""
    if segment.end >= len(video):
        raise InvalidSegment(
            f"segment [{segment.start}, {segment.end}] exceeds video length {len(video)}"
        )
    return [(i, video.read(i)) for i in segment_frame_indices(segment)]


@dataclass(frozen=True)
class Rejection:
    video: str
    segment: str
    frame: int
    reason: str


@dataclass
class RejectionReport:
    rows: list[Rejection] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def counts(self) -> dict[str, int]:
        return dict(sorted(Counter(r.reason for r in self.rows).items()))

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["video", "segment", "frame", "reason"])
            for r in self.rows:
                writer.writerow([r.video, r.segment, r.frame, r.reason])
        return path


def build_assembly_test_set(
    annotations: Sequence[SegmentAnnotation],
    videos: Mapping[str, FrameSource] | Callable[[str], FrameSource],
    detector: FaceDetector,
    out_dir: str | Path,
    margin: float = DEFAULT_MARGIN,
) -> tuple[DatasetManifest, RejectionReport]:
    """Turn annotated assembly-video segments into a labelled, face-cropped test set.

    Crops are written under ``out_dir/images`` and the returned manifest is rooted
    at ``out_dir``. Segments with a quality flag are rejected without decoding.
    """
    out_dir = Path(out_dir)
    resolve = videos if callable(videos) else videos.__getitem__
    samples: list[AttentionSample] = []
    report = RejectionReport()
    for position, seg in enumerate(annotations):
        label = ACTIVITY_TO_CLASS.get(seg.activity)
        if label is None:
            continue
        seg_id = seg.id or str(position)
        indices = segment_frame_indices(seg)
        if seg.flags:
            reason = "flag:" + "+".join(sorted(f.value for f in seg.flags))
            report.rows.extend(Rejection(seg.video, seg_id, i, reason) for i in indices)
            continue
        for index, frame in extract_segment_frames(seg, resolve(seg.video)):
            try:
                crop = detect_and_crop(frame, detector, margin)
            except NoFace:
                report.rows.append(Rejection(seg.video, seg_id, index, "no-face"))
                continue
            name = f"images/{_slug(seg.video)}_{_slug(seg_id)}_{index:06d}.png"
            write_image(out_dir / name, crop)
            samples.append(AttentionSample(name, seg.subject_id, label))
    log.info("assembly test set: %d images, rejections %s", len(samples), report.counts())
    return DatasetManifest("attention", tuple(samples), out_dir), report


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "-", text).strip("-")


# -- synthetic data --------------------------------------------------------------


@dataclass(frozen=True)
class ZoneGeometry:
    """Maps gaze angles to attention zones for synthetic data.

    Table when pitch is below ``table_pitch``; otherwise Cobot when yaw exceeds
    ``cobot_yaw``; otherwise Distracted. Gaze is sampled in ``[-gaze_range, gaze_range]``.
    """

    table_pitch: float = -0.2
    cobot_yaw: float = 0.3
    gaze_range: float = 0.8

    def validate(self) -> None:
        r = self.gaze_range
        if not (math.isfinite(r) and 0 < r <= math.pi):
            raise InvalidGeometry(f"gaze_range must be in (0, pi], got {r}")
        for name in ("table_pitch", "cobot_yaw"):
            v = getattr(self, name)
            if not (math.isfinite(v) and -r < v < r):
                raise InvalidGeometry(f"{name}={v} leaves a zone empty within +-{r}")

    def zone(self, gaze: GazeDirection) -> AttentionClass:
        if gaze.pitch < self.table_pitch:
            return AttentionClass.TABLE
        if gaze.yaw > self.cobot_yaw:
            return AttentionClass.COBOT
        return AttentionClass.DISTRACTED


@dataclass(frozen=True)
class SyntheticRenderer:
    """Draws a bright anti-aliased disc whose position encodes gaze on a tinted background."""

    side: int = 64
    radius: float = 6.0
    gaze_range: float = 0.8
    noise: float = 3.0
    disc_color: tuple[int, int, int] = (235, 235, 225)

    @property
    def pixels_per_radian(self) -> float:
        return (self.side / 2 - self.radius - 2) / self.gaze_range

    def disc_center(self, gaze: GazeDirection) -> tuple[float, float]:
        k = self.pixels_per_radian
        c = self.side / 2
        return c + k * gaze.yaw, c - k * gaze.pitch

    def render(self, gaze: GazeDirection, tint: Sequence[float], rng: np.random.Generator) -> np.ndarray:
        u, v = self.disc_center(gaze)
        centers = np.arange(self.side) + 0.5
        dist = np.hypot(centers[None, :] - u, centers[:, None] - v)
        alpha = np.clip(self.radius + 0.5 - dist, 0.0, 1.0)[..., None]
        bg = np.asarray(tint, dtype=np.float64)[None, None, :]
        disc = np.asarray(self.disc_color, dtype=np.float64)[None, None, :]
        img = bg * (1 - alpha) + disc * alpha
        img = img + rng.normal(0.0, self.noise, size=img.shape)
        return np.clip(np.rint(img), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class SyntheticDataset:
    gaze: DatasetManifest
    attention: DatasetManifest
    gaze_path: Path
    attention_path: Path


def _subject_tint(seed: int, group: int, index: int) -> np.ndarray:
    rng = np.random.default_rng([seed, group, index, 7])
    return rng.uniform(30, 120, size=3)


def _sample_gaze(rng: np.random.Generator, r: float) -> GazeDirection:
    p, y = rng.uniform(-r, r, size=2)
    return GazeDirection(float(p), float(y))


def generate_synthetic(
    out_dir: str | Path,
    subjects: int = 8,
    per_class: int = 30,
    seed: int = 0,
    geometry: ZoneGeometry | None = None,
    gaze_subjects: int | None = None,
    gaze_per_subject: int | None = None,
    side: int = 64,
) -> SyntheticDataset:
    """Render a gaze-regression set and an attention set with labels derived from gaze.

    Writes ``gaze.jsonl``, ``attention.jsonl`` and the PNG images under ``out_dir``.
    Attention subjects are ``p01..``; gaze subjects are a separate population ``g001..``.
    Output is a pure function of the arguments.
    """
    geometry = geometry or ZoneGeometry()
    geometry.validate()
    if subjects < 2:
        raise ValueError(f"need at least 2 subjects, got {subjects}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    gaze_subjects = subjects if gaze_subjects is None else gaze_subjects
    gaze_per_subject = 3 * per_class if gaze_per_subject is None else gaze_per_subject
    renderer = SyntheticRenderer(side=side, gaze_range=geometry.gaze_range)
    out_dir = Path(out_dir)
    r = geometry.gaze_range

    gaze_records = []
    for s in range(gaze_subjects):
        sid = f"g{s + 1:03d}"
        tint = _subject_tint(seed, 0, s)
        rng = np.random.default_rng([seed, 0, s])
        for j in range(gaze_per_subject):
            gaze = _sample_gaze(rng, r)
            name = f"gaze/{sid}/{j:04d}.png"
            write_image(out_dir / name, renderer.render(gaze, tint, rng))
            gaze_records.append(GazeSample(name, sid, gaze))

    attn_records = []
    for s in range(subjects):
        sid = f"p{s + 1:02d}"
        tint = _subject_tint(seed, 1, s)
        rng = np.random.default_rng([seed, 1, s])
        for cls in AttentionClass:
            for j in range(per_class):
                gaze = _sample_gaze(rng, r)
                while geometry.zone(gaze) is not cls:
                    gaze = _sample_gaze(rng, r)
                name = f"attention/{sid}/{cls.label.lower()}_{j:03d}.png"
                write_image(out_dir / name, renderer.render(gaze, tint, rng))
                box = FaceBox(0, 0, side, side)
                attn_records.append(_SyntheticAttention(name, sid, cls, box, gaze))

    gaze_m = DatasetManifest("gaze", tuple(gaze_records), out_dir)
    attn_m = DatasetManifest("attention", tuple(attn_records), out_dir)
    gaze_path = save_manifest(gaze_m, out_dir / "gaze.jsonl")
    attn_path = save_manifest(attn_m, out_dir / "attention.jsonl")
    return SyntheticDataset(gaze_m, attn_m, gaze_path, attn_path)


@dataclass(frozen=True)
class _SyntheticAttention(AttentionSample):
    """Attention sample that also carries the gaze it was rendered from."""

    gaze: GazeDirection | None = None

    def to_json(self) -> dict:
        out = super().to_json()
        if self.gaze is not None:
            out["pitch"] = self.gaze.pitch
            out["yaw"] = self.gaze.yaw
        return out


def attention_gaze(record: dict) -> GazeDirection | None:
    """Gaze stored alongside a synthetic attention record, if any."""
    if "pitch" in record and "yaw" in record:
        return GazeDirection(float(record["pitch"]), float(record["yaw"]))
    return None
