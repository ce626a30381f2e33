"""Gaze regressor, transfer to the three-class attention classifier, training and checkpoints.

Both networks share one layout: a convolutional backbone, an adaptive average
pool, one fully connected layer with ReLU, and a linear prediction head (2
outputs for pitch/yaw, 3 logits for the attention classes). Transfer copies
the backbone and fully connected layer from a trained gaze model, freezes the
convolutional layers and attaches a fresh 3-way head.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datasets import DatasetManifest, load_attention_arrays, load_gaze_arrays
from .errors import (
    CorruptCheckpoint,
    DivergenceError,
    EmptyDataset,
    IncompatibleCheckpoint,
    ShapeError,
    UnknownArchitecture,
    VersionMismatch,
)
from .types import ClassProbabilities, GazeDirection
from .vision import (
    BRIGHTNESS_RANGE,
    DEFAULT_MEANS,
    DEFAULT_SCALE,
    adjust_brightness,
    normalize,
    sample_brightness_factors,
)

log = logging.getLogger(__name__)

# Integers are conv output channels, "M" is a 2x2 max-pool. The vgg16 list is the
# canonical 13-conv layout, so torchvision-style "features.N.*" weights load as-is.
LAYOUTS = {
    "vgg16": [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"],
    "tiny": [8, "M", 16, "M", 32, "M"],
}
NATIVE_SIDE = {"vgg16": 224, "tiny": 64}
POOL_GRID = {"vgg16": 7, "tiny": 8}
FC_UNITS = {"vgg16": 512, "tiny": 32}


@dataclass(frozen=True)
class BackboneConfig:
    architecture: str = "vgg16"
    input_side: Optional[int] = None
    pretrained: Optional[str] = None
    fc_units: Optional[int] = None

    def __post_init__(self):
        if self.architecture not in LAYOUTS:
            raise UnknownArchitecture(
                f"unknown architecture {self.architecture!r}; expected one of {sorted(LAYOUTS)}"
            )
        if self.input_side is not None and self.input_side < 32:
            raise ValueError(f"input_side must be >= 32, got {self.input_side}")

    @property
    def side(self) -> int:
        return self.input_side or NATIVE_SIDE[self.architecture]

    @property
    def units(self) -> int:
        return self.fc_units or FC_UNITS[self.architecture]


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings. ``plateau_patience=None`` disables learning-rate reduction."""

    lr: float
    batch_size: int
    loss: str
    plateau_patience: Optional[int] = 5
    plateau_factor: float = 0.1
    early_patience: int = 7
    min_delta: float = 0.0
    max_epochs: int = 100
    seed: int = 0
    momentum: float = 0.0
    brightness: Optional[tuple[float, float]] = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss not in ("mae", "cross_entropy"):
            raise ValueError(f"loss must be 'mae' or 'cross_entropy', got {self.loss!r}")
        if self.plateau_patience is not None and self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")
        if self.early_patience < 1:
            raise ValueError("early_patience must be >= 1")
        if not 0 < self.plateau_factor < 1:
            raise ValueError(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.brightness is not None:
            lo, hi = self.brightness
            if not BRIGHTNESS_RANGE[0] <= lo <= hi <= BRIGHTNESS_RANGE[1]:
                raise ValueError(f"brightness range {self.brightness} outside {BRIGHTNESS_RANGE}")
            object.__setattr__(self, "brightness", (float(lo), float(hi)))

    @classmethod
    def gaze_defaults(cls, **overrides) -> "TrainConfig":
        params = dict(lr=0.001, batch_size=32, loss="mae", plateau_patience=5,
                      plateau_factor=0.1, early_patience=7, min_delta=0.0, max_epochs=100)
        params.update(overrides)
        return cls(**params)

    @classmethod
    def attention_defaults(cls, **overrides) -> "TrainConfig":
        # No validation split exists for this stage: stop on a training-loss plateau.
        params = dict(lr=0.01, batch_size=15, loss="cross_entropy", plateau_patience=None,
                      early_patience=5, min_delta=1e-4, max_epochs=50,
                      brightness=BRIGHTNESS_RANGE)
        params.update(overrides)
        return cls(**params)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["brightness"] is not None:
            d["brightness"] = list(d["brightness"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("brightness") is not None:
            d["brightness"] = tuple(d["brightness"])
        return cls(**d)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: Optional[float]
    lr: float


# -- networks -----------------------------------------------------------------------


def _make_features(layout: Sequence) -> nn.Sequential:
    layers: list[nn.Module] = []
    channels = 3
    for item in layout:
        if item == "M":
            layers.append(nn.MaxPool2d(kernel_size=2, stride=2))
        else:
            layers.append(nn.Conv2d(channels, int(item), kernel_size=3, padding=1))
            layers.append(nn.ReLU(inplace=True))
            channels = int(item)
    return nn.Sequential(*layers)


class Network(nn.Module):
    outputs: int = 0
    task: str = ""

    def __init__(self, backbone: BackboneConfig, seed: int = 0):
        super().__init__()
        self.backbone = backbone
        layout = LAYOUTS[backbone.architecture]
        grid = POOL_GRID[backbone.architecture]
        last = [c for c in layout if c != "M"][-1]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.features = _make_features(layout)
            self.pool = nn.AdaptiveAvgPool2d(grid)
            self.fc = nn.Linear(last * grid * grid, backbone.units)
            self.head = nn.Linear(backbone.units, self.outputs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.pool(self.features(x))
        x = F.relu(self.fc(torch.flatten(x, 1)))
        return self.head(x)

    def conv_parameter_names(self) -> list[str]:
        return [f"features.{n}" for n, _ in self.features.named_parameters()]

    def frozen_names(self) -> list[str]:
        return [n for n, p in self.named_parameters() if not p.requires_grad]

    def freeze(self, names: Sequence[str]) -> None:
        wanted = set(names)
        for n, p in self.named_parameters():
            if n in wanted:
                p.requires_grad_(False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.state_dict().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        tensors = {k: torch.from_numpy(np.asarray(v, dtype=np.float32).copy()) for k, v in arrays.items()}
        self.load_state_dict(tensors, strict=strict)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


class GazeModel(Network):
    outputs = 2
    task = "gaze"


class AttentionModel(Network):
    outputs = 3
    task = "attention"


MODEL_TYPES = {"gaze": GazeModel, "attention": AttentionModel}
AnyModel = Union[GazeModel, AttentionModel]


def build_gaze_model(cfg: BackboneConfig, seed: int = 0) -> GazeModel:
    """Fresh gaze regressor. Deterministic given ``seed``; loads conv weights from ``cfg.pretrained``."""
    model = GazeModel(cfg, seed)
    if cfg.pretrained:
        state = torch.load(cfg.pretrained, map_location="cpu", weights_only=True)
        feats = {k: v for k, v in state.items() if k.startswith("features.")}
        if not feats:
            raise IncompatibleCheckpoint(f"{cfg.pretrained} has no 'features.*' weights")
        missing = set(model.state_dict()) - set(feats)
        model.load_state_dict({**model.state_dict(), **feats}, strict=True)
        log.info("loaded %d backbone tensors from %s (%d kept from init)",
                 len(feats), cfg.pretrained, len(missing))
    model.eval()
    return model


# -- learning-rate plateau / early stopping -----------------------------------------


class Action(str, Enum):
    CONTINUE = "continue"
    REDUCE = "reduce"
    STOP = "stop"


@dataclass(frozen=True)
class SchedulerDecision:
    action: Action
    lr: float
    improved: bool
    epochs_since_best: int


def scheduler_step(
    losses: Sequence[float],
    plateau_patience: Optional[int] = 5,
    factor: float = 0.1,
    early_patience: int = 7,
    lr: float = 1.0,
    min_delta: float = 0.0,
) -> SchedulerDecision:
    """Decide what happens after the last entry of ``losses``.

    A loss improves when it is below ``best - min_delta``. The plateau counter
    reduces the rate once it reaches ``plateau_patience`` and then restarts; the
    early-stop counter counts epochs since the best loss and is never reset by a
    reduction. Stop wins when both fire on the same epoch. ``lr`` is the initial
    rate; the returned rate is the one to use for the next epoch.
    """
    if not losses:
        raise ValueError("losses must be non-empty")
    best = math.inf
    since_best = 0
    wait = 0
    action = Action.CONTINUE
    improved = False
    for loss in losses:
        improved = loss < best - min_delta
        if improved:
            best = loss
            since_best = 0
            wait = 0
            action = Action.CONTINUE
            continue
        since_best += 1
        wait += 1
        action = Action.CONTINUE
        if plateau_patience is not None and wait >= plateau_patience:
            action = Action.REDUCE
            lr *= factor
            wait = 0
        if since_best >= early_patience:
            action = Action.STOP
    return SchedulerDecision(action, lr, improved, since_best)


# -- training --------------------------------------------------------------------------


def _to_tensor(batch: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(batch.transpose(0, 3, 1, 2)))


def _normalized(batch: np.ndarray) -> torch.Tensor:
    return _to_tensor(normalize(batch, DEFAULT_MEANS, DEFAULT_SCALE))


def _loss_fn(name: str):
    if name == "mae":
        return lambda out, y: (out - y).abs().mean()
    return F.cross_entropy


def _mean_loss(model: Network, X: np.ndarray, y: np.ndarray, loss: str, batch: int = 128) -> float:
    fn = _loss_fn(loss)
    total = 0.0
    model.eval()
    with torch.no_grad():
        for start in range(0, len(X), batch):
            xb = _normalized(X[start:start + batch])
            yb = torch.from_numpy(y[start:start + batch])
            total += float(fn(model(xb), yb)) * len(xb)
    return total / len(X)


def _augment(batch: np.ndarray, factors: np.ndarray) -> np.ndarray:
    return np.stack([adjust_brightness(img, float(f)) for img, f in zip(batch, factors)])


def _fit(
    model: Network,
    X: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    val: Optional[tuple[np.ndarray, np.ndarray]] = None,
    restore_best: bool = True,
) -> list[EpochRecord]:
    if len(X) == 0:
        raise EmptyDataset("no training samples")
    fn = _loss_fn(cfg.loss)
    rng = np.random.default_rng(cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    lr = cfg.lr
    history: list[EpochRecord] = []
    monitored: list[float] = []
    best_state = None
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = rng.permutation(len(X))
        factors = sample_brightness_factors(rng, len(X), cfg.brightness) if cfg.brightness else None
        total = 0.0
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = X[idx]
            if factors is not None:
                xb = _augment(xb, factors[idx])
            opt.zero_grad()
            loss = fn(model(_normalized(xb)), torch.from_numpy(y[idx]))
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        train_loss = total / len(X)
        val_loss = _evaluate_loss(model, val[0], val[1], cfg.loss) if val is not None else None
        if val_loss is not None and not math.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        history.append(EpochRecord(epoch, train_loss, val_loss, lr))
        monitored.append(val_loss if val_loss is not None else train_loss)
        decision = scheduler_step(monitored, cfg.plateau_patience, cfg.plateau_factor,
                                  cfg.early_patience, cfg.lr, cfg.min_delta)
        log.debug("epoch %d train %.5f val %s lr %g -> %s", epoch, train_loss, val_loss, lr,
                  decision.action.value)
        if decision.improved and restore_best:
            best_state = copy.deepcopy(model.state_dict())
        if decision.action is Action.STOP:
            break
        if decision.lr != lr:
            lr = decision.lr
            for group in opt.param_groups:
                group["lr"] = lr
    if restore_best and best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return history


def _evaluate_loss(model: Network, X: np.ndarray, y: np.ndarray, loss: str) -> float:
    return _mean_loss(model, X, y, loss)


def _gaze_data(data, side: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, DatasetManifest):
        return load_gaze_arrays(data, side)
    X, y = data
    return np.asarray(X, dtype=np.uint8), np.asarray(y, dtype=np.float32)


def _attention_data(data, side: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, DatasetManifest):
        return load_attention_arrays(data, side)
    X, y = data
    return np.asarray(X, dtype=np.uint8), np.asarray(y, dtype=np.int64)


def train_gaze(model: GazeModel, train, val, cfg: TrainConfig | None = None) -> "ModelCheckpoint":
    """Fit pitch/yaw with mean absolute error; keeps the best-validation weights.

    ``train`` and ``val`` are gaze manifests or ``(images, angles)`` arrays.
    """
    cfg = cfg or TrainConfig.gaze_defaults()
    if cfg.loss != "mae":
        raise ValueError("gaze training uses the 'mae' loss")
    side = model.backbone.side
    X, y = _gaze_data(train, side)
    Xv, yv = _gaze_data(val, side)
    if len(Xv) == 0:
        raise EmptyDataset("gaze training needs a non-empty validation set")
    _check_batch_shape(X, side)
    history = _fit(model, X, y, cfg, val=(Xv, yv), restore_best=True)
    return ModelCheckpoint.from_model(model, cfg, history)


def transfer_to_attention(source: "ModelCheckpoint | GazeModel", seed: int = 0) -> AttentionModel:
    """Copy backbone and fully connected weights, freeze conv layers, attach a fresh 3-way head."""
    if isinstance(source, ModelCheckpoint):
        if source.task != "gaze":
            raise IncompatibleCheckpoint(f"expected a gaze checkpoint, got {source.task!r}")
        backbone, weights = source.backbone, source.weights
    elif isinstance(source, GazeModel):
        backbone, weights = source.backbone, source.state_arrays()
    else:
        raise IncompatibleCheckpoint(f"cannot transfer from {type(source).__name__}")
    model = AttentionModel(backbone, seed)
    keep = {k: v for k, v in weights.items() if not k.startswith("head.")}
    model.load_arrays({**model.state_arrays(), **keep})
    model.freeze(model.conv_parameter_names())
    model.eval()
    return model


def train_attention(model: AttentionModel, train, cfg: TrainConfig | None = None) -> "ModelCheckpoint":
    """Cross-entropy training of the unfrozen layers with brightness augmentation.

    ``train`` is an attention manifest or ``(images, class indices)`` arrays.
    """
    cfg = cfg or TrainConfig.attention_defaults()
    if cfg.loss != "cross_entropy":
        raise ValueError("attention training uses the 'cross_entropy' loss")
    side = model.backbone.side
    X, y = _attention_data(train, side)
    _check_batch_shape(X, side)
    history = _fit(model, X, y, cfg, val=None, restore_best=False)
    return ModelCheckpoint.from_model(model, cfg, history)


# -- prediction ------------------------------------------------------------------------


def _check_batch_shape(batch: np.ndarray, side: int) -> None:
    if batch.ndim != 4 or batch.shape[1:] != (side, side, 3):
        raise ShapeError(f"expected (N, {side}, {side}, 3) input, got {batch.shape}")


def _input_tensor(model: Network, images) -> torch.Tensor:
    batch = np.stack([np.asarray(im) for im in images]) if not isinstance(images, np.ndarray) else images
    if batch.ndim == 3:
        batch = batch[None]
    side = model.backbone.side
    _check_batch_shape(batch, side)
    if batch.dtype == np.uint8:
        return _normalized(batch)
    return _to_tensor(batch.astype(np.float32, copy=False))


def predict_gaze_array(model: GazeModel, images) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        return model(_input_tensor(model, images)).numpy().astype(np.float64)


def predict_gaze(model: GazeModel, image: np.ndarray) -> GazeDirection:
    """Gaze for one image (normalized float, or raw uint8 which is normalized with defaults)."""
    if np.asarray(image).ndim != 3:
        raise ShapeError(f"expected a single (H, W, 3) image, got shape {np.shape(image)}")
    pitch, yaw = np.clip(predict_gaze_array(model, image)[0], -math.pi, math.pi)
    return GazeDirection(float(pitch), float(yaw))


def predict_logits(model: AttentionModel, images) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        return model(_input_tensor(model, images)).numpy().astype(np.float64)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_attention(model: AttentionModel, images) -> list[ClassProbabilities]:
    if isinstance(images, np.ndarray) and images.ndim == 3:
        raise ShapeError("predict_attention takes a batch; wrap a single image in a list")
    if len(images) == 0:
        return []
    probs = softmax(predict_logits(model, images))
    return [ClassProbabilities.from_sequence(p) for p in probs]


# -- checkpoints ---------------------------------------------------------------------

MAGIC = b"GZATTNCK"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<8sII")
_DIGEST = 32


@dataclass
class ModelCheckpoint:
    task: str
    backbone: BackboneConfig
    weights: dict[str, np.ndarray]
    frozen: tuple[str, ...] = ()
    train_config: Optional[TrainConfig] = None
    history: list[EpochRecord] = field(default_factory=list)
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_model(cls, model: Network, cfg: TrainConfig | None = None,
                   history: Sequence[EpochRecord] = ()) -> "ModelCheckpoint":
        return cls(model.task, model.backbone, model.state_arrays(), tuple(model.frozen_names()),
                   cfg, list(history))

    def build(self) -> AnyModel:
        model = MODEL_TYPES[self.task](self.backbone)
        model.load_arrays(self.weights)
        model.freeze(self.frozen)
        model.eval()
        return model

    def save(self, path: str | Path) -> Path:
        return _write_checkpoint(self, Path(path))


def save_checkpoint(model: Network, cfg: TrainConfig | None, history: Sequence[EpochRecord],
                    path: str | Path) -> Path:
    return ModelCheckpoint.from_model(model, cfg, history).save(path)


def _write_checkpoint(ckpt: ModelCheckpoint, path: Path) -> Path:
    tensors, blobs, offset = [], [], 0
    for name in sorted(ckpt.weights):
        arr = np.ascontiguousarray(ckpt.weights[name], dtype="<f4")
        data = arr.tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "task": ckpt.task,
        "backbone": asdict(ckpt.backbone),
        "frozen": list(ckpt.frozen),
        "train_config": ckpt.train_config.to_dict() if ckpt.train_config else None,
        "history": [asdict(h) for h in ckpt.history],
        "tensors": tensors,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, CHECKPOINT_VERSION, len(head)) + head + b"".join(blobs)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + hashlib.sha256(body).digest())
    return path


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size + _DIGEST:
        raise CorruptCheckpoint(f"{path}: file too short ({len(raw)} bytes)")
    magic, version, head_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptCheckpoint(f"{path}: not a gazeattn checkpoint")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, supported {CHECKPOINT_VERSION}")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpoint(f"{path}: checksum mismatch")
    try:
        header = json.loads(body[_PREFIX.size:_PREFIX.size + head_len])
        blob = body[_PREFIX.size + head_len:]
        weights = {}
        for t in header["tensors"]:
            chunk = blob[t["offset"]:t["offset"] + t["nbytes"]]
            weights[t["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(t["shape"]).astype(np.float32)
        cfg = header["train_config"]
        return ModelCheckpoint(
            task=header["task"],
            backbone=BackboneConfig(**header["backbone"]),
            weights=weights,
            frozen=tuple(header["frozen"]),
            train_config=TrainConfig.from_dict(cfg) if cfg else None,
            history=[EpochRecord(**h) for h in header["history"]],
            version=version,
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise CorruptCheckpoint(f"{path}: malformed contents ({exc})") from exc
