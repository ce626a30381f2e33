"""Command-line entry point.

    gazeattn synth-data     --out DIR [--subjects 8 --per-class 30 ...]
    gazeattn train-gaze     --manifest gaze.jsonl --out DIR [--backbone tiny]
    gazeattn transfer-train --gaze-ckpt gaze.ckpt --manifest attention.jsonl --out DIR
    gazeattn loso           --manifest attention.jsonl --out DIR [--gaze-ckpt gaze.ckpt]
    gazeattn eval-assembly  --models a.ckpt b.ckpt --manifest test.jsonl --out DIR
                            (or --annotations segments.jsonl to build the test set first)
    gazeattn infer          --model attention.ckpt --frames DIR|VIDEO --out DIR
                            (or --replay events.jsonl)
    gazeattn report         --report report.json --out DIR

Settings resolve as command-line flags > ``--config`` JSON file > defaults.
The resolved settings are written to ``<out>/config.json``; passing that file
back with ``--config`` reproduces the run. Exit status: 0 success,
1 invalid arguments or configuration, 2 failure while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

from .errors import ConfigError, GazeAttnError, UnknownCommand

log = logging.getLogger("gazeattn")

COMMANDS = ("synth-data", "train-gaze", "transfer-train", "loso", "eval-assembly", "infer", "report")
TRAIN_KEYS = ("lr", "batch_size", "loss", "plateau_patience", "plateau_factor", "early_patience",
              "min_delta", "max_epochs", "momentum", "brightness")
GAZE_STAGE = ("train-gaze",)
ATTENTION_STAGE = ("transfer-train", "loso")


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    out: Optional[str] = None
    # inputs
    manifest: Optional[str] = None
    gaze_ckpt: Optional[str] = None
    model: Optional[str] = None
    models: Optional[list] = None
    annotations: Optional[str] = None
    videos_root: Optional[str] = None
    frames: Optional[str] = None
    replay: Optional[str] = None
    report: Optional[str] = None
    # network
    backbone: str = "vgg16"
    input_side: Optional[int] = None
    pretrained: Optional[str] = None
    fc_units: Optional[int] = None
    # gaze validation split
    held_out: Optional[list] = None
    val_subjects: int = 8
    # training (filled from the stage defaults)
    lr: Optional[float] = None
    batch_size: Optional[int] = None
    loss: Optional[str] = None
    plateau_patience: Optional[int] = None
    plateau_factor: Optional[float] = None
    early_patience: Optional[int] = None
    min_delta: Optional[float] = None
    max_epochs: Optional[int] = None
    momentum: Optional[float] = None
    brightness: Optional[list] = None
    # preprocessing / runtime
    detector: str = "none"
    margin: float = 0.1
    window: int = 7
    dwell: float = 2.0
    fps: float = 25.0
    # synthetic data
    subjects: int = 8
    per_class: int = 30
    gaze_subjects: Optional[int] = None
    gaze_per_subject: Optional[int] = None
    side: int = 64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict, source: str = "dict") -> "RunConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(key, "unknown key", source)
        return cls(**d)

    def train_config(self):
        from .model import TrainConfig

        values = {k: getattr(self, k) for k in TRAIN_KEYS}
        if values["brightness"] is not None:
            values["brightness"] = tuple(values["brightness"])
        return TrainConfig(seed=self.seed, **values)

    def backbone_config(self):
        from .model import BackboneConfig

        return BackboneConfig(self.backbone, self.input_side, self.pretrained, self.fc_units)


def command_defaults(command: str) -> dict:
    from .model import TrainConfig

    base = RunConfig(command).to_dict()
    if command in GAZE_STAGE or command in ATTENTION_STAGE:
        stage = TrainConfig.gaze_defaults() if command in GAZE_STAGE else TrainConfig.attention_defaults()
        train = stage.to_dict()
        base.update({k: train[k] for k in TRAIN_KEYS})
    return base


def resolve_config(command: str, config_file: str | Path | None = None,
                   flags: dict | None = None) -> RunConfig:
    """Merge defaults, an optional JSON file and explicitly given flags (in rising priority)."""
    if command not in COMMANDS:
        raise UnknownCommand(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    merged = command_defaults(command)
    if config_file is not None:
        source = str(config_file)
        try:
            data = json.loads(Path(config_file).read_text())
        except FileNotFoundError:
            raise ConfigError("config", "file does not exist", source) from None
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON ({exc.msg})", source) from None
        if not isinstance(data, dict):
            raise ConfigError("config", "top level must be a JSON object", source)
        data.pop("command", None)
        RunConfig.from_dict({"command": command, **data}, source)
        merged.update(data)
    for key, value in (flags or {}).items():
        if value is None:
            continue
        if key not in merged:
            raise ConfigError(key, "unknown key", "command line")
        merged[key] = value
    merged["command"] = command
    cfg = RunConfig.from_dict(merged)
    _check_types(cfg)
    return cfg


def _check_types(cfg: RunConfig) -> None:
    if cfg.command in GAZE_STAGE or cfg.command in ATTENTION_STAGE:
        try:
            cfg.train_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError("train", str(exc)) from None
    if cfg.command in ("train-gaze", "loso"):
        try:
            cfg.backbone_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError("backbone", str(exc)) from None
    if not isinstance(cfg.seed, int):
        raise ConfigError("seed", f"must be an integer, got {cfg.seed!r}")


REQUIRED = {
    "synth-data": ("out",),
    "train-gaze": ("manifest", "out"),
    "transfer-train": ("gaze_ckpt", "manifest", "out"),
    "loso": ("manifest", "out"),
    "eval-assembly": ("models", "out"),
    "infer": ("out",),
    "report": ("report", "out"),
}
INPUT_PATHS = ("manifest", "gaze_ckpt", "model", "annotations", "videos_root", "frames", "replay",
               "report", "pretrained")


def validate(cfg: RunConfig) -> None:
    for key in REQUIRED[cfg.command]:
        if getattr(cfg, key) in (None, [], ""):
            raise ConfigError(key, "required")
    for key in INPUT_PATHS:
        value = getattr(cfg, key)
        if value is not None and not Path(value).exists():
            raise ConfigError(key, f"path does not exist: {value}")
    for m in cfg.models or []:
        if not Path(m).exists():
            raise ConfigError("models", f"path does not exist: {m}")
    if cfg.command == "eval-assembly" and not (cfg.manifest or cfg.annotations):
        raise ConfigError("manifest", "required (or --annotations)")
    if cfg.command == "infer":
        if not cfg.replay and not (cfg.frames and cfg.model):
            raise ConfigError("frames", "infer needs --model with --frames, or --replay")
    if cfg.command == "eval-assembly" and cfg.annotations and cfg.detector == "none":
        raise ConfigError("detector", "building a test set needs a face detector")


def make_detector(spec: str):
    from .vision import CascadeDetector, ContrastDetector

    if spec == "none":
        return None
    if spec == "contrast":
        return ContrastDetector()
    if spec.startswith("cascade:"):
        return CascadeDetector(spec.split(":", 1)[1])
    raise ConfigError("detector", f"expected none, contrast or cascade:<xml>, got {spec!r}")


# -- commands ---------------------------------------------------------------------


def cmd_synth_data(cfg: RunConfig, out: Path) -> None:
    from .datasets import generate_synthetic

    ds = generate_synthetic(out, cfg.subjects, cfg.per_class, cfg.seed,
                            gaze_subjects=cfg.gaze_subjects, gaze_per_subject=cfg.gaze_per_subject,
                            side=cfg.side)
    log.info("wrote %d gaze and %d attention samples to %s", len(ds.gaze), len(ds.attention), out)


def cmd_train_gaze(cfg: RunConfig, out: Path) -> None:
    from .datasets import load_manifest, split_by_subject
    from .model import build_gaze_model, train_gaze

    manifest = load_manifest(cfg.manifest, "gaze")
    subjects = manifest.subjects
    held = cfg.held_out
    if held is None:
        if cfg.val_subjects >= len(subjects):
            raise ConfigError("val_subjects", f"{cfg.val_subjects} >= {len(subjects)} subjects")
        held = subjects[-cfg.val_subjects:]
    train, val = split_by_subject(manifest, held)
    model = build_gaze_model(cfg.backbone_config(), cfg.seed)
    ckpt = train_gaze(model, train, val, cfg.train_config())
    ckpt.save(out / "gaze.ckpt")
    _write_history(ckpt.history, out / "history.csv")
    best = min(h.val_loss for h in ckpt.history)
    log.info("gaze model: %d epochs, best validation MAE %.4f rad", len(ckpt.history), best)


def _write_history(history, path: Path) -> None:
    lines = ["epoch,train_loss,val_loss,lr"]
    for h in history:
        val = "" if h.val_loss is None else repr(h.val_loss)
        lines.append(f"{h.epoch},{h.train_loss!r},{val},{h.lr!r}")
    path.write_text("\n".join(lines) + "\n")


def _attention_trainer(cfg: RunConfig, gaze_source):
    from .model import train_attention, transfer_to_attention

    train_cfg = cfg.train_config()

    def trainer(manifest, seed):
        model = transfer_to_attention(gaze_source, seed)
        train_attention(model, manifest, train_cfg)
        return model

    return trainer


def _gaze_source(cfg: RunConfig):
    from .model import build_gaze_model, load_checkpoint

    if cfg.gaze_ckpt:
        return load_checkpoint(cfg.gaze_ckpt)
    log.warning("no --gaze-ckpt given: transferring from an untrained %s backbone", cfg.backbone)
    return build_gaze_model(cfg.backbone_config(), cfg.seed)


def cmd_transfer_train(cfg: RunConfig, out: Path) -> None:
    from .datasets import load_manifest
    from .model import load_checkpoint, train_attention, transfer_to_attention

    manifest = load_manifest(cfg.manifest, "attention")
    model = transfer_to_attention(load_checkpoint(cfg.gaze_ckpt), cfg.seed)
    ckpt = train_attention(model, manifest, cfg.train_config())
    ckpt.save(out / "attention.ckpt")
    _write_history(ckpt.history, out / "history.csv")


def cmd_loso(cfg: RunConfig, out: Path) -> None:
    from .datasets import load_manifest
    from .eval import render_report, run_loso
    from .model import ModelCheckpoint

    manifest = load_manifest(cfg.manifest, "attention")
    trainer = _attention_trainer(cfg, _gaze_source(cfg))
    ckpt_dir = out / "checkpoints"

    def save_fold(subject, model, report):
        ModelCheckpoint.from_model(model, cfg.train_config()).save(ckpt_dir / f"fold_{subject}.ckpt")

    report = run_loso(manifest, trainer, cfg.seed, make_detector(cfg.detector), cfg.margin, save_fold)
    report.save_json(out / "report.json")
    render_report(report, out)
    log.info("LOSO average accuracy %.3f, F1 %.3f", report.average_accuracy, report.average_f1)


def cmd_eval_assembly(cfg: RunConfig, out: Path) -> None:
    from .datasets import build_assembly_test_set, load_manifest, open_frame_source
    from .eval import LosoReport, evaluate_models, render_report
    from .model import load_checkpoint

    detector = make_detector(cfg.detector)
    if cfg.annotations:
        segments = load_manifest(cfg.annotations, "segment")
        root = Path(cfg.videos_root) if cfg.videos_root else segments.root
        sources: dict = {}

        def video(locator):
            if locator not in sources:
                sources[locator] = open_frame_source(root / locator, cfg.fps)
            return sources[locator]

        test, rejections = build_assembly_test_set(segments.records, video, detector,
                                                   out / "testset", cfg.margin)
        rejections.write_csv(out / "testset" / "rejections.csv")
        from .datasets import save_manifest

        save_manifest(test, out / "testset" / "attention.jsonl")
        detector = None  # crops are already faces
    else:
        test = load_manifest(cfg.manifest, "attention")
    models = [load_checkpoint(p).build() for p in cfg.models]
    names = [Path(p).stem for p in cfg.models]
    reports = evaluate_models(models, test, names, detector, cfg.margin)
    LosoReport.from_folds(reports).save_json(out / "report.json")
    render_report(reports, out)


def cmd_infer(cfg: RunConfig, out: Path) -> None:
    from .datasets import open_frame_source
    from .model import load_checkpoint
    from .runtime import adapt_policy, read_event_log, run_pipeline, smooth_majority, write_log
    from .vision import ContrastDetector

    if cfg.replay:
        events = read_event_log(cfg.replay)
        states = list(smooth_majority(events, cfg.window))
        commands = list(adapt_policy(states, cfg.dwell))
    else:
        model = load_checkpoint(cfg.model).build()
        detector = make_detector(cfg.detector) or ContrastDetector()
        frames = open_frame_source(cfg.frames, cfg.fps)
        events, states, commands = run_pipeline(frames, model, detector, cfg.window, cfg.dwell,
                                                cfg.fps, cfg.margin)
    write_log(events, out / "events.jsonl")
    write_log(states, out / "states.jsonl")
    write_log(commands, out / "commands.jsonl")
    log.info("%d frames, %d command switches", len(events), sum(c.switched for c in commands))


def cmd_report(cfg: RunConfig, out: Path) -> None:
    from .eval import LosoReport, render_report

    render_report(LosoReport.load_json(cfg.report), out)


HANDLERS = {
    "synth-data": cmd_synth_data,
    "train-gaze": cmd_train_gaze,
    "transfer-train": cmd_transfer_train,
    "loso": cmd_loso,
    "eval-assembly": cmd_eval_assembly,
    "infer": cmd_infer,
    "report": cmd_report,
}


# -- argument parsing -----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError("argv", message, "command line")


def _floats(text: str) -> list:
    return [float(v) for v in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gazeattn", description="Gaze-based attention recognition pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        # default=None everywhere: only flags the user typed override the config file.
        p.add_argument("--config", dest="config_file")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train-gaze", "transfer-train", "loso", "eval-assembly"):
            p.add_argument("--manifest")
        if name in ("train-gaze", "loso"):
            p.add_argument("--backbone")
            p.add_argument("--input-side", type=int)
            p.add_argument("--pretrained")
            p.add_argument("--fc-units", type=int)
        if name in ("transfer-train", "loso"):
            p.add_argument("--gaze-ckpt")
        if name == "train-gaze":
            p.add_argument("--held-out", type=lambda s: s.split(","))
            p.add_argument("--val-subjects", type=int)
        if name in GAZE_STAGE + ATTENTION_STAGE:
            p.add_argument("--lr", type=float)
            p.add_argument("--batch-size", type=int)
            p.add_argument("--momentum", type=float)
            p.add_argument("--max-epochs", type=int)
            p.add_argument("--plateau-patience", type=int)
            p.add_argument("--plateau-factor", type=float)
            p.add_argument("--early-patience", type=int)
            p.add_argument("--min-delta", type=float)
            p.add_argument("--brightness", type=_floats, help="lo,hi brightness factors")
        if name in ("loso", "eval-assembly", "infer"):
            p.add_argument("--detector", help="none | contrast | cascade:<xml>")
            p.add_argument("--margin", type=float)
        if name == "eval-assembly":
            p.add_argument("--models", nargs="+")
            p.add_argument("--annotations")
            p.add_argument("--videos-root")
        if name in ("eval-assembly", "infer"):
            p.add_argument("--fps", type=float)
        if name == "infer":
            p.add_argument("--model")
            p.add_argument("--frames")
            p.add_argument("--replay")
            p.add_argument("--window", type=int)
            p.add_argument("--dwell", type=float)
        if name == "report":
            p.add_argument("--report")
        if name == "synth-data":
            p.add_argument("--subjects", type=int)
            p.add_argument("--per-class", type=int)
            p.add_argument("--gaze-subjects", type=int)
            p.add_argument("--gaze-per-subject", type=int)
            p.add_argument("--side", type=int)
    return parser


def dispatch(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if argv and not argv[0].startswith("-") and argv[0] not in COMMANDS:
            raise UnknownCommand(f"unknown command {argv[0]!r}; expected one of {', '.join(COMMANDS)}")
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UnknownCommand(f"no command given; expected one of {', '.join(COMMANDS)}")
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s")
        flags = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config_file", "verbose")}
        cfg = resolve_config(args.command, args.config_file, flags)
        validate(cfg)
    except (ConfigError, UnknownCommand) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        HANDLERS[cfg.command](cfg, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (GazeAttnError, OSError, ValueError) as exc:
        log.error("%s failed: %s", cfg.command, exc)
        return 2
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
