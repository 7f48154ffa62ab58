"""Command-line front end.

Subcommands: simulate, train, register, eval, ablate, bench, report.
Numeric simulate flags accept either a scalar ("1.1") or a "lo:hi" range for
per-frame uniform draws. Exit codes: 0 ok, 2 invalid parameters/config,
3 I/O failure, 4 missing input, 5 checkpoint schema mismatch, 6 malformed
data, 7 training diverged. SASREG_DEVICE selects the compute device and
SASREG_SEED overrides the configured seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import figures, metrics
from .config import ConfigError, TrainConfig, apply_env, apply_overrides
from .data import (DataError, DatasetNotFoundError, Frame, FrameSource,
                   MalformedImageError, load_dataset, load_image, load_manifest,
                   save_image, split_dataset, split_frames, DatasetSplit, interleave)
from .model import ModelConfig, SceneAppearanceModel, SchemaVersionError, load_checkpoint
from .sim import DatasetRecipe, InvalidParamsError, SimError
from .synth import synthesize_dataset
from .train import TrainingDivergedError, benchmark_inference, run_ablation_suite, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID_PARAMS = 2
EXIT_IO = 3
EXIT_MISSING_INPUT = 4
EXIT_SCHEMA_MISMATCH = 5
EXIT_MALFORMED = 6
EXIT_DIVERGED = 7


@dataclass
class CommandOutcome:
    exit_code: int
    artifacts_written: list[Path] = field(default_factory=list)
    summary: str = ""


def _scalar_or_range(text: str):
    """Parse "1.1" to a float or "0.7:1.3" to a (lo, hi) tuple."""
    if ":" in text:
        lo, hi = text.split(":", 1)
        return (float(lo), float(hi))
    return float(text)


def _device() -> str:
    return os.environ.get("SASREG_DEVICE", "cpu")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sasreg",
        description="Scene-appearance separation registration for bidirectional scans")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic dataset with ground truth")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vessels", type=_scalar_or_range, default=(3, 7),
                   help="vessel count per phantom (scalar or lo:hi)")
    p.add_argument("--gain-odd", type=_scalar_or_range, default=1.0)
    p.add_argument("--gain-even", type=_scalar_or_range, default=1.0)
    p.add_argument("--offset-odd", type=_scalar_or_range, default=0.0)
    p.add_argument("--offset-even", type=_scalar_or_range, default=0.0)
    p.add_argument("--shift", type=_scalar_or_range, default=0.0,
                   help="even-direction column shift in px (odd direction is the reference)")
    p.add_argument("--blur", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=0.0)

    p = sub.add_parser("train", help="train a registration model")
    p.add_argument("--config", type=Path, default=None, help="TOML config file")
    p.add_argument("--data", type=Path, default=None, help="dataset root (overrides data.root)")
    p.add_argument("--out", type=Path, default=None, help="run dir (overrides run.out_dir)")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")

    p = sub.add_parser("register", help="re-render even halves under odd conditions")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--input", required=True, type=Path, help="dataset root or one PNG")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--layout", default="synthetic", choices=["synthetic", "orpam4k"])

    p = sub.add_parser("eval", help="score registration quality on a split")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--layout", default="synthetic", choices=["synthetic", "orpam4k"])
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--out", required=True, type=Path, help="report JSON path")
    p.add_argument("--label", default="model")
    p.add_argument("--baseline-out", type=Path, default=None,
                   help="also score the unregistered halves into this JSON")

    p = sub.add_parser("ablate", help="train and compare ablation variants")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("bench", help="measure registration latency")
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="checkpoint to time (default: fresh default-config model)")
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--repetitions", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--out", type=Path, default=None, help="write timings JSON here")

    p = sub.add_parser("report", help="render figures and tables from report JSONs")
    p.add_argument("reports", nargs="+", type=Path)
    p.add_argument("--labels", default=None, help="comma-separated method names")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--data", type=Path, default=None,
                   help="dataset root for before/after overlay figures")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--overlay-frames", type=int, default=4)
    return parser


def _resolve_train_config(args) -> TrainConfig:
    if args.config is not None:
        if not Path(args.config).exists():
            raise FileNotFoundError(f"config file {args.config} not found")
        cfg = TrainConfig.from_toml(args.config)
    else:
        cfg = TrainConfig()
    overrides = dict(getattr(args, "dotted_overrides", {}))
    if args.data is not None:
        overrides["data.root"] = str(args.data)
    if getattr(args, "out", None) is not None:
        overrides["run.out_dir"] = str(args.out)
    cfg = apply_overrides(cfg, overrides)
    return apply_env(cfg)


def _load_frames_and_split(root: Path, layout: str, seed: int) -> tuple[list[Frame], DatasetSplit]:
    frames = load_dataset(root, layout=layout)
    if not frames:
        raise DatasetNotFoundError(f"no frames found under {root}")
    manifest_splits = {}
    if layout == "synthetic" and (Path(root) / "manifest.json").exists():
        manifest_splits = load_manifest(root).splits
    if manifest_splits.get("train"):
        split = DatasetSplit(train_ids=manifest_splits["train"],
                             val_ids=manifest_splits.get("val", []),
                             test_ids=manifest_splits.get("test", []))
    else:
        split = split_dataset([f.frame_id for f in frames], seed=seed)
    return frames, split


def cmd_simulate(args) -> CommandOutcome:
    recipe = DatasetRecipe(height=args.height, width=args.width,
                           vessel_count=args.vessels,
                           gain_odd=args.gain_odd, gain_even=args.gain_even,
                           offset_odd=args.offset_odd, offset_even=args.offset_even,
                           shift=args.shift, blur_sigma=args.blur,
                           noise_sigma=args.noise)
    frames, _split = synthesize_dataset(args.out, recipe, count=args.frames,
                                        seed=args.seed)
    artifacts = [args.out / "manifest.json"]
    artifacts += [args.out / "frames" / f"{f.frame_id}.png" for f in frames]
    artifacts += [args.out / "gt" / f"{f.frame_id}.json" for f in frames]
    return CommandOutcome(EXIT_OK, artifacts,
                          f"wrote {len(frames)} frames to {args.out}")


def cmd_train(args) -> CommandOutcome:
    cfg = _resolve_train_config(args)
    if not cfg.data_root:
        raise ConfigError("no dataset given: set data.root or pass --data")
    frames, split = _load_frames_and_split(Path(cfg.data_root), cfg.layout, cfg.seed)
    result = train(cfg, frames, split, resume_from=args.resume)
    artifacts = [result.out_dir / "metrics.jsonl", result.best_checkpoint,
                 result.final_checkpoint]
    return CommandOutcome(EXIT_OK, artifacts,
                          f"trained {cfg.epochs} epochs, best val NCC "
                          f"{result.best_val_ncc:.4f}, run dir {result.out_dir}")


def cmd_register(args) -> CommandOutcome:
    model, _sidecar = load_checkpoint(args.checkpoint)
    input_path = Path(args.input)
    if input_path.is_file():
        frames = [Frame.from_interleaved(load_image(input_path), frame_id=input_path.stem,
                                         source=FrameSource.REAL)]
    else:
        frames = load_dataset(input_path, layout=args.layout)
        if not frames:
            raise DatasetNotFoundError(f"no frames found under {input_path}")
    corrected = metrics.register_frames(model, frames, device=_device())
    out = Path(args.out)
    artifacts = []
    for frame, e2o in zip(frames, corrected):
        p1 = out / f"{frame.frame_id}_even_to_odd.png"
        save_image(p1, e2o)
        p2 = out / f"{frame.frame_id}_corrected.png"
        save_image(p2, interleave(np.asarray(frame.odd_half, dtype=np.float64),
                                  np.asarray(e2o, dtype=np.float64)))
        artifacts += [p1, p2]
    return CommandOutcome(EXIT_OK, artifacts,
                          f"registered {len(frames)} frames into {out}")


def cmd_eval(args) -> CommandOutcome:
    model, _sidecar = load_checkpoint(args.checkpoint)
    frames, split = _load_frames_and_split(args.data, args.layout, seed=0)
    subset = frames if args.split == "all" else split_frames(frames, split)[args.split]
    if not subset:
        raise DatasetNotFoundError(f"split {args.split!r} is empty")
    report = metrics.evaluate_dataset(subset, model, device=_device(), label=args.label)
    report.save(args.out)
    artifacts = [Path(args.out)]
    summary = (f"{args.label}: ssim {report.aggregate['ssim']['mean']:.3f}, "
               f"ncc {report.aggregate['ncc']['mean']:.3f} over {len(subset)} frames")
    if args.baseline_out is not None:
        metrics.baseline_report(subset).save(args.baseline_out)
        artifacts.append(Path(args.baseline_out))
    return CommandOutcome(EXIT_OK, artifacts, summary)


def cmd_ablate(args) -> CommandOutcome:
    cfg = _resolve_train_config(args)
    if not cfg.data_root:
        raise ConfigError("no dataset given: set data.root or pass --data")
    frames, split = _load_frames_and_split(Path(cfg.data_root), cfg.layout, cfg.seed)
    reports = run_ablation_suite(cfg, frames, split)
    out = Path(cfg.out_dir)
    table_path = out / "comparison.md"
    table_path.write_text(figures.markdown_table(reports))
    artifacts = [out / "ablation_summary.json", table_path]
    artifacts += [out / name / "report.json" for name in reports]
    nccs = ", ".join(f"{name}={rep.aggregate['ncc']['mean']:.3f}"
                     for name, rep in reports.items())
    return CommandOutcome(EXIT_OK, artifacts, f"ablation NCC: {nccs}")


def cmd_bench(args) -> CommandOutcome:
    if args.checkpoint is not None:
        model, _ = load_checkpoint(args.checkpoint)
    else:
        model = SceneAppearanceModel(ModelConfig())
    result = benchmark_inference(model, (args.height, args.width),
                                 repetitions=args.repetitions, warmup=args.warmup,
                                 device=_device())
    artifacts = []
    if args.out is not None:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(result.to_dict(), indent=1))
        artifacts.append(out)
    return CommandOutcome(EXIT_OK, artifacts,
                          f"{result.mean_ms:.2f} ± {result.std_ms:.2f} ms over "
                          f"{result.repetitions} runs ({result.fps:.1f} fps)")


def cmd_report(args) -> CommandOutcome:
    report_objs = {}
    labels = args.labels.split(",") if args.labels else None
    if labels is not None and len(labels) != len(args.reports):
        raise ConfigError(f"{len(args.reports)} reports but {len(labels)} labels")
    for i, path in enumerate(args.reports):
        if not Path(path).exists():
            raise FileNotFoundError(f"report {path} not found")
        try:
            report = metrics.MetricsReport.load(path)
        except (KeyError, json.JSONDecodeError) as exc:
            raise MalformedImageError(f"malformed report {path}: {exc}") from exc
        label = labels[i] if labels else (report.label or Path(path).stem)
        report_objs[label] = report
    artifacts = figures.save_report_figures(report_objs, args.out)
    if args.data is not None:
        frames = load_dataset(args.data, layout="synthetic")[:args.overlay_frames]
        corrected = None
        if args.checkpoint is not None:
            model, _ = load_checkpoint(args.checkpoint)
            corrected = metrics.register_frames(model, frames, device=_device())
        for i, frame in enumerate(frames):
            path = Path(args.out) / f"overlay_before_{frame.frame_id}.png"
            figures.save_overlay(frame.odd_half, frame.even_half, path,
                                 title=f"{frame.frame_id} before")
            artifacts.append(path)
            if corrected is not None:
                path = Path(args.out) / f"overlay_after_{frame.frame_id}.png"
                figures.save_overlay(frame.odd_half, corrected[i], path,
                                     title=f"{frame.frame_id} after")
                artifacts.append(path)
    return CommandOutcome(EXIT_OK, artifacts,
                          f"wrote {len(artifacts)} figure/table files to {args.out}")


_HANDLERS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "register": cmd_register,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
    "report": cmd_report,
}


def _split_dotted_overrides(argv: list[str]) -> tuple[list[str], dict[str, str]]:
    """Peel off --section.key value pairs before argparse sees them."""
    kept = []
    overrides = {}
    i = 0
    while i < len(argv):
        arg = argv[i]
        if arg.startswith("--") and "." in arg.split("=", 1)[0]:
            if "=" in arg:
                dotted, value = arg[2:].split("=", 1)
                overrides[dotted] = value
                i += 1
            else:
                if i + 1 >= len(argv):
                    raise ConfigError(f"override {arg} needs a value")
                overrides[arg[2:]] = argv[i + 1]
                i += 2
        else:
            kept.append(arg)
            i += 1
    return kept, overrides


def run(argv: list[str] | None = None) -> CommandOutcome:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        kept, overrides = _split_dotted_overrides(argv)
        parser = _build_parser()
        args = parser.parse_args(kept)
        args.dotted_overrides = overrides
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s")
        return _HANDLERS[args.command](args)
    except (InvalidParamsError, SimError, ConfigError) as exc:
        return CommandOutcome(EXIT_INVALID_PARAMS, [], f"invalid parameters: {exc}")
    except SchemaVersionError as exc:
        return CommandOutcome(EXIT_SCHEMA_MISMATCH, [], f"schema mismatch: {exc}")
    except (DatasetNotFoundError, FileNotFoundError) as exc:
        return CommandOutcome(EXIT_MISSING_INPUT, [], f"missing input: {exc}")
    except (MalformedImageError, DataError) as exc:
        return CommandOutcome(EXIT_MALFORMED, [], f"malformed data: {exc}")
    except TrainingDivergedError as exc:
        return CommandOutcome(EXIT_DIVERGED, [], f"training diverged: {exc}")
    except ValueError as exc:
        return CommandOutcome(EXIT_INVALID_PARAMS, [], f"invalid parameters: {exc}")
    except OSError as exc:
        return CommandOutcome(EXIT_IO, [], f"I/O failure: {exc}")


def main(argv: list[str] | None = None) -> int:
    outcome = run(argv)
    stream = sys.stdout if outcome.exit_code == EXIT_OK else sys.stderr
    print(outcome.summary, file=stream)
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
