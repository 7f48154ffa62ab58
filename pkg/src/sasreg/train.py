"""Training loop, ablation suite and inference latency benchmark."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses
from .config import TrainConfig
from .data import AugmentConfig, DatasetSplit, Frame, augment, split_frames
from .losses import total_loss
from .metrics import MetricsReport, evaluate_dataset
from .model import (ModelConfig, SceneAppearanceModel, load_checkpoint,
                    registration_latency, save_checkpoint)

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Total loss became NaN/Inf; carries the offending step for diagnosis."""


class EmptyDatasetError(ValueError):
    pass


ABLATION_CONFIGS: dict[str, dict] = {
    "full": {},
    "no_scene": {"drop_scene": True},
    "no_cycle": {"drop_cycle": True},
    "no_align": {"drop_align": True},
    "no_appearance_encoder": {"drop_appearance_encoder": True},
}


@dataclass
class TrainResult:
    model: SceneAppearanceModel
    log: list[dict]
    out_dir: Path
    best_checkpoint: Path
    final_checkpoint: Path
    best_val_ncc: float


def _model_from_config(config: TrainConfig) -> SceneAppearanceModel:
    return SceneAppearanceModel(ModelConfig(
        base_channels=config.base_channels,
        appearance_base_channels=config.appearance_base_channels,
        scene_channels=config.scene_channels,
        code_dim=config.code_dim,
        eps=config.eps,
        use_appearance_encoder=not config.drop_appearance_encoder,
    ))


def _halves_to_tensors(frames: list[Frame], device: str):
    odd = torch.stack([torch.as_tensor(f.odd_half, dtype=torch.float32)
                       for f in frames]).unsqueeze(1).to(device)
    even = torch.stack([torch.as_tensor(f.even_half, dtype=torch.float32)
                        for f in frames]).unsqueeze(1).to(device)
    return odd, even


def _validation_ncc(model: SceneAppearanceModel, frames: list[Frame],
                    device: str, batch_size: int = 16) -> float:
    """Mean NCC(I_even_to_odd, I_odd) over a split."""
    if not frames:
        return math.nan
    values = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(frames), batch_size):
            chunk = frames[start:start + batch_size]
            odd, even = _halves_to_tensors(chunk, device)
            e2o = model.cross_render(odd, even)[0]
            for i in range(len(chunk)):
                values.append(float(losses.ncc(e2o[i], odd[i], on_constant="zero")))
    model.train()
    return float(np.mean(values))


def _rng_states(shuffle_rng: np.random.Generator) -> dict:
    return {"torch": torch.get_rng_state(),
            "numpy_shuffle": shuffle_rng.bit_generator.state}


def train(config: TrainConfig, frames: list[Frame], split: DatasetSplit,
          resume_from: Path | None = None) -> TrainResult:
    """Optimize the model on the train split, validating on the val split.

    Per minibatch: augment -> deinterleaved halves -> cross_render ->
    self-reconstructions -> weighted loss -> Adam step. Every step's loss
    breakdown goes to `<out_dir>/metrics.jsonl` (one epoch summary line per
    epoch); checkpoints land under `<out_dir>/checkpoints/`. Deterministic
    for a fixed seed on a fixed backend. Raises TrainingDivergedError when
    the total loss stops being finite.
    """
    by_split = split_frames(frames, split)
    train_frames = by_split["train"]
    val_frames = by_split["val"]
    if not train_frames:
        raise EmptyDatasetError("train split is empty")

    out_dir = Path(config.out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(config.to_sections(), indent=1))

    torch.manual_seed(config.seed)
    shuffle_rng = np.random.default_rng([config.seed, 0xA5])
    model = _model_from_config(config).to(config.device)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr,
                                 betas=(config.beta1, config.beta2))
    weights = config.effective_loss_weights()
    aug_config = AugmentConfig() if config.augment else AugmentConfig.disabled()

    step = 0
    start_epoch = 0
    best_val = -math.inf
    if resume_from is not None:
        blob = torch.load(Path(resume_from), map_location="cpu", weights_only=False)
        model.load_state_dict(blob["model_state"])
        optimizer.load_state_dict(blob["optimizer_state"])
        step = blob["step"]
        start_epoch = blob["epoch"]
        best_val = blob["best_val_ncc"]
        torch.set_rng_state(blob["rng"]["torch"])
        shuffle_rng.bit_generator.state = blob["rng"]["numpy_shuffle"]
        model.to(config.device)

    log_path = out_dir / "metrics.jsonl"
    log_entries: list[dict] = []
    log_file = open(log_path, "a" if resume_from is not None else "w")

    def emit(entry: dict):
        log_entries.append(entry)
        log_file.write(json.dumps(entry) + "\n")
        log_file.flush()

    def save_train_checkpoint(path: Path):
        save_checkpoint(model, path, training_step=step,
                        loss_weights=weights.to_dict(),
                        extra_state={
                            "optimizer_state": optimizer.state_dict(),
                            "step": step, "epoch": epoch + 1,
                            "best_val_ncc": best_val,
                            "rng": _rng_states(shuffle_rng),
                        })

    model.train()
    best_path = ckpt_dir / "best.pt"
    final_path = ckpt_dir / "final.pt"
    epoch = start_epoch - 1  # stays valid if the epoch loop body never runs
    try:
        for epoch in range(start_epoch, config.epochs):
            epoch_t0 = time.perf_counter()
            order = shuffle_rng.permutation(len(train_frames))
            epoch_totals = []
            for start in range(0, len(order), config.batch_size):
                batch_ids = order[start:start + config.batch_size]
                batch = []
                for idx in batch_ids:
                    fr = train_frames[idx]
                    seed = int(shuffle_rng.integers(0, 2 ** 31 - 1))
                    batch.append(augment(fr, seed, aug_config))
                odd, even = _halves_to_tensors(batch, config.device)

                e2o, _o2e, s_odd, s_even, a_odd, a_even = model.cross_render(odd, even)
                recons = model.synthesize(torch.cat([s_odd, s_even], dim=0),
                                          torch.cat([a_odd, a_even], dim=0))
                recon_odd, recon_even = recons.chunk(2, dim=0)

                breakdown = total_loss(s_odd, s_even, odd, even,
                                       recon_odd, recon_even, e2o, weights)
                if not torch.isfinite(breakdown.total):
                    raise TrainingDivergedError(
                        f"total loss not finite at step {step} (epoch {epoch}): "
                        f"{breakdown.floats()}")
                optimizer.zero_grad()
                breakdown.total.backward()
                optimizer.step()
                step += 1
                epoch_totals.append(float(breakdown.total))
                emit({"type": "step", "step": step, "epoch": epoch,
                      **breakdown.floats()})

            entry = {"type": "epoch", "epoch": epoch, "step": step,
                     "mean_total": float(np.mean(epoch_totals)),
                     "seconds": time.perf_counter() - epoch_t0}
            if val_frames and (epoch + 1) % config.val_every == 0:
                val_ncc = _validation_ncc(model, val_frames, config.device)
                entry["val_ncc"] = val_ncc
                if val_ncc > best_val:
                    best_val = val_ncc
                    save_train_checkpoint(best_path)
            emit(entry)
            logger.info("epoch %d/%d total=%.4f%s", epoch + 1, config.epochs,
                        entry["mean_total"],
                        f" val_ncc={entry['val_ncc']:.4f}" if "val_ncc" in entry else "")
            if (epoch + 1) % config.checkpoint_every == 0:
                save_train_checkpoint(ckpt_dir / f"epoch_{epoch + 1:04d}.pt")
        save_train_checkpoint(final_path)
    finally:
        log_file.close()

    if not best_path.exists():
        best_path = final_path
    return TrainResult(model=model, log=log_entries, out_dir=out_dir,
                       best_checkpoint=best_path, final_checkpoint=final_path,
                       best_val_ncc=best_val)


def overfit_steps(config: TrainConfig, frames: list[Frame], steps: int = 50) -> list[float]:
    """Sanity harness: repeat one fixed batch for `steps` updates and return
    the per-step total losses (no augmentation, no logging)."""
    if not frames:
        raise EmptyDatasetError("no frames")
    torch.manual_seed(config.seed)
    model = _model_from_config(config).to(config.device)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr,
                                 betas=(config.beta1, config.beta2))
    weights = config.effective_loss_weights()
    odd, even = _halves_to_tensors(frames[:config.batch_size], config.device)
    totals = []
    model.train()
    for _ in range(steps):
        e2o, _o2e, s_odd, s_even, a_odd, a_even = model.cross_render(odd, even)
        recons = model.synthesize(torch.cat([s_odd, s_even], dim=0),
                                  torch.cat([a_odd, a_even], dim=0))
        recon_odd, recon_even = recons.chunk(2, dim=0)
        breakdown = total_loss(s_odd, s_even, odd, even, recon_odd, recon_even,
                               e2o, weights)
        optimizer.zero_grad()
        breakdown.total.backward()
        optimizer.step()
        totals.append(float(breakdown.total))
    return totals


def run_ablation_suite(base_config: TrainConfig, frames: list[Frame],
                       split: DatasetSplit,
                       variants: dict[str, dict] | None = None
                       ) -> dict[str, MetricsReport]:
    """Train {full, no_scene, no_cycle, no_align, no_appearance_encoder}
    under identical seeds and budgets, then evaluate each on the test split.

    Writes one run directory per variant under the base out_dir plus a
    side-by-side `ablation_summary.json`.
    """
    variants = ABLATION_CONFIGS if variants is None else variants
    base_sections = base_config.to_sections()
    base_out = Path(base_config.out_dir)
    test_frames = split_frames(frames, split)["test"]
    reports: dict[str, MetricsReport] = {}
    for name, flags in variants.items():
        sections = json.loads(json.dumps(base_sections))  # deep copy
        for key, value in flags.items():
            sections["ablation"][key] = value
        sections["run"]["out_dir"] = str(base_out / name)
        cfg = TrainConfig.from_sections(sections)
        logger.info("ablation %s: training", name)
        result = train(cfg, frames, split)
        model, _ = load_checkpoint(result.best_checkpoint)
        report = evaluate_dataset(test_frames, model, device=cfg.device, label=name)
        report.save(base_out / name / "report.json")
        reports[name] = report
    summary = {name: rep.aggregate for name, rep in reports.items()}
    (base_out / "ablation_summary.json").write_text(json.dumps(summary, indent=1))
    return reports


@dataclass
class BenchResult:
    mean_ms: float
    std_ms: float
    fps: float
    repetitions: int
    warmup: int
    timings_ms: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"mean_ms": self.mean_ms, "std_ms": self.std_ms, "fps": self.fps,
                "repetitions": self.repetitions, "warmup": self.warmup,
                "timings_ms": self.timings_ms}


def benchmark_inference(model: SceneAppearanceModel, frame_shape: tuple[int, int],
                        repetitions: int = 100, warmup: int = 10,
                        device: str = "cpu") -> BenchResult:
    """Wall-clock latency of one registration pass on random frames.

    Runs `warmup` discarded passes then exactly `repetitions` timed ones;
    fps is 1000 / mean_ms.
    """
    timings = registration_latency(model, frame_shape, repetitions=repetitions,
                                   warmup=warmup, device=device)
    mean_ms = float(np.mean(timings))
    std_ms = float(np.std(timings, ddof=1)) if len(timings) > 1 else 0.0
    return BenchResult(mean_ms=mean_ms, std_ms=std_ms, fps=1000.0 / mean_ms,
                       repetitions=repetitions, warmup=warmup,
                       timings_ms=[float(t) for t in timings])
