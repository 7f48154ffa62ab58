"""Whole-dataset synthesis: sample ground truths, render frames, write a root."""

from __future__ import annotations

from pathlib import Path

from .data import DatasetSplit, Frame, FrameSource, split_dataset, write_dataset
from .sim import DatasetRecipe, frame_seeds, simulate_pair


def synthesize_frames(recipe: DatasetRecipe, count: int, seed: int) -> list[Frame]:
    """Render `count` frames with per-frame seeds derived from `seed`."""
    frames = []
    for i, frame_seed in enumerate(frame_seeds(seed, count)):
        gt = recipe.sample_ground_truth(frame_seed)
        _i_odd, _i_even, interleaved = simulate_pair(gt)
        frames.append(Frame.from_interleaved(
            interleaved, frame_id=f"frame_{i:05d}", source=FrameSource.SYNTHETIC,
            ground_truth=gt.sidecar_dict()))
    return frames


def synthesize_dataset(out_dir: Path, recipe: DatasetRecipe, count: int, seed: int,
                       ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
                       ) -> tuple[list[Frame], DatasetSplit]:
    """Render frames, split them and write the on-disk layout."""
    frames = synthesize_frames(recipe, count, seed)
    split = split_dataset([f.frame_id for f in frames], ratios=ratios, seed=seed)
    write_dataset(Path(out_dir), frames, split=split)
    return frames, split
