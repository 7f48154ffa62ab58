"""Frame I/O: (de)interleaving, augmentation, splits, and the on-disk layout.

A dataset root holds `manifest.json`, 16-bit grayscale PNGs under `frames/`
and, for synthetic data, one ground-truth JSON sidecar per frame under `gt/`.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

SCHEMA_VERSION = 1
PNG_MAX = 65535


class DataError(ValueError):
    """Base class for data-layer errors."""


class MalformedImageError(DataError):
    pass


class OddWidthError(MalformedImageError):
    """Interleaved images must have an even number of columns."""


class ShapeMismatchError(DataError):
    pass


class DatasetNotFoundError(DataError):
    pass


class InconsistentDimensionsError(DataError):
    pass


class DatasetLayoutError(DataError):
    """Dataset root exists but does not match the expected layout."""


class FrameSource(str, enum.Enum):
    SYNTHETIC = "synthetic"
    REAL = "real"


def deinterleave(interleaved: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split an interleaved image into its odd-direction half (0-based even
    column indices 0, 2, 4, ...) and even-direction half (indices 1, 3, 5, ...)."""
    arr = np.asarray(interleaved)
    if arr.ndim != 2:
        raise MalformedImageError(f"expected a 2D image, got shape {arr.shape}")
    if arr.shape[1] % 2 != 0:
        raise OddWidthError(f"width must be even, got {arr.shape[1]}")
    return arr[:, 0::2].copy(), arr[:, 1::2].copy()


def interleave(odd_half: np.ndarray, even_half: np.ndarray) -> np.ndarray:
    """Inverse of :func:`deinterleave`: odd half fills 0-based even columns."""
    o = np.asarray(odd_half)
    e = np.asarray(even_half)
    if o.shape != e.shape:
        raise ShapeMismatchError(f"half shapes differ: {o.shape} vs {e.shape}")
    out = np.empty((o.shape[0], 2 * o.shape[1]), dtype=o.dtype)
    out[:, 0::2] = o
    out[:, 1::2] = e
    return out


@dataclass(frozen=True)
class Frame:
    """One interleaved scan image plus its deinterleaved halves.

    Immutable after construction; re-interleaving the halves reproduces
    `interleaved` bit-exactly by construction.
    """

    interleaved: np.ndarray
    odd_half: np.ndarray
    even_half: np.ndarray
    frame_id: str
    source: FrameSource = FrameSource.SYNTHETIC
    ground_truth: dict | None = None

    def __post_init__(self):
        for name in ("interleaved", "odd_half", "even_half"):
            arr = getattr(self, name)
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise DataError(f"{name} values must lie in [0, 1]")
            arr.flags.writeable = False

    @classmethod
    def from_interleaved(cls, interleaved: np.ndarray, frame_id: str,
                         source: FrameSource = FrameSource.SYNTHETIC,
                         ground_truth: dict | None = None) -> "Frame":
        arr = np.ascontiguousarray(np.asarray(interleaved, dtype=np.float32))
        odd_half, even_half = deinterleave(arr)
        return cls(interleaved=arr, odd_half=odd_half, even_half=even_half,
                   frame_id=frame_id, source=source, ground_truth=ground_truth)

    @property
    def height(self) -> int:
        return self.interleaved.shape[0]

    @property
    def width(self) -> int:
        return self.interleaved.shape[1]


@dataclass(frozen=True)
class AugmentConfig:
    """Per-sample augmentation switches and ranges."""

    hflip: bool = True
    vflip: bool = True
    max_rotate_deg: float = 10.0
    scale_range: tuple[float, float] = (0.9, 1.1)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(hflip=False, vflip=False, max_rotate_deg=0.0, scale_range=(1.0, 1.0))


def augment(frame: Frame, seed: int, config: AugmentConfig) -> Frame:
    """Randomly flip/rotate/intensity-scale a frame, deterministically in seed.

    The same geometric transform (and the same intensity scale) is applied to
    both halves so the odd/even pair stays a pair; the interleaved image is
    rebuilt from the augmented halves. Rotation uses linear interpolation with
    edge replication.
    """
    rng = np.random.default_rng(seed)
    do_h = config.hflip and rng.random() < 0.5
    do_v = config.vflip and rng.random() < 0.5
    angle = float(rng.uniform(-config.max_rotate_deg, config.max_rotate_deg)) \
        if config.max_rotate_deg > 0 else 0.0
    lo, hi = config.scale_range
    scale = float(rng.uniform(lo, hi)) if (lo, hi) != (1.0, 1.0) else 1.0

    if not (do_h or do_v or angle != 0.0 or scale != 1.0):
        return frame

    def transform(half: np.ndarray) -> np.ndarray:
        out = np.asarray(half, dtype=np.float32)
        if do_h:
            out = out[:, ::-1]
        if do_v:
            out = out[::-1, :]
        if angle != 0.0:
            out = ndimage.rotate(out, angle, reshape=False, order=1, mode="nearest")
        if scale != 1.0:
            out = out * scale
        return np.clip(out, 0.0, 1.0).astype(np.float32)

    odd = transform(frame.odd_half)
    even = transform(frame.even_half)
    return Frame(interleaved=interleave(odd, even), odd_half=odd, even_half=even,
                 frame_id=frame.frame_id, source=frame.source,
                 ground_truth=frame.ground_truth)


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint, exhaustive frame-level partition."""

    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def to_dict(self) -> dict:
        return {"train": list(self.train_ids), "val": list(self.val_ids),
                "test": list(self.test_ids)}


def split_dataset(frame_ids: list[str], ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
                  seed: int = 0) -> DatasetSplit:
    """Shuffle by seed, then slice [train | val | test].

    Rounding: val and test sizes are floored, the remainder goes to train
    (so 4,248 ids at (0.8, 0.1, 0.1) give 3400/424/424).
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must sum to 1, got {ratios}")
    if any(r < 0 for r in ratios):
        raise DataError(f"ratios must be non-negative, got {ratios}")
    if len(frame_ids) < 3:
        raise DataError(f"need at least 3 frames to split, got {len(frame_ids)}")

    ids = list(frame_ids)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]

    n = len(ids)
    n_val = int(np.floor(n * ratios[1]))
    n_test = int(np.floor(n * ratios[2]))
    n_train = n - n_val - n_test
    return DatasetSplit(
        train_ids=shuffled[:n_train],
        val_ids=shuffled[n_train:n_train + n_val],
        test_ids=shuffled[n_train + n_val:],
        ratios=tuple(ratios),
    )


# --------------------------------------------------------------------------
# PNG and dataset-root I/O
# --------------------------------------------------------------------------

def save_image(path: Path, img: np.ndarray) -> None:
    """Write a [0, 1] image as 16-bit grayscale PNG (v -> round(v * 65535))."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * PNG_MAX)
    Image.fromarray(arr.astype(np.uint16), mode="I;16").save(path)


def load_image(path: Path) -> np.ndarray:
    """Read a grayscale PNG back to float32 in [0, 1] (16-bit: v / 65535)."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (OSError, SyntaxError) as exc:
        raise MalformedImageError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim != 2:
        raise MalformedImageError(f"{path}: expected grayscale, got shape {arr.shape}")
    if arr.dtype == np.uint16 or arr.dtype == np.int32:
        return (arr.astype(np.float32) / PNG_MAX).astype(np.float32)
    if arr.dtype == np.uint8:
        return (arr.astype(np.float32) / 255.0).astype(np.float32)
    raise MalformedImageError(f"{path}: unsupported pixel type {arr.dtype}")


@dataclass
class Manifest:
    layout: str
    height: int
    width: int
    frames: list[str] = field(default_factory=list)
    splits: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "layout": self.layout,
            "height": self.height,
            "width": self.width,
            "frames": list(self.frames),
            "splits": self.splits,
        }


def load_manifest(root: Path) -> Manifest:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DatasetLayoutError(f"no manifest.json under {root}")
    raw = json.loads(path.read_text())
    return Manifest(layout=raw["layout"], height=raw["height"], width=raw["width"],
                    frames=raw["frames"], splits=raw.get("splits", {}),
                    schema_version=raw.get("schema_version", SCHEMA_VERSION))


def write_dataset(root: Path, frames: list[Frame],
                  split: DatasetSplit | None = None) -> Manifest:
    """Write frames (and any ground-truth sidecars) plus the manifest."""
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    if not frames:
        raise DataError("refusing to write an empty dataset")
    height, width = frames[0].height, frames[0].width
    for fr in frames:
        if (fr.height, fr.width) != (height, width):
            raise InconsistentDimensionsError(
                f"frame {fr.frame_id} is {fr.height}x{fr.width}, expected {height}x{width}")
        save_image(root / "frames" / f"{fr.frame_id}.png", fr.interleaved)
        if fr.ground_truth is not None:
            gt_path = root / "gt" / f"{fr.frame_id}.json"
            gt_path.parent.mkdir(parents=True, exist_ok=True)
            gt_path.write_text(json.dumps(fr.ground_truth, indent=1))
    manifest = Manifest(layout="synthetic", height=height, width=width,
                        frames=[fr.frame_id for fr in frames],
                        splits=split.to_dict() if split is not None else {})
    (root / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=1))
    return manifest


def load_dataset(root: Path, layout: str = "synthetic") -> list[Frame]:
    """Load all frames from a dataset root.

    `synthetic` expects the manifest layout written by :func:`write_dataset`
    and attaches ground-truth sidecars when present. `orpam4k` ingests a flat
    directory of grayscale PNGs (one interleaved frame each, sorted by name).
    An empty root yields an empty list.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetNotFoundError(f"dataset root {root} does not exist")
    if layout == "synthetic":
        return _load_synthetic(root)
    if layout == "orpam4k":
        return _load_flat(root)
    raise DataError(f"unknown layout {layout!r}")


def _load_synthetic(root: Path) -> list[Frame]:
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        frames_dir = root / "frames"
        if not frames_dir.is_dir() or not any(frames_dir.glob("*.png")):
            return []
        raise DatasetLayoutError(f"{root} has frames but no manifest.json")
    manifest = load_manifest(root)
    frames = []
    for frame_id in manifest.frames:
        img = load_image(root / "frames" / f"{frame_id}.png")
        if img.shape != (manifest.height, manifest.width):
            raise InconsistentDimensionsError(
                f"{frame_id}: image is {img.shape}, manifest says "
                f"({manifest.height}, {manifest.width})")
        gt_path = root / "gt" / f"{frame_id}.json"
        gt = json.loads(gt_path.read_text()) if gt_path.exists() else None
        frames.append(Frame.from_interleaved(img, frame_id=frame_id,
                                             source=FrameSource.SYNTHETIC,
                                             ground_truth=gt))
    return frames


def _load_flat(root: Path) -> list[Frame]:
    paths = sorted(root.glob("*.png"))
    frames = []
    shape = None
    for path in paths:
        img = load_image(path)
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise InconsistentDimensionsError(
                f"{path.name}: image is {img.shape}, first frame was {shape}")
        frames.append(Frame.from_interleaved(img, frame_id=path.stem,
                                             source=FrameSource.REAL))
    return frames


def split_frames(frames: list[Frame], split: DatasetSplit) -> dict[str, list[Frame]]:
    """Group loaded frames by split membership, preserving split order."""
    by_id = {fr.frame_id: fr for fr in frames}
    return {
        "train": [by_id[i] for i in split.train_ids if i in by_id],
        "val": [by_id[i] for i in split.val_ids if i in by_id],
        "test": [by_id[i] for i in split.test_ids if i in by_id],
    }
