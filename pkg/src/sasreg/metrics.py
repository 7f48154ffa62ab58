"""Evaluation metrics (SSIM, PSNR, NCC, vessel continuity) and dataset reports.

SSIM and NCC reuse the loss kernels in no-grad mode so that training and
evaluation agree on the definition. PSNR/NCC are symmetric; the vessel
continuity index is unary. Aggregates use the sample (n-1) standard
deviation, with std = 0 by convention when only one value exists.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from . import losses
from .data import Frame, OddWidthError, interleave

EDGE_MAX_GAIN = 1.0  # a unit step between adjacent columns gives response 1
VCI_TAU = 0.05
VCI_TAU_MAX = 0.3


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Structural similarity (Gaussian window 11, sigma 1.5) of two [0,1] images."""
    with torch.no_grad():
        return float(losses.differentiable_ssim(
            torch.as_tensor(x, dtype=torch.float64),
            torch.as_tensor(y, dtype=torch.float64)))


def ncc(x: np.ndarray, y: np.ndarray) -> float:
    """Global zero-mean normalized cross-correlation; constant inputs are an error."""
    with torch.no_grad():
        return float(losses.ncc(torch.as_tensor(x, dtype=torch.float64),
                                torch.as_tensor(y, dtype=torch.float64),
                                on_constant="raise"))


def psnr(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> float:
    """10 * log10(peak^2 / MSE) in decibels; identical images give +inf."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def vci(interleaved: np.ndarray, tau: float = VCI_TAU, tau_max: float = VCI_TAU_MAX,
        return_raw: bool = False):
    """Vessel continuity index of an interleaved image.

    Horizontal-Sobel edge energy, normalized by the kernel's max gain so it
    lies in [0, 1], is summed over vessel pixels (intensity > tau) at the
    odd/even boundary columns (0-based even indices) and divided by the total
    vessel pixel count; the result is 1 - (that / tau_max), clamped to [0, 1].
    An image with no vessel pixels scores 1.0 (nothing to be discontinuous).
    """
    img = np.asarray(interleaved, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {img.shape}")
    if img.shape[1] % 2 != 0:
        raise OddWidthError(f"width must be even, got {img.shape[1]}")
    vessel = img > tau
    total_vessels = int(vessel.sum())
    if total_vessels == 0:
        return (1.0, 1.0) if return_raw else 1.0
    edge = np.abs(ndimage.sobel(img, axis=1, mode="nearest")) / SOBEL_MAX_GAIN
    boundary_cols = np.arange(0, img.shape[1], 2)
    boundary_energy = float((edge[:, boundary_cols] * vessel[:, boundary_cols]).sum())
    raw = 1.0 - boundary_energy / (tau_max * total_vessels)
    clamped = float(np.clip(raw, 0.0, 1.0))
    return (clamped, raw) if return_raw else clamped


def interframe_ncc(frames: list[np.ndarray]) -> tuple[float, float]:
    """Mean and sample std of NCC over consecutive frame pairs.

    Requires at least 2 frames; a single pair reports std = 0 by convention.
    """
    if len(frames) < 2:
        raise ValueError(f"need at least 2 frames, got {len(frames)}")
    shapes = {np.asarray(f).shape for f in frames}
    if len(shapes) != 1:
        raise ValueError(f"frames must share one shape, got {shapes}")
    values = [ncc(frames[i], frames[i + 1]) for i in range(len(frames) - 1)]
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return mean, std


@dataclass
class FrameMetrics:
    frame_id: str
    ssim: float
    psnr_db: float | None
    psnr_infinite: bool
    ncc: float
    vci_before: float
    vci_after: float
    vci_before_raw: float
    vci_after_raw: float

    def to_dict(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "ssim": self.ssim,
            "psnr_db": None if self.psnr_infinite else self.psnr_db,
            "psnr_infinite": self.psnr_infinite,
            "ncc": self.ncc,
            "vci_before": self.vci_before,
            "vci_after": self.vci_after,
            "vci_before_raw": self.vci_before_raw,
            "vci_after_raw": self.vci_after_raw,
        }


def _aggregate(values: list[float]) -> dict:
    finite = [v for v in values if math.isfinite(v)]
    if len(finite) != len(values):
        return {"mean": None, "std": None, "infinite": True}
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return {"mean": mean, "std": std, "infinite": False}


@dataclass
class MetricsReport:
    """Per-frame registration metrics plus recomputable aggregates."""

    per_frame: list[FrameMetrics]
    aggregate: dict = field(default_factory=dict)
    interframe_ncc: dict | None = None
    label: str = ""

    @classmethod
    def from_frame_metrics(cls, per_frame: list[FrameMetrics],
                           interframe: tuple[float, float] | None = None,
                           label: str = "") -> "MetricsReport":
        aggregate = {
            "ssim": _aggregate([m.ssim for m in per_frame]),
            "psnr_db": _aggregate([m.psnr_db if m.psnr_db is not None else math.inf
                                   for m in per_frame]),
            "ncc": _aggregate([m.ncc for m in per_frame]),
            "vci_before": _aggregate([m.vci_before for m in per_frame]),
            "vci_after": _aggregate([m.vci_after for m in per_frame]),
        }
        inter = None
        if interframe is not None:
            inter = {"mean": interframe[0], "std": interframe[1]}
        return cls(per_frame=per_frame, aggregate=aggregate,
                   interframe_ncc=inter, label=label)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "per_frame": [m.to_dict() for m in self.per_frame],
            "aggregate": self.aggregate,
            "interframe_ncc": self.interframe_ncc,
        }

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, path: Path) -> "MetricsReport":
        raw = json.loads(Path(path).read_text())
        per_frame = []
        for m in raw["per_frame"]:
            psnr_db = m["psnr_db"] if m["psnr_db"] is not None else math.inf
            per_frame.append(FrameMetrics(
                frame_id=m["frame_id"], ssim=m["ssim"], psnr_db=psnr_db,
                psnr_infinite=m["psnr_infinite"], ncc=m["ncc"],
                vci_before=m["vci_before"], vci_after=m["vci_after"],
                vci_before_raw=m.get("vci_before_raw", m["vci_before"]),
                vci_after_raw=m.get("vci_after_raw", m["vci_after"])))
        return cls(per_frame=per_frame, aggregate=raw["aggregate"],
                   interframe_ncc=raw.get("interframe_ncc"), label=raw.get("label", ""))


def register_frames(model, frames: list[Frame], device: str = "cpu",
                    batch_size: int = 16) -> list[np.ndarray]:
    """Run the registration pass over frames, returning each corrected even
    half I_even_to_odd as an (H, W/2) float array."""
    model = model.to(device).eval()
    outputs: list[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, len(frames), batch_size):
            chunk = frames[start:start + batch_size]
            odd = torch.stack([torch.as_tensor(f.odd_half, dtype=torch.float32)
                               for f in chunk]).unsqueeze(1).to(device)
            even = torch.stack([torch.as_tensor(f.even_half, dtype=torch.float32)
                                for f in chunk]).unsqueeze(1).to(device)
            e2o = model.cross_render(odd, even)[0]
            outputs.extend(e2o.squeeze(1).cpu().numpy())
    return outputs


def evaluate_dataset(frames: list[Frame], model, device: str = "cpu",
                     batch_size: int = 16, label: str = "") -> MetricsReport:
    """Score registration quality frame by frame.

    For each frame: SSIM/PSNR/NCC between the re-rendered even half and the
    odd half, vessel continuity before (original interleave) and after
    (odd half interleaved with the corrected even half). Inter-frame NCC of
    the corrected outputs is included when the list has >= 2 frames.
    """
    if not frames:
        raise ValueError("no frames to evaluate")
    corrected = register_frames(model, frames, device=device, batch_size=batch_size)
    per_frame = []
    for frame, e2o in zip(frames, corrected):
        odd = np.asarray(frame.odd_half, dtype=np.float64)
        pred = np.asarray(e2o, dtype=np.float64)
        psnr_db = psnr(pred, odd)
        vci_b, vci_b_raw = vci(frame.interleaved, return_raw=True)
        vci_a, vci_a_raw = vci(interleave(odd, pred), return_raw=True)
        per_frame.append(FrameMetrics(
            frame_id=frame.frame_id,
            ssim=ssim(pred, odd),
            psnr_db=psnr_db,
            psnr_infinite=not math.isfinite(psnr_db),
            ncc=ncc(pred, odd),
            vci_before=vci_b, vci_after=vci_a,
            vci_before_raw=vci_b_raw, vci_after_raw=vci_a_raw))
    interframe = interframe_ncc(corrected) if len(corrected) >= 2 else None
    return MetricsReport.from_frame_metrics(per_frame, interframe=interframe, label=label)


def baseline_report(frames: list[Frame], label: str = "unregistered") -> MetricsReport:
    """Score the raw odd/even halves against each other (no registration)."""
    if not frames:
        raise ValueError("no frames to evaluate")
    per_frame = []
    for frame in frames:
        odd = np.asarray(frame.odd_half, dtype=np.float64)
        even = np.asarray(frame.even_half, dtype=np.float64)
        psnr_db = psnr(even, odd)
        vci_b, vci_b_raw = vci(frame.interleaved, return_raw=True)
        per_frame.append(FrameMetrics(
            frame_id=frame.frame_id,
            ssim=ssim(even, odd),
            psnr_db=psnr_db,
            psnr_infinite=not math.isfinite(psnr_db),
            ncc=ncc(even, odd),
            vci_before=vci_b, vci_after=vci_b,
            vci_before_raw=vci_b_raw, vci_after_raw=vci_b_raw))
    inter = interframe_ncc([np.asarray(f.even_half) for f in frames]) \
        if len(frames) >= 2 else None
    return MetricsReport.from_frame_metrics(per_frame, interframe=inter, label=label)
