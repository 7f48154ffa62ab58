"""Differentiable training objectives and their weighted composition.

All reductions are means over elements, so the loss weights are scale-free
across resolutions. Every function accepts (H, W), (C, H, W) or (B, C, H, W)
tensors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    """Objective weights; defaults are the trained-model settings."""

    lambda_scene: float = 1.0
    lambda_cycle: float = 0.5
    lambda_align: float = 2.0
    lambda_cos: float = 0.1
    lambda_ssim: float = 0.5
    lambda_ncc: float = 0.5
    lambda_grad: float = 0.3

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class LossBreakdown:
    """Component losses plus audit sub-terms.

    total == lambda_scene * scene + lambda_cycle * cycle + lambda_align * align
    (checked to 1e-9 by the test suite); values are torch scalars while a
    graph is attached, use floats() for logging.
    """

    scene: torch.Tensor
    cycle: torch.Tensor
    align: torch.Tensor
    total: torch.Tensor
    subterms: dict = field(default_factory=dict)

    def floats(self) -> dict:
        out = {k: float(v) for k, v in
               (("scene", self.scene), ("cycle", self.cycle),
                ("align", self.align), ("total", self.total))}
        out.update({k: float(v) for k, v in self.subterms.items()})
        return out


def _as_4d(x: torch.Tensor) -> torch.Tensor:
    if x.ndim == 2:
        return x.unsqueeze(0).unsqueeze(0)
    if x.ndim == 3:
        return x.unsqueeze(0)
    if x.ndim == 4:
        return x
    raise ValueError(f"expected 2D-4D tensor, got shape {tuple(x.shape)}")


def ncc(x: torch.Tensor, y: torch.Tensor, on_constant: str = "raise") -> torch.Tensor:
    """Global zero-mean normalized cross-correlation of two equal-shape images.

    on_constant selects the degenerate-input convention: "raise" (metric use)
    errors out, "zero" (loss use) returns 0 so the term contributes nothing.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    xc = x.reshape(-1) - x.mean()
    yc = y.reshape(-1) - y.mean()
    nx = torch.linalg.vector_norm(xc)
    ny = torch.linalg.vector_norm(yc)
    if float(nx) == 0.0 or float(ny) == 0.0:
        if on_constant == "raise":
            raise ValueError("NCC undefined for a constant image")
        logger.warning("ncc: constant image, returning 0 by the loss convention")
        return torch.zeros((), dtype=x.dtype, device=x.device)
    return torch.dot(xc, yc) / (nx * ny)


def _gaussian_window(window: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(window, dtype=dtype, device=device) - (window - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return (g[:, None] @ g[None, :]).unsqueeze(0).unsqueeze(0)


def differentiable_ssim(x: torch.Tensor, y: torch.Tensor, window: int = 11,
                        sigma: float = 1.5, c1: float = SSIM_C1,
                        c2: float = SSIM_C2) -> torch.Tensor:
    """Gaussian-windowed SSIM on unit dynamic range, meaned over valid positions.

    The window shrinks to the largest odd size that fits when the image is
    smaller than `window` (window 11 applies whenever the image allows it).
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    a = _as_4d(x)
    b = _as_4d(y)
    win = min(window, a.shape[-2], a.shape[-1])
    if win % 2 == 0:
        win -= 1
    if win < 3:
        raise ValueError(f"image too small for SSIM: {tuple(a.shape[-2:])}")
    channels = a.shape[1]
    kernel = _gaussian_window(win, sigma, a.dtype, a.device).expand(channels, 1, win, win)

    def filt(img):
        return F.conv2d(img, kernel, groups=channels)

    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / \
               ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return ssim_map.mean()


def _flat_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine of fully flattened maps. Degenerate conventions: both all-zero
    -> 1 (no loss contribution), exactly one all-zero -> 0."""
    va = a.reshape(-1)
    vb = b.reshape(-1)
    na = torch.linalg.vector_norm(va)
    nb = torch.linalg.vector_norm(vb)
    if float(na) == 0.0 and float(nb) == 0.0:
        return torch.ones((), dtype=a.dtype, device=a.device)
    if float(na) == 0.0 or float(nb) == 0.0:
        return torch.zeros((), dtype=a.dtype, device=a.device)
    return torch.dot(va, vb) / (na * nb)


def _forward_diff_x(img: torch.Tensor) -> torch.Tensor:
    x = _as_4d(img)
    return x[..., :, 1:] - x[..., :, :-1]


def _forward_diff_y(img: torch.Tensor) -> torch.Tensor:
    x = _as_4d(img)
    return x[..., 1:, :] - x[..., :-1, :]


def gradient_match_loss(translated: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """L1 mismatch of forward-difference gradients, meaned over valid regions."""
    gx = (_forward_diff_x(translated) - _forward_diff_x(target)).abs().mean()
    gy = (_forward_diff_y(translated) - _forward_diff_y(target)).abs().mean()
    return gx + gy


# Each _*_terms helper computes a component's pieces exactly once; the public
# component losses and total_loss both assemble from them.

def _scene_terms(s_odd, s_even, lambda_cos):
    if s_odd.shape != s_even.shape:
        raise ValueError(f"shape mismatch: {tuple(s_odd.shape)} vs {tuple(s_even.shape)}")
    mse = F.mse_loss(s_odd, s_even)
    cos = _flat_cosine(s_odd, s_even)
    return mse + lambda_cos * (1.0 - cos), {"scene_mse": mse, "scene_cos": cos}


def _cycle_terms(i_odd, i_even, recon_odd, recon_even, lambda_ssim):
    mse = F.mse_loss(recon_odd, i_odd) + F.mse_loss(recon_even, i_even)
    ssim_odd = differentiable_ssim(recon_odd, i_odd)
    ssim_even = differentiable_ssim(recon_even, i_even)
    loss = mse + lambda_ssim * (2.0 - ssim_odd - ssim_even)
    return loss, {"cycle_mse": mse, "cycle_ssim": 0.5 * (ssim_odd + ssim_even)}


def _align_terms(translated, target, lambda_ncc, lambda_grad):
    if translated.shape != target.shape:
        raise ValueError(
            f"shape mismatch: {tuple(translated.shape)} vs {tuple(target.shape)}")
    mse = F.mse_loss(translated, target)
    correlation = ncc(translated, target, on_constant="zero")
    grad = gradient_match_loss(translated, target)
    loss = mse + lambda_ncc * (1.0 - correlation) + lambda_grad * grad
    return loss, {"align_mse": mse, "align_ncc": correlation, "align_grad": grad}


def scene_loss(s_odd: torch.Tensor, s_even: torch.Tensor,
               lambda_cos: float = 0.1) -> torch.Tensor:
    """MSE between structure maps plus a cosine-dissimilarity term."""
    return _scene_terms(s_odd, s_even, lambda_cos)[0]


def cycle_loss(i_odd: torch.Tensor, i_even: torch.Tensor,
               recon_odd: torch.Tensor, recon_even: torch.Tensor,
               lambda_ssim: float = 0.5) -> torch.Tensor:
    """Self-reconstruction fidelity: per-direction MSE plus SSIM shortfall."""
    return _cycle_terms(i_odd, i_even, recon_odd, recon_even, lambda_ssim)[0]


def align_loss(translated: torch.Tensor, target: torch.Tensor,
               lambda_ncc: float = 0.5, lambda_grad: float = 0.3) -> torch.Tensor:
    """Registration objective between the re-rendered image and its target:
    MSE + lambda_ncc * (1 - NCC) + lambda_grad * gradient mismatch.

    A constant input makes the NCC term contribute 0 (logged)."""
    return _align_terms(translated, target, lambda_ncc, lambda_grad)[0]


def total_loss(s_odd: torch.Tensor, s_even: torch.Tensor,
               i_odd: torch.Tensor, i_even: torch.Tensor,
               recon_odd: torch.Tensor, recon_even: torch.Tensor,
               i_even_to_odd: torch.Tensor,
               weights: LossWeights | None = None) -> LossBreakdown:
    """Compose the weighted objective from one cross-rendering's artifacts.

    Components whose top-level weight is zero (ablations) are still computed
    for the audit record but detached from the graph, so the weighted-sum
    identity holds with that weight treated as 0.
    """
    w = weights or LossWeights()
    subterms: dict = {}

    def component(enabled, fn):
        if enabled:
            loss, parts = fn()
        else:
            with torch.no_grad():
                loss, parts = fn()
        subterms.update({k: float(v) for k, v in parts.items()})
        return loss

    scene = component(w.lambda_scene > 0,
                      lambda: _scene_terms(s_odd, s_even, w.lambda_cos))
    cycle = component(w.lambda_cycle > 0,
                      lambda: _cycle_terms(i_odd, i_even, recon_odd, recon_even, w.lambda_ssim))
    align = component(w.lambda_align > 0,
                      lambda: _align_terms(i_even_to_odd, i_odd, w.lambda_ncc, w.lambda_grad))
    # Accumulate in float64 so the logged weighted-sum identity holds to 1e-9
    # even when components are float32; gradients still flow to the graph.
    total = (w.lambda_scene * scene.double() + w.lambda_cycle * cycle.double()
             + w.lambda_align * align.double())
    return LossBreakdown(scene=scene, cycle=cycle, align=align, total=total,
                         subterms=subterms)
