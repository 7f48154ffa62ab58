"""Learnable components: scene encoder, appearance encoder and renderer.

The scene encoder is a U-Net whose conv -> instance-norm -> LeakyReLU blocks
(reflect padding throughout) make its output provably invariant to positive
affine intensity changes of the input: the first convolution maps a*I + b to
a*conv(I) + const per channel, which instance normalization cancels. The
appearance encoder deliberately omits normalization - its whole job is to
capture the gain/offset statistics the scene encoder throws away - and ends
in global average pooling so its code carries no spatial layout. The renderer
recombines the two via feature modulation after every one of its
normalizations.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_SCHEMA_VERSION = 1
DEFAULT_EPS = 1e-6
DOWNSAMPLE_FACTOR = 8  # 3 levels of 2x


class ModelError(ValueError):
    pass


class InputShapeError(ModelError):
    pass


class SchemaVersionError(ModelError):
    """Checkpoint sidecar schema does not match this implementation."""


def instance_norm(x: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Per-channel, per-sample spatial normalization (x - mu) / sqrt(var + eps).

    Accepts (C, H, W) or (B, C, H, W); variance is biased (divide by H*W).
    A constant channel maps to zeros (eps guards the division).
    """
    if x.ndim not in (3, 4):
        raise InputShapeError(f"expected (C,H,W) or (B,C,H,W), got shape {tuple(x.shape)}")
    if x.shape[-1] * x.shape[-2] < 2:
        raise InputShapeError("instance_norm needs at least 2 spatial elements")
    mu = x.mean(dim=(-2, -1), keepdim=True)
    var = x.var(dim=(-2, -1), unbiased=False, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps)


def global_average_pool(x: torch.Tensor) -> torch.Tensor:
    """Spatial mean per channel: (B, C, H, W) -> (B, C)."""
    return x.mean(dim=(-2, -1))


class _InstanceNorm(nn.Module):
    def __init__(self, eps: float):
        super().__init__()
        self.eps = eps

    def forward(self, x):
        return instance_norm(x, self.eps)


class ConvBlock(nn.Module):
    """conv3x3 (reflect pad) -> instance norm -> LeakyReLU(0.2)."""

    def __init__(self, cin: int, cout: int, stride: int = 1, eps: float = DEFAULT_EPS):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode="reflect")
        self.norm = _InstanceNorm(eps)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class FeatureModulator(nn.Module):
    """Affine feature modulation gamma(A) * IN(x) + beta(A).

    gamma and beta are linear in the acquisition code and broadcast over
    space. Initialized to the identity (gamma = 1, beta = 0), so at step 0
    modulation equals plain instance normalization.
    """

    def __init__(self, channels: int, code_dim: int, eps: float = DEFAULT_EPS):
        super().__init__()
        self.affine = nn.Linear(code_dim, 2 * channels)
        self.channels = channels
        self.eps = eps
        nn.init.zeros_(self.affine.weight)
        with torch.no_grad():
            self.affine.bias[:channels] = 1.0
            self.affine.bias[channels:] = 0.0

    def forward(self, x: torch.Tensor, code: torch.Tensor) -> torch.Tensor:
        if code.ndim == 1:
            code = code.unsqueeze(0)
        gamma_beta = self.affine(code)
        gamma = gamma_beta[:, :self.channels].unsqueeze(-1).unsqueeze(-1)
        beta = gamma_beta[:, self.channels:].unsqueeze(-1).unsqueeze(-1)
        return gamma * instance_norm(x, self.eps) + beta


class ModulatedConvBlock(nn.Module):
    """conv3x3 (reflect pad) -> modulated instance norm -> LeakyReLU(0.2)."""

    def __init__(self, cin: int, cout: int, code_dim: int, stride: int = 1,
                 eps: float = DEFAULT_EPS):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode="reflect")
        self.modulate = FeatureModulator(cout, code_dim, eps)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x, code):
        return self.act(self.modulate(self.conv(x), code))


def _check_divisible(h: int, w: int) -> None:
    if h % DOWNSAMPLE_FACTOR != 0 or w % DOWNSAMPLE_FACTOR != 0:
        raise InputShapeError(
            f"spatial dims ({h}, {w}) must be divisible by {DOWNSAMPLE_FACTOR}; "
            f"pad the image to ({math.ceil(h / 8) * 8}, {math.ceil(w / 8) * 8}) first")


class SceneEncoder(nn.Module):
    """U-Net producing the domain-invariant structure map (scene_channels x H x W)."""

    def __init__(self, base: int = 32, scene_channels: int = 64, eps: float = DEFAULT_EPS):
        super().__init__()
        b = base
        self.stem = ConvBlock(1, b, eps=eps)
        self.enc1 = ConvBlock(b, b, eps=eps)
        self.down1 = ConvBlock(b, 2 * b, stride=2, eps=eps)
        self.enc2 = ConvBlock(2 * b, 2 * b, eps=eps)
        self.down2 = ConvBlock(2 * b, 4 * b, stride=2, eps=eps)
        self.enc3 = ConvBlock(4 * b, 4 * b, eps=eps)
        self.down3 = ConvBlock(4 * b, 4 * b, stride=2, eps=eps)
        self.bot1 = ConvBlock(4 * b, 8 * b, eps=eps)
        self.bot_mid = ConvBlock(8 * b, 8 * b, eps=eps)
        self.bot2 = ConvBlock(8 * b, 4 * b, eps=eps)
        self.dec3 = ConvBlock(8 * b, 4 * b, eps=eps)
        self.dec2 = ConvBlock(6 * b, 2 * b, eps=eps)
        self.dec1 = ConvBlock(3 * b, b, eps=eps)
        self.head = nn.Conv2d(b, scene_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_divisible(x.shape[-2], x.shape[-1])
        s1 = self.enc1(self.stem(x))
        s2 = self.enc2(self.down1(s1))
        s3 = self.enc3(self.down2(s2))
        z = self.bot2(self.bot_mid(self.bot1(self.down3(s3))))
        z = F.interpolate(z, scale_factor=2, mode="nearest")
        z = self.dec3(torch.cat([z, s3], dim=1))
        z = F.interpolate(z, scale_factor=2, mode="nearest")
        z = self.dec2(torch.cat([z, s2], dim=1))
        z = F.interpolate(z, scale_factor=2, mode="nearest")
        z = self.dec1(torch.cat([z, s1], dim=1))
        return self.head(z)


class AppearanceEncoder(nn.Module):
    """Strided conv stack + global average pooling -> code of length code_dim.

    No normalization layers: the code must retain the global intensity
    statistics that characterize the acquisition.
    """

    MIN_INPUT = 16

    def __init__(self, base: int = 16, code_dim: int = 32):
        super().__init__()
        b = base
        self.features = nn.Sequential(
            nn.Conv2d(1, b, 3, stride=2, padding=1, padding_mode="reflect"),
            nn.LeakyReLU(0.2),
            nn.Conv2d(b, 2 * b, 3, stride=2, padding=1, padding_mode="reflect"),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * b, 4 * b, 3, stride=2, padding=1, padding_mode="reflect"),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * b, 4 * b, 3, padding=1, padding_mode="reflect"),
            nn.LeakyReLU(0.2),
        )
        self.project = nn.Linear(4 * b, code_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] < self.MIN_INPUT or x.shape[-1] < self.MIN_INPUT:
            raise InputShapeError(
                f"appearance encoder needs at least {self.MIN_INPUT}x{self.MIN_INPUT} "
                f"inputs, got {tuple(x.shape[-2:])}")
        return self.project(global_average_pool(self.features(x)))


class DomainCodes(nn.Module):
    """Ablation stand-in for the appearance encoder: one learned constant
    code per scanning direction (0 = odd, 1 = even)."""

    def __init__(self, code_dim: int = 32):
        super().__init__()
        self.codes = nn.Embedding(2, code_dim)
        nn.init.normal_(self.codes.weight, std=0.1)

    def forward(self, domain: int, batch: int) -> torch.Tensor:
        idx = torch.full((batch,), domain, dtype=torch.long,
                         device=self.codes.weight.device)
        return self.codes(idx)


class Renderer(nn.Module):
    """Synthesizes an image from (structure map, acquisition code).

    Mirrors the scene encoder's level structure; every instance norm is
    followed by code-driven affine modulation. Sigmoid output keeps values
    in [0, 1].
    """

    def __init__(self, base: int = 32, scene_channels: int = 64, code_dim: int = 32,
                 eps: float = DEFAULT_EPS):
        super().__init__()
        b = base
        self.stem = nn.Conv2d(scene_channels, b, 1)
        self.enc1 = ModulatedConvBlock(b, b, code_dim, eps=eps)
        self.down1 = ModulatedConvBlock(b, 2 * b, code_dim, stride=2, eps=eps)
        self.enc2 = ModulatedConvBlock(2 * b, 2 * b, code_dim, eps=eps)
        self.down2 = ModulatedConvBlock(2 * b, 4 * b, code_dim, stride=2, eps=eps)
        self.enc3 = ModulatedConvBlock(4 * b, 4 * b, code_dim, eps=eps)
        self.down3 = ModulatedConvBlock(4 * b, 4 * b, code_dim, stride=2, eps=eps)
        self.bot1 = ModulatedConvBlock(4 * b, 8 * b, code_dim, eps=eps)
        self.bot2 = ModulatedConvBlock(8 * b, 4 * b, code_dim, eps=eps)
        self.dec3 = ModulatedConvBlock(8 * b, 4 * b, code_dim, eps=eps)
        self.dec2 = ModulatedConvBlock(6 * b, 2 * b, code_dim, eps=eps)
        self.dec1 = ModulatedConvBlock(3 * b, b, code_dim, eps=eps)
        self.out = ModulatedConvBlock(b, b, code_dim, eps=eps)
        self.head = nn.Conv2d(b, 1, 1)

    def forward(self, scene: torch.Tensor, code: torch.Tensor) -> torch.Tensor:
        _check_divisible(scene.shape[-2], scene.shape[-1])
        s1 = self.enc1(self.stem(scene), code)
        s2 = self.enc2(self.down1(s1, code), code)
        s3 = self.enc3(self.down2(s2, code), code)
        z = self.bot2(self.bot1(self.down3(s3, code), code), code)
        z = F.interpolate(z, scale_factor=2, mode="nearest")
        z = self.dec3(torch.cat([z, s3], dim=1), code)
        z = F.interpolate(z, scale_factor=2, mode="nearest")
        z = self.dec2(torch.cat([z, s2], dim=1), code)
        z = F.interpolate(z, scale_factor=2, mode="nearest")
        z = self.dec1(torch.cat([z, s1], dim=1), code)
        z = self.out(z, code)
        return torch.sigmoid(self.head(z))


@dataclass
class ModelConfig:
    base_channels: int = 32
    appearance_base_channels: int = 16
    scene_channels: int = 64
    code_dim: int = 32
    eps: float = DEFAULT_EPS
    use_appearance_encoder: bool = True

    def to_dict(self) -> dict:
        return {
            "base_channels": self.base_channels,
            "appearance_base_channels": self.appearance_base_channels,
            "scene_channels": self.scene_channels,
            "code_dim": self.code_dim,
            "eps": self.eps,
            "use_appearance_encoder": self.use_appearance_encoder,
        }


# Parameter budget constraint for the default (full-scale) configuration.
PARAM_COUNT_RANGE = (2_800_000, 4_200_000)


class SceneAppearanceModel(nn.Module):
    """The complete separation model: encoders plus renderer.

    For the default configuration the total parameter count must land in
    PARAM_COUNT_RANGE; narrower desk-scale configurations skip that check.
    """

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        c = self.config
        self.scene_encoder = SceneEncoder(c.base_channels, c.scene_channels, c.eps)
        if c.use_appearance_encoder:
            self.appearance_encoder = AppearanceEncoder(c.appearance_base_channels, c.code_dim)
        else:
            self.appearance_encoder = DomainCodes(c.code_dim)
        self.renderer = Renderer(c.base_channels, c.scene_channels, c.code_dim, c.eps)
        self._init_weights()
        if c.base_channels == ModelConfig().base_channels and c.use_appearance_encoder:
            lo, hi = PARAM_COUNT_RANGE
            n = self.parameter_count
            if not lo <= n <= hi:
                raise ModelError(
                    f"default configuration must have {lo}..{hi} parameters, got {n}")

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, a=0.2, mode="fan_in",
                                        nonlinearity="leaky_relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            # FeatureModulator initializes its own affine to the identity.

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def scene_encode(self, image: torch.Tensor) -> torch.Tensor:
        return self.scene_encoder(self._as_batched(image))

    def appearance_encode(self, image: torch.Tensor, domain: int | None = None) -> torch.Tensor:
        """Extract the acquisition code. When the appearance encoder is
        ablated, `domain` (0 = odd, 1 = even) selects the learned constant."""
        x = self._as_batched(image)
        if isinstance(self.appearance_encoder, DomainCodes):
            if domain is None:
                raise ModelError("domain index required when the appearance encoder is ablated")
            return self.appearance_encoder(domain, x.shape[0])
        return self.appearance_encoder(x)

    def synthesize(self, scene: torch.Tensor, code: torch.Tensor) -> torch.Tensor:
        return self.renderer(scene, code)

    def cross_render(self, i_odd: torch.Tensor, i_even: torch.Tensor):
        """Bidirectional re-rendering.

        Returns (i_even_to_odd, i_odd_to_even, s_odd, s_even, a_odd, a_even);
        the system's registration output is i_even_to_odd = G(s_even, a_odd).
        """
        x_odd = self._as_batched(i_odd)
        x_even = self._as_batched(i_even)
        if x_odd.shape != x_even.shape:
            raise InputShapeError(
                f"odd/even shapes differ: {tuple(x_odd.shape)} vs {tuple(x_even.shape)}")
        both = torch.cat([x_odd, x_even], dim=0)
        scenes = self.scene_encoder(both)
        s_odd, s_even = scenes.chunk(2, dim=0)
        if isinstance(self.appearance_encoder, DomainCodes):
            a_odd = self.appearance_encoder(0, x_odd.shape[0])
            a_even = self.appearance_encoder(1, x_even.shape[0])
        else:
            codes = self.appearance_encoder(both)
            a_odd, a_even = codes.chunk(2, dim=0)
        rendered = self.renderer(torch.cat([s_even, s_odd], dim=0),
                                 torch.cat([a_odd, a_even], dim=0))
        i_even_to_odd, i_odd_to_even = rendered.chunk(2, dim=0)
        return i_even_to_odd, i_odd_to_even, s_odd, s_even, a_odd, a_even

    @staticmethod
    def _as_batched(image: torch.Tensor) -> torch.Tensor:
        if image.ndim == 2:
            return image.unsqueeze(0).unsqueeze(0)
        if image.ndim == 3:
            return image.unsqueeze(0)
        if image.ndim == 4:
            return image
        raise InputShapeError(f"expected 2D-4D image tensor, got shape {tuple(image.shape)}")


# --------------------------------------------------------------------------
# Checkpoints: binary parameter blob + human-auditable sidecar JSON
# --------------------------------------------------------------------------

def save_checkpoint(model: SceneAppearanceModel, path: Path,
                    training_step: int = 0, loss_weights: dict | None = None,
                    extra_state: dict | None = None) -> Path:
    """Write `<path>` (torch blob) and `<path>.json` (sidecar). Returns path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {"model_state": model.state_dict(), "model_config": model.config.to_dict()}
    if extra_state:
        blob.update(extra_state)
    torch.save(blob, path)
    sidecar = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "scene_channels": model.config.scene_channels,
        "code_dim": model.config.code_dim,
        "base_channels": model.config.base_channels,
        "appearance_base_channels": model.config.appearance_base_channels,
        "levels": 3,
        "use_appearance_encoder": model.config.use_appearance_encoder,
        "eps": model.config.eps,
        "parameter_count": model.parameter_count,
        "training_step": training_step,
        "loss_weights": loss_weights or {},
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=1))
    return path


def load_checkpoint(path: Path) -> tuple[SceneAppearanceModel, dict]:
    """Load a checkpoint written by :func:`save_checkpoint`.

    Returns (model, sidecar_dict); raises SchemaVersionError on a sidecar
    schema mismatch and FileNotFoundError if either file is missing.
    """
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    if not sidecar_path.exists():
        raise FileNotFoundError(f"checkpoint sidecar {sidecar_path} not found")
    sidecar = json.loads(sidecar_path.read_text())
    version = sidecar.get("schema_version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise SchemaVersionError(
            f"checkpoint schema {version} unsupported (expected {CHECKPOINT_SCHEMA_VERSION})")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    config = ModelConfig(**blob["model_config"])
    model = SceneAppearanceModel(config)
    model.load_state_dict(blob["model_state"])
    model.eval()
    return model, sidecar


def registration_latency(model: SceneAppearanceModel, frame_shape: tuple[int, int],
                         repetitions: int = 100, warmup: int = 10,
                         device: str = "cpu") -> list[float]:
    """Time the deployed registration path (scene-encode the even half,
    appearance-encode the odd half, render) on random inputs of the halves'
    shape. frame_shape is the interleaved (H, W); returns per-run milliseconds
    for exactly `repetitions` timed runs after `warmup` discarded ones."""
    h, w = frame_shape
    if w % 2 != 0:
        raise InputShapeError(f"interleaved width must be even, got {w}")
    model = model.to(device).eval()
    odd = torch.rand(1, 1, h, w // 2, device=device)
    even = torch.rand(1, 1, h, w // 2, device=device)
    timings = []
    with torch.no_grad():
        for i in range(warmup + repetitions):
            if device != "cpu" and torch.cuda.is_available():
                torch.cuda.synchronize()
            t0 = time.perf_counter()
            scene = model.scene_encoder(even)
            code = model.appearance_encode(odd, domain=0)
            model.renderer(scene, code)
            if device != "cpu" and torch.cuda.is_available():
                torch.cuda.synchronize()
            if i >= warmup:
                timings.append((time.perf_counter() - t0) * 1000.0)
    return timings
