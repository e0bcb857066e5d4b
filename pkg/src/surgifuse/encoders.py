"""Modality-specific feature extractors.

The top-view encoder is a small residual pyramid network: a stem, three
downsampling residual stages, and a top-down merge, emitting feature maps
at three strides. The cross-section embedder turns each B-scan into M
column descriptors by downsampling laterally to M columns, average-pooling
the depth axis away, and projecting channels; the same weights process both
scans of a frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .config import ConfigurationError
from .datamodel import ScanGeometry, ValidationError


@dataclass(frozen=True)
class OpmiEncoderConfig:
    in_channels: int = 3
    level_channels: tuple[int, int, int] = (64, 128, 256)
    strides: tuple[int, int, int] = (8, 16, 32)
    stem_channels: int = 32

    def validate(self) -> None:
        if len(self.level_channels) != 3 or len(self.strides) != 3:
            raise ConfigurationError("exactly 3 pyramid levels are supported")
        s0 = self.strides[0]
        if s0 < 2 or s0 & (s0 - 1):
            raise ConfigurationError(f"strides[0] must be a power of two >= 2, got {s0}")
        if self.strides[1] != 2 * s0 or self.strides[2] != 4 * s0:
            raise ConfigurationError(f"strides must double per level, got {self.strides}")


@dataclass(frozen=True)
class IoctEmbedderConfig:
    tokens_per_scan: int = 16   # M
    token_width: int = 16       # C_OCT
    hidden_channels: int = 32

    def validate(self) -> None:
        if self.tokens_per_scan < 1 or self.token_width < 1:
            raise ConfigurationError("tokens_per_scan and token_width must be >= 1")


@dataclass
class FeaturePyramid:
    """Ordered multi-scale feature maps, finest first."""

    levels: tuple[torch.Tensor, ...]
    strides: tuple[int, ...]

    def validate(self, image_size: int | None = None) -> None:
        if len(self.levels) != len(self.strides):
            raise ValidationError("levels and strides length mismatch")
        if image_size is not None:
            for lvl, stride in zip(self.levels, self.strides):
                expect = image_size // stride
                if lvl.shape[-2:] != (expect, expect):
                    raise ValidationError(
                        f"level at stride {stride} has shape {tuple(lvl.shape[-2:])}, expected {expect}x{expect}"
                    )

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(lvl.shape[1] for lvl in self.levels)


@dataclass
class ColumnDescriptorSet:
    """2M cross-section tokens with their projected top-view positions.

    ``tokens`` is (B, 2M, C_OCT); ``positions`` (B, 2M, 2) in normalized
    [0, 1]^2 coordinates; ``source_flags`` (2M,) marks scan a / scan b;
    ``corrupted`` (B,) is the per-frame corruption mask.
    """

    tokens: torch.Tensor
    positions: torch.Tensor
    source_flags: torch.Tensor
    corrupted: torch.Tensor

    def validate(self) -> None:
        b, n, _ = self.tokens.shape
        if n % 2:
            raise ValidationError(f"token count must be even (two scans), got {n}")
        if self.positions.shape != (b, n, 2):
            raise ValidationError(f"positions shape {tuple(self.positions.shape)} != ({b}, {n}, 2)")
        if self.source_flags.shape != (n,) or self.corrupted.shape != (b,):
            raise ValidationError("source_flags must be (2M,), corrupted must be (B,)")


def _norm(channels: int) -> nn.GroupNorm:
    # group norm keeps train and eval identical, which matters at the tiny
    # batch sizes the recurrent variant trains with; at least two channels
    # per group so 1x1 maps still have something to normalize over
    groups = max(1, min(math.gcd(8, channels), channels // 2))
    return nn.GroupNorm(groups, channels)


class _ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm1 = _norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm2 = _norm(channels)

    def forward(self, x):
        out = self.norm2(self.conv2(torch.relu(self.norm1(self.conv1(x)))))
        return torch.relu(out + x)


def _conv_norm_relu(c_in: int, c_out: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
        _norm(c_out),
        nn.ReLU(inplace=True),
    )


class OpmiEncoder(nn.Module):
    """Residual pyramid encoder for the top-view image.

    forward() expects (B, C, H, W) with H and W divisible by the coarsest
    stride and returns a FeaturePyramid with per-level channel widths from
    the config.
    """

    def __init__(self, cfg: OpmiEncoderConfig | None = None):
        super().__init__()
        self.cfg = cfg or OpmiEncoderConfig()
        self.cfg.validate()
        c1, c2, c3 = self.cfg.level_channels

        stem_downs = int(math.log2(self.cfg.strides[0])) - 1
        stem = [_conv_norm_relu(self.cfg.in_channels, self.cfg.stem_channels, stride=2 if stem_downs > 0 else 1)]
        for _ in range(stem_downs - 1):
            stem.append(_conv_norm_relu(self.cfg.stem_channels, self.cfg.stem_channels, stride=2))
        self.stem = nn.Sequential(*stem)

        self.stage1 = nn.Sequential(_conv_norm_relu(self.cfg.stem_channels, c1, stride=2), _ResidualBlock(c1))
        self.stage2 = nn.Sequential(_conv_norm_relu(c1, c2, stride=2), _ResidualBlock(c2))
        self.stage3 = nn.Sequential(_conv_norm_relu(c2, c3, stride=2), _ResidualBlock(c3))

        self.lateral32 = nn.Conv2d(c3, c2, 1)
        self.lateral21 = nn.Conv2d(c2, c1, 1)
        self.smooth2 = nn.Conv2d(c2, c2, 3, padding=1)
        self.smooth1 = nn.Conv2d(c1, c1, 3, padding=1)

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        if image.ndim != 4:
            raise ConfigurationError(f"expected (B, C, H, W), got shape {tuple(image.shape)}")
        h, w = image.shape[-2:]
        coarsest = self.cfg.strides[-1]
        if h % coarsest or w % coarsest:
            raise ConfigurationError(f"input {h}x{w} not divisible by coarsest stride {coarsest}")

        x = self.stem(image)
        f1 = self.stage1(x)
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)

        p3 = f3
        p2 = self.smooth2(f2 + nn.functional.interpolate(self.lateral32(p3), scale_factor=2, mode="nearest"))
        p1 = self.smooth1(f1 + nn.functional.interpolate(self.lateral21(p2), scale_factor=2, mode="nearest"))
        return FeaturePyramid(levels=(p1, p2, p3), strides=tuple(self.cfg.strides))


class IoctEmbedder(nn.Module):
    """Shared-weight column embedder for the two B-scans of a frame.

    Downsamples the lateral axis to M columns with strided convolutions,
    collapses depth by adaptive average pooling, and projects channels to
    the token width. Token order: scan a columns left to right, then scan b.
    """

    def __init__(self, cfg: IoctEmbedderConfig | None = None):
        super().__init__()
        self.cfg = cfg or IoctEmbedderConfig()
        self.cfg.validate()
        c = self.cfg.hidden_channels
        self.entry = _conv_norm_relu(1, c, stride=2)
        self.block1 = _ResidualBlock(c)
        self.down = _conv_norm_relu(c, c, stride=2)
        self.block2 = _ResidualBlock(c)
        self.pool = nn.AdaptiveAvgPool2d((1, self.cfg.tokens_per_scan))
        self.proj = nn.Conv2d(c, self.cfg.token_width, 1)

    def forward(self, bscan_a: torch.Tensor, bscan_b: torch.Tensor) -> torch.Tensor:
        if bscan_a.shape != bscan_b.shape or bscan_a.ndim != 4 or bscan_a.shape[1] != 1:
            raise ConfigurationError(
                f"expected two (B, 1, H, W) scans of equal shape, got {tuple(bscan_a.shape)} and {tuple(bscan_b.shape)}"
            )
        m = self.cfg.tokens_per_scan
        width = bscan_a.shape[-1]
        # two stride-2 convs then exact-group lateral pooling down to M
        if width % 4 or (width // 4) % m:
            raise ConfigurationError(f"lateral width {width} does not reduce to {m} columns")

        batch = bscan_a.shape[0]
        x = torch.cat([bscan_a, bscan_b], dim=0)
        x = self.block2(self.down(self.block1(self.entry(x))))
        x = self.proj(self.pool(x))                      # (2B, C_OCT, 1, M)
        x = x.squeeze(2).transpose(1, 2)                 # (2B, M, C_OCT)
        return torch.cat([x[:batch], x[batch:]], dim=1)  # (B, 2M, C_OCT)


def column_positions(geom: ScanGeometry, tokens_per_scan: int, image_size: int) -> torch.Tensor:
    """Normalized top-view positions of the 2M tokens, scan a first.

    Token m of a line from s to e sits at s + ((m + 0.5) / M) * (e - s),
    divided by the image size.
    """
    geom.validate()
    out = torch.empty(2 * tokens_per_scan, 2, dtype=torch.float32)
    for scan, (start, end) in enumerate(((geom.line_a_start, geom.line_a_end), (geom.line_b_start, geom.line_b_end))):
        frac = (torch.arange(tokens_per_scan, dtype=torch.float64) + 0.5) / tokens_per_scan
        for axis in range(2):
            vals = (start[axis] + frac * (end[axis] - start[axis])) / image_size
            out[scan * tokens_per_scan : (scan + 1) * tokens_per_scan, axis] = vals.to(torch.float32)
    return out


def corrupt_columns(cset: ColumnDescriptorSet, rng: torch.Generator) -> ColumnDescriptorSet:
    """Replace every token with standard normal noise and set the corruption mask."""
    noise = torch.randn(cset.tokens.shape, generator=rng, dtype=cset.tokens.dtype, device=cset.tokens.device)
    return ColumnDescriptorSet(
        tokens=noise,
        positions=cset.positions,
        source_flags=cset.source_flags,
        corrupted=torch.ones_like(cset.corrupted, dtype=torch.bool),
    )
