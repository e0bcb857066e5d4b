"""Cross-attention fusion of cross-section tokens into the top-view pyramid.

Per pyramid level: pixels become queries (sinusoidal position codes added),
tokens become keys and values (position code concatenated, then projected),
two stacked attention blocks run, and the result is projected back to the
level's channel width and added residually. Shapes never change; zeroing
the final projection makes fusion an exact identity.

Query codes are added while key codes are concatenated; the asymmetry is
deliberate and easy to get backwards, so it is centralized here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .config import ConfigurationError
from .datamodel import ValidationError
from .encoders import ColumnDescriptorSet, FeaturePyramid


@dataclass(frozen=True)
class FusionConfig:
    attn_dim: int = 64
    heads: int = 4
    blocks: int = 2
    ffn_expansion: int = 2
    key_pos_dim: int = 16

    def validate(self) -> None:
        if self.attn_dim % self.heads:
            raise ConfigurationError(f"attn_dim {self.attn_dim} not divisible by heads {self.heads}")
        if self.attn_dim % 4 or self.key_pos_dim % 4:
            raise ConfigurationError("attn_dim and key_pos_dim must be divisible by 4")
        if self.blocks < 1:
            raise ConfigurationError(f"blocks must be >= 1, got {self.blocks}")


def sinusoidal_encode(coords: torch.Tensor, dim: int) -> torch.Tensor:
    """Sin/cos position code for normalized 2D points, (..., 2) -> (..., dim).

    Half the dimensions encode x, half y; within each axis sin/cos pairs
    run over geometrically spaced frequencies (doubling, starting at pi).
    """
    if dim % 4:
        raise ConfigurationError(f"encoding dim must be divisible by 4, got {dim}")
    if coords.shape[-1] != 2:
        raise ConfigurationError(f"expected (..., 2) coords, got {tuple(coords.shape)}")
    n_freq = dim // 4
    freqs = math.pi * (2.0 ** torch.arange(n_freq, dtype=coords.dtype, device=coords.device))
    parts = []
    for axis in range(2):
        angle = coords[..., axis : axis + 1] * freqs
        parts.append(torch.stack([torch.sin(angle), torch.cos(angle)], dim=-1).flatten(-2))
    return torch.cat(parts, dim=-1)


class CrossAttentionBlock(nn.Module):
    """Multi-head cross-attention, residual, layer norm, FFN, residual.

    Attention projections carry no bias so that zero values contribute
    exactly zero attention output.
    """

    def __init__(self, dim: int, heads: int, ffn_expansion: int = 2):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim, bias=False)
        self.k_proj = nn.Linear(dim, dim, bias=False)
        self.v_proj = nn.Linear(dim, dim, bias=False)
        self.out_proj = nn.Linear(dim, dim, bias=False)
        self.norm = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_expansion * dim),
            nn.ReLU(inplace=True),
            nn.Linear(ffn_expansion * dim, dim),
        )

    def attention(self, queries: torch.Tensor, keys: torch.Tensor, values: torch.Tensor):
        """Scaled dot-product attention; returns (output, weights)."""
        if queries.shape[-1] != self.dim or keys.shape[-1] != self.dim or values.shape[-1] != self.dim:
            raise ConfigurationError(
                f"feature dim mismatch: got {queries.shape[-1]}/{keys.shape[-1]}/{values.shape[-1]}, expected {self.dim}"
            )
        if keys.shape[-2] < 1:
            raise ConfigurationError("need at least one key/value token")
        head_dim = self.dim // self.heads

        def split(x):
            return x.unflatten(-1, (self.heads, head_dim)).transpose(-3, -2)

        q = split(self.q_proj(queries))
        k = split(self.k_proj(keys))
        v = split(self.v_proj(values))
        scores = q @ k.transpose(-2, -1) / math.sqrt(head_dim)
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(-3, -2).flatten(-2)
        return self.out_proj(out), weights

    def forward(self, queries, keys, values, return_weights: bool = False):
        attn_out, weights = self.attention(queries, keys, values)
        x = self.norm(queries + attn_out)
        x = x + self.ffn(x)
        return (x, weights) if return_weights else x


class _LevelFusion(nn.Module):
    def __init__(self, channels: int, token_width: int, cfg: FusionConfig):
        super().__init__()
        self.query_in = nn.Linear(channels, cfg.attn_dim)
        self.key_in = nn.Linear(token_width + cfg.key_pos_dim, cfg.attn_dim)
        self.blocks = nn.ModuleList(
            CrossAttentionBlock(cfg.attn_dim, cfg.heads, cfg.ffn_expansion) for _ in range(cfg.blocks)
        )
        self.out = nn.Linear(cfg.attn_dim, channels)


class FusionModule(nn.Module):
    """Injects token evidence into every pyramid level independently."""

    def __init__(self, level_channels: tuple[int, ...], token_width: int, cfg: FusionConfig | None = None):
        super().__init__()
        self.cfg = cfg or FusionConfig()
        self.cfg.validate()
        self.token_width = token_width
        self.levels = nn.ModuleList(_LevelFusion(c, token_width, self.cfg) for c in level_channels)

    def forward(self, pyramid: FeaturePyramid, cset: ColumnDescriptorSet) -> FeaturePyramid:
        cset.validate()
        if len(pyramid.levels) != len(self.levels):
            raise ValidationError(f"pyramid has {len(pyramid.levels)} levels, fusion built for {len(self.levels)}")
        if cset.tokens.shape[0] != pyramid.levels[0].shape[0]:
            raise ValidationError(
                f"batch mismatch: tokens {cset.tokens.shape[0]} vs pyramid {pyramid.levels[0].shape[0]}"
            )
        if cset.tokens.shape[-1] != self.token_width:
            raise ValidationError(f"token width {cset.tokens.shape[-1]}, fusion built for {self.token_width}")

        key_code = sinusoidal_encode(cset.positions, self.cfg.key_pos_dim)
        key_feats = torch.cat([cset.tokens, key_code], dim=-1)

        fused = []
        for level, mod in zip(pyramid.levels, self.levels):
            b, c, h, w = level.shape
            queries = level.flatten(2).transpose(1, 2)  # (B, HW, C)
            centers = _cell_centers(h, w, level.dtype, level.device)
            q = mod.query_in(queries) + sinusoidal_encode(centers, self.cfg.attn_dim)
            kv = mod.key_in(key_feats)
            x = q
            for block in mod.blocks:
                x = block(x, kv, kv)
            delta = mod.out(x).transpose(1, 2).reshape(b, c, h, w)
            fused.append(level + delta)
        return FeaturePyramid(levels=tuple(fused), strides=pyramid.strides)


def _cell_centers(h: int, w: int, dtype, device) -> torch.Tensor:
    ys = (torch.arange(h, dtype=dtype, device=device) + 0.5) / h
    xs = (torch.arange(w, dtype=dtype, device=device) + 0.5) / w
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1).reshape(h * w, 2)
