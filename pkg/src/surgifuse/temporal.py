"""Recurrent refinement across frames and the consistency loss on top of it.

Each pyramid level is average-pooled to a compact G x G grid of regional
descriptors, advanced through a 4-layer gated recurrent cell (weights
shared across grid positions, separate parameters and state per level),
upsampled back, projected to the level's width, and added to the input.
Zeroing the output projections turns the whole module into an identity,
so the non-recurrent solution stays reachable.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ConfigurationError
from .datamodel import ValidationError
from .encoders import FeaturePyramid

_LAYERS = 4  # depth of the recurrent stack; fixed, not a tunable


@dataclass(frozen=True)
class TemporalConfig:
    cell: str = "gru"
    grid_size: int = 8
    hidden_dim: int = 64

    def validate(self) -> None:
        if self.cell not in ("gru", "lstm"):
            raise ConfigurationError(f"cell must be 'gru' or 'lstm', got {self.cell!r}")
        if self.grid_size < 1 or self.hidden_dim < 1:
            raise ConfigurationError("grid_size and hidden_dim must be >= 1")


@dataclass
class RecurrentState:
    """Per-level hidden (and LSTM cell) tensors, shaped (layers, B, G*G, H_r).

    Sequence-local: create a fresh state per sequence, never share across.
    """

    cell_kind: str
    hidden: list[torch.Tensor]
    cell: list[torch.Tensor] | None

    def detach(self) -> "RecurrentState":
        """Copy with tensors cut from the autograd graph (for truncated BPTT)."""
        return RecurrentState(
            cell_kind=self.cell_kind,
            hidden=[h.detach() for h in self.hidden],
            cell=None if self.cell is None else [c.detach() for c in self.cell],
        )


class TemporalModule(nn.Module):
    def __init__(self, level_channels: tuple[int, ...], cfg: TemporalConfig | None = None):
        super().__init__()
        self.cfg = cfg or TemporalConfig()
        self.cfg.validate()
        self.level_channels = tuple(level_channels)
        h = self.cfg.hidden_dim
        cell_cls = nn.GRUCell if self.cfg.cell == "gru" else nn.LSTMCell

        self.proj_in = nn.ModuleList(nn.Conv2d(c, h, 1) for c in level_channels)
        self.proj_out = nn.ModuleList(nn.Conv2d(h, c, 1) for c in level_channels)
        self.cells = nn.ModuleList(
            nn.ModuleList(cell_cls(h, h) for _ in range(_LAYERS)) for _ in level_channels
        )

    def init_state(self, batch: int, *, device=None, dtype=None) -> RecurrentState:
        g2 = self.cfg.grid_size**2
        shape = (_LAYERS, batch, g2, self.cfg.hidden_dim)
        ref = next(self.parameters())
        device = device if device is not None else ref.device
        dtype = dtype if dtype is not None else ref.dtype
        hidden = [torch.zeros(shape, device=device, dtype=dtype) for _ in self.level_channels]
        cell = None
        if self.cfg.cell == "lstm":
            cell = [torch.zeros(shape, device=device, dtype=dtype) for _ in self.level_channels]
        return RecurrentState(cell_kind=self.cfg.cell, hidden=hidden, cell=cell)

    def pool_regions(self, level_map: torch.Tensor, level_index: int) -> torch.Tensor:
        """Average-pool a level to G x G and project channels to the hidden dim."""
        g = self.cfg.grid_size
        if level_map.shape[-2] < g or level_map.shape[-1] < g:
            raise ConfigurationError(
                f"level spatial size {tuple(level_map.shape[-2:])} smaller than grid {g}x{g}"
            )
        pooled = nn.functional.adaptive_avg_pool2d(level_map, (g, g))
        return self.proj_in[level_index](pooled)

    def recurrent_step(
        self, state: RecurrentState, grid: torch.Tensor, level_index: int
    ) -> tuple[RecurrentState, torch.Tensor]:
        """Advance one level's grid through the recurrent stack; returns new state.

        The state object is not mutated; callers thread the returned state.
        """
        b, h_dim, g, _ = grid.shape
        expect = state.hidden[level_index].shape
        if expect[1] != b or expect[2] != g * g or expect[3] != h_dim:
            raise ValidationError(
                f"state shape {tuple(expect)} incompatible with grid {tuple(grid.shape)}"
            )
        x = grid.flatten(2).transpose(1, 2).reshape(b * g * g, h_dim)

        new_hidden = [t for t in state.hidden]
        new_cell = None if state.cell is None else [t for t in state.cell]
        layer_h = []
        layer_c = []
        for layer in range(_LAYERS):
            h_prev = state.hidden[level_index][layer].reshape(b * g * g, h_dim)
            cell = self.cells[level_index][layer]
            if state.cell_kind == "gru":
                x = cell(x, h_prev)
            else:
                c_prev = state.cell[level_index][layer].reshape(b * g * g, h_dim)
                x, c_new = cell(x, (h_prev, c_prev))
                layer_c.append(c_new.reshape(b, g * g, h_dim))
            layer_h.append(x.reshape(b, g * g, h_dim))
        new_hidden[level_index] = torch.stack(layer_h)
        if new_cell is not None:
            new_cell[level_index] = torch.stack(layer_c)

        out = x.reshape(b, g, g, h_dim).permute(0, 3, 1, 2)
        return RecurrentState(state.cell_kind, new_hidden, new_cell), out

    def refine(self, fused: FeaturePyramid, state: RecurrentState) -> tuple[FeaturePyramid, RecurrentState]:
        """One temporal step over all levels; output shapes equal input shapes."""
        if len(fused.levels) != len(self.level_channels):
            raise ValidationError(
                f"pyramid has {len(fused.levels)} levels, module built for {len(self.level_channels)}"
            )
        out_levels = []
        for i, level in enumerate(fused.levels):
            grid = self.pool_regions(level, i)
            state, advanced = self.recurrent_step(state, grid, i)
            up = nn.functional.interpolate(
                advanced, size=level.shape[-2:], mode="bilinear", align_corners=False
            )
            out_levels.append(level + self.proj_out[i](up))
        return FeaturePyramid(levels=tuple(out_levels), strides=fused.strides), state

    forward = refine

    def zero_output_projections(self) -> None:
        """Make refine an exact identity (used by identity-reachability tests)."""
        for conv in self.proj_out:
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)


def cosine_contrastive_loss(f_c: torch.Tensor, f_n: torch.Tensor) -> torch.Tensor:
    """1 - cos(f_c, f_n) with f_n as a fixed target (no gradient through it).

    A zero f_c has no defined direction; the loss continues as the constant
    1 there, with zero gradient. A zero f_n violates the precondition.
    """
    if f_c.shape != f_n.shape:
        raise ValidationError(f"feature shapes differ: {tuple(f_c.shape)} vs {tuple(f_n.shape)}")
    target = f_n.detach().flatten()
    flat = f_c.flatten()
    norm_n = torch.linalg.vector_norm(target)
    if norm_n.item() == 0.0:
        raise ValidationError("intact feature vector is all-zero")
    norm_c = torch.linalg.vector_norm(flat)
    if norm_c.item() == 0.0:
        return flat.sum() * 0.0 + 1.0
    return 1.0 - torch.dot(flat, target) / (norm_c * norm_n)
