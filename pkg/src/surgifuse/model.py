"""Model variants: single-modality, multimodal, and recurrent multimodal.

"sm" runs the top-view encoder straight into the heads. "mm" additionally
embeds the two cross-sectional scans into column tokens and fuses them into
every pyramid level. "rmm" adds the recurrent refinement on top; callers
thread its per-sequence state through forward().
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .config import ConfigurationError
from .datamodel import MultimodalFrame, ScanGeometry
from .encoders import (
    ColumnDescriptorSet,
    FeaturePyramid,
    IoctEmbedder,
    IoctEmbedderConfig,
    OpmiEncoder,
    OpmiEncoderConfig,
    column_positions,
)
from .fusion import FusionConfig, FusionModule
from .heads import HeadConfig, PredictionHeads, RawHeadOutputs
from .temporal import RecurrentState, TemporalConfig, TemporalModule

VARIANTS = ("sm", "mm", "rmm")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "mm"
    encoder: OpmiEncoderConfig = field(default_factory=OpmiEncoderConfig)
    ioct: IoctEmbedderConfig = field(default_factory=IoctEmbedderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        self.encoder.validate()
        self.ioct.validate()
        self.fusion.validate()
        self.temporal.validate()
        self.heads.validate()


class SurgiFuseModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.cfg.validate()
        self.encoder = OpmiEncoder(self.cfg.encoder)
        self.heads = PredictionHeads(self.cfg.encoder.level_channels, self.cfg.heads)
        self.embedder = None
        self.fusion = None
        self.temporal = None
        if self.cfg.variant in ("mm", "rmm"):
            self.embedder = IoctEmbedder(self.cfg.ioct)
            self.fusion = FusionModule(
                self.cfg.encoder.level_channels, self.cfg.ioct.token_width, self.cfg.fusion
            )
        if self.cfg.variant == "rmm":
            self.temporal = TemporalModule(self.cfg.encoder.level_channels, self.cfg.temporal)

    @property
    def variant(self) -> str:
        return self.cfg.variant

    def init_state(self, batch: int) -> RecurrentState:
        if self.temporal is None:
            raise ConfigurationError(f"variant {self.variant!r} has no recurrent state")
        return self.temporal.init_state(batch)

    def embed_tokens(
        self,
        bscan_a: torch.Tensor,
        bscan_b: torch.Tensor,
        positions: torch.Tensor,
        corrupted: torch.Tensor | None = None,
    ) -> ColumnDescriptorSet:
        if self.embedder is None:
            raise ConfigurationError(f"variant {self.variant!r} does not embed cross-section tokens")
        tokens = self.embedder(bscan_a, bscan_b)
        batch, n_tokens, _ = tokens.shape
        if positions.ndim == 2:
            positions = positions.unsqueeze(0).expand(batch, -1, -1)
        if corrupted is None:
            corrupted = torch.zeros(batch, dtype=torch.bool, device=tokens.device)
        m = self.cfg.ioct.tokens_per_scan
        flags = torch.cat([torch.zeros(m, dtype=torch.long), torch.ones(m, dtype=torch.long)])
        cset = ColumnDescriptorSet(tokens=tokens, positions=positions, source_flags=flags, corrupted=corrupted)
        cset.validate()
        return cset

    def forward(
        self,
        opmi: torch.Tensor,
        bscan_a: torch.Tensor | None = None,
        bscan_b: torch.Tensor | None = None,
        positions: torch.Tensor | None = None,
        state: RecurrentState | None = None,
        cset: ColumnDescriptorSet | None = None,
    ) -> tuple[RawHeadOutputs, RecurrentState | None, FeaturePyramid]:
        """Run one frame (batched) through the variant's path.

        Returns (head outputs, next state or None, the pyramid the heads
        consumed). Pass ``cset`` to override token embedding (the corruption
        path); otherwise scans and positions are required for mm/rmm.
        """
        pyramid = self.encoder(opmi)
        if self.cfg.variant != "sm":
            if cset is None:
                if bscan_a is None or bscan_b is None or positions is None:
                    raise ConfigurationError(f"variant {self.variant!r} needs both scans and positions")
                cset = self.embed_tokens(bscan_a, bscan_b, positions)
            pyramid = self.fusion(pyramid, cset)
        next_state = None
        if self.cfg.variant == "rmm":
            if state is None:
                state = self.init_state(opmi.shape[0])
            pyramid, next_state = self.temporal.refine(pyramid, state)
        return self.heads(pyramid), next_state, pyramid


def frame_to_tensors(frame: MultimodalFrame) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(opmi (1,3,H,W), scan a (1,1,H,W), scan b) float32 tensors from a frame."""
    opmi = torch.from_numpy(np.ascontiguousarray(frame.opmi.transpose(2, 0, 1))).unsqueeze(0)
    bscan_a = torch.from_numpy(frame.bscan_a).unsqueeze(0).unsqueeze(0)
    bscan_b = torch.from_numpy(frame.bscan_b).unsqueeze(0).unsqueeze(0)
    return opmi, bscan_a, bscan_b


def frame_positions(geom: ScanGeometry, tokens_per_scan: int, image_size: int) -> torch.Tensor:
    return column_positions(geom, tokens_per_scan, image_size)
