"""Training losses and their weighted combination.

All functions are pure and differentiable; they accept any leading batch
shape. The distribution-focal loss clamps out-of-range targets and counts
how often it had to (exposed via ``dfl_clamp_count``), since a clamp
usually means an assignment bug upstream.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import torch
from torch import nn

logger = logging.getLogger(__name__)

_dfl_clamp_events = 0


def dfl_clamp_count() -> int:
    return _dfl_clamp_events


def reset_dfl_clamp_count() -> None:
    global _dfl_clamp_events
    _dfl_clamp_events = 0


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    giou: float = 2.5
    box_dfl: float = 0.5
    kp: float = 1.0
    vis: float = 0.5
    dist_dfl: float = 1.0
    cos: float = 0.5

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def focal_loss(
    logits: torch.Tensor,
    targets: torch.Tensor,
    gamma: float = 2.0,
    alpha: float = 0.25,
    num_pos: float | None = None,
) -> torch.Tensor:
    """Binary focal loss, summed and divided by the positive count.

    alpha scales every element uniformly, so gamma=0, alpha=1 is exactly
    BCE under the same normalization.
    """
    if gamma < 0 or not 0.0 <= alpha <= 1.0:
        raise ValueError(f"need gamma >= 0 and alpha in [0, 1], got {gamma}, {alpha}")
    bce = nn.functional.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = torch.exp(-bce)
    loss = alpha * (1.0 - p_t) ** gamma * bce
    if num_pos is None:
        num_pos = float(targets.sum())
    return loss.sum() / max(num_pos, 1.0)


def dfl(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Distribution focal loss over (..., reg_max+1) logits and (...) targets.

    The real-valued target is split between its two enclosing bins; an
    integer target reduces to plain cross-entropy against its bin. Targets
    outside [0, reg_max] are clamped and counted.
    """
    global _dfl_clamp_events
    reg_max = logits.shape[-1] - 1
    target = torch.as_tensor(target, dtype=logits.dtype, device=logits.device)
    flat_logits = logits.reshape(-1, reg_max + 1)
    flat_t = target.reshape(-1)
    if flat_logits.shape[0] != flat_t.shape[0]:
        raise ValueError(f"{flat_logits.shape[0]} logit rows vs {flat_t.shape[0]} targets")

    out_of_range = int(((flat_t < 0) | (flat_t > reg_max)).sum())
    if out_of_range:
        _dfl_clamp_events += out_of_range
        logger.warning("dfl: clamped %d target(s) outside [0, %d]", out_of_range, reg_max)
        flat_t = flat_t.clamp(0.0, float(reg_max))

    low = flat_t.floor().clamp(max=reg_max - 1)
    high = low + 1.0
    w_low = high - flat_t
    w_high = flat_t - low
    log_p = torch.log_softmax(flat_logits, dim=-1)
    nll_low = -log_p.gather(1, low.long().unsqueeze(1)).squeeze(1)
    nll_high = -log_p.gather(1, high.long().unsqueeze(1)).squeeze(1)
    return (w_low * nll_low + w_high * nll_high).mean()


def giou_loss(box_a: torch.Tensor, box_b: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """1 - GIoU over (..., 4) box pairs in (x_min, y_min, x_max, y_max) form.

    Zero-area boxes act as points: empty intersection, zero union share.
    """
    ix = (torch.minimum(box_a[..., 2], box_b[..., 2]) - torch.maximum(box_a[..., 0], box_b[..., 0])).clamp(min=0)
    iy = (torch.minimum(box_a[..., 3], box_b[..., 3]) - torch.maximum(box_a[..., 1], box_b[..., 1])).clamp(min=0)
    inter = ix * iy
    area_a = (box_a[..., 2] - box_a[..., 0]).clamp(min=0) * (box_a[..., 3] - box_a[..., 1]).clamp(min=0)
    area_b = (box_b[..., 2] - box_b[..., 0]).clamp(min=0) * (box_b[..., 3] - box_b[..., 1]).clamp(min=0)
    union = area_a + area_b - inter
    iou = torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(union))

    hull_w = torch.maximum(box_a[..., 2], box_b[..., 2]) - torch.minimum(box_a[..., 0], box_b[..., 0])
    hull_h = torch.maximum(box_a[..., 3], box_b[..., 3]) - torch.minimum(box_a[..., 1], box_b[..., 1])
    hull = hull_w * hull_h
    penalty = torch.where(hull > 0, (hull - union) / hull.clamp(min=1e-12), torch.zeros_like(hull))
    loss = 1.0 - (iou - penalty)
    if reduction == "mean":
        return loss.mean()
    if reduction == "none":
        return loss
    raise ValueError(f"unknown reduction {reduction!r}")


def keypoint_losses(
    offsets: torch.Tensor,
    vis_logits: torch.Tensor,
    offset_targets: torch.Tensor,
    vis_targets: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(smooth L1 over visible keypoints, BCE over all visibilities).

    offsets/offset_targets: (N, K, 2) in cell units; vis: (N, K).
    """
    if offsets.shape != offset_targets.shape or vis_logits.shape != vis_targets.shape:
        raise ValueError("prediction/target shape mismatch")
    zero = offsets.sum() * 0.0
    if vis_targets.numel() == 0:
        return zero, zero
    visible = vis_targets > 0.5
    if visible.any():
        reg = nn.functional.smooth_l1_loss(
            offsets[visible], offset_targets[visible], beta=1.0, reduction="mean"
        )
    else:
        reg = zero
    bce = nn.functional.binary_cross_entropy_with_logits(vis_logits, vis_targets, reduction="mean")
    return reg, bce


def total_loss(
    components: dict[str, torch.Tensor],
    weights: LossWeights | dict[str, float] | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum plus a float breakdown for the step log."""
    w = (weights or LossWeights())
    if isinstance(w, LossWeights):
        w = w.as_dict()
    unknown = sorted(set(components) - set(w))
    if unknown:
        raise ValueError(f"components {unknown} have no weight; known: {sorted(w)}")

    total = None
    breakdown = {}
    for name, value in components.items():
        val = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if val != val:
            raise FloatingPointError(f"loss component {name!r} is NaN")
        breakdown[name] = val
        term = w[name] * value
        total = term if total is None else total + term
    if total is None:
        total = torch.zeros(())
    breakdown["total"] = float(total.detach()) if isinstance(total, torch.Tensor) else float(total)
    return total, breakdown
