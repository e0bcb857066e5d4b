"""Anchor-free multi-task heads: class, box, keypoints, and binned distance.

Boxes are regressed as discrete distributions over edge offsets (expected
value decoded, scaled by stride). The distance head predicts a distribution
over reg_max_d + 1 bins spanning [d_min, d_max] mm; its expected bin index
maps linearly to metric distance, and the argmax bin plus its larger
existing neighbor gives a certainty score. Every decoded detection keeps
its (level, cell) provenance so the distance is read where the box was.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import ConfigurationError
from .datamodel import Annotation, ValidationError
from .encoders import FeaturePyramid


@dataclass(frozen=True)
class HeadConfig:
    num_classes: int = 4
    num_keypoints: int = 2
    reg_max_box: int = 16
    reg_max_distance: int = 16
    distance_min_mm: float = -1.0
    distance_max_mm: float = 6.0
    branch_channels: int = 64
    center_fraction: float = 0.5
    scale_ranges: tuple[tuple[float, float], ...] = ((0.0, 64.0), (64.0, 128.0), (128.0, 1e9))

    def validate(self) -> None:
        if self.num_classes < 1 or self.num_keypoints < 1:
            raise ConfigurationError("num_classes and num_keypoints must be >= 1")
        if self.reg_max_box < 1 or self.reg_max_distance < 1:
            raise ConfigurationError("reg_max values must be >= 1")
        if not self.distance_min_mm < self.distance_max_mm:
            raise ConfigurationError(
                f"need distance_min_mm < distance_max_mm, got {self.distance_min_mm}, {self.distance_max_mm}"
            )
        if not 0.0 < self.center_fraction <= 1.0:
            raise ConfigurationError(f"center_fraction must be in (0, 1], got {self.center_fraction}")


@dataclass
class LevelOutputs:
    stride: int
    cls_logits: torch.Tensor       # (B, num_classes, H, W)
    box_logits: torch.Tensor       # (B, 4*(reg_max_box+1), H, W)
    kp_offsets: torch.Tensor       # (B, K*2, H, W), cell units
    kp_vis_logits: torch.Tensor    # (B, K, H, W)
    dist_logits: torch.Tensor      # (B, reg_max_distance+1, H, W)


@dataclass
class RawHeadOutputs:
    levels: tuple[LevelOutputs, ...]

    def validate(self, cfg: HeadConfig) -> None:
        for lvl in self.levels:
            b, _, h, w = lvl.cls_logits.shape
            if lvl.dist_logits.shape != (b, cfg.reg_max_distance + 1, h, w):
                raise ValidationError(
                    f"distance logits shape {tuple(lvl.dist_logits.shape)} does not match "
                    f"({b}, {cfg.reg_max_distance + 1}, {h}, {w})"
                )
            if lvl.box_logits.shape[1] != 4 * (cfg.reg_max_box + 1):
                raise ValidationError(f"box logits channel count {lvl.box_logits.shape[1]} wrong")

    @property
    def image_size(self) -> int:
        lvl = self.levels[0]
        return lvl.cls_logits.shape[-1] * lvl.stride


@dataclass(frozen=True)
class DistanceDistribution:
    """Simplex over distance bins."""

    probs: np.ndarray

    def validate(self) -> None:
        if self.probs.ndim != 1:
            raise ValidationError(f"expected a vector, got shape {self.probs.shape}")
        if (self.probs < 0).any() or abs(float(self.probs.sum()) - 1.0) > 1e-6:
            raise ValidationError("probabilities must be non-negative and sum to 1")


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    bbox: tuple[float, float, float, float]
    keypoints: tuple[tuple[float, float, float], ...]  # (x, y, visibility prob)
    distance_mm: float
    certainty: float
    level: int
    cell: tuple[int, int]  # (row, col)

    def validate(self, distance_min_mm: float, distance_max_mm: float) -> None:
        if not 0.0 < self.score <= 1.0:
            raise ValidationError(f"score must be in (0, 1], got {self.score}")
        if not 0.0 < self.certainty <= 1.0:
            raise ValidationError(f"certainty must be in (0, 1], got {self.certainty}")
        if not distance_min_mm <= self.distance_mm <= distance_max_mm:
            raise ValidationError(f"distance {self.distance_mm} outside [{distance_min_mm}, {distance_max_mm}]")


class _Branch(nn.Sequential):
    def __init__(self, c_in: int, c_mid: int, c_out: int):
        super().__init__(
            nn.Conv2d(c_in, c_mid, 3, padding=1, bias=False),
            nn.BatchNorm2d(c_mid),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_mid, c_out, 1),
        )


class _DistanceBranch(nn.Sequential):
    """1x1 and 3x3 conv blocks with BN/ReLU, then a 1x1 projection to bins."""

    def __init__(self, c_in: int, c_mid: int, n_bins: int):
        super().__init__(
            nn.Conv2d(c_in, c_mid, 1, bias=False),
            nn.BatchNorm2d(c_mid),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_mid, c_mid, 3, padding=1, bias=False),
            nn.BatchNorm2d(c_mid),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_mid, n_bins, 1),
        )


class PredictionHeads(nn.Module):
    def __init__(self, level_channels: tuple[int, ...], cfg: HeadConfig | None = None):
        super().__init__()
        self.cfg = cfg or HeadConfig()
        self.cfg.validate()
        if len(self.cfg.scale_ranges) != len(level_channels):
            raise ConfigurationError(
                f"{len(self.cfg.scale_ranges)} scale ranges for {len(level_channels)} levels"
            )
        c = self.cfg.branch_channels
        k = self.cfg.num_keypoints
        self.cls_branches = nn.ModuleList(_Branch(ch, c, self.cfg.num_classes) for ch in level_channels)
        self.box_branches = nn.ModuleList(
            _Branch(ch, c, 4 * (self.cfg.reg_max_box + 1)) for ch in level_channels
        )
        self.kp_branches = nn.ModuleList(_Branch(ch, c, 3 * k) for ch in level_channels)
        self.dist_branches = nn.ModuleList(
            _DistanceBranch(ch, c, self.cfg.reg_max_distance + 1) for ch in level_channels
        )
        for branch in self.cls_branches:
            # rare-positive prior keeps early focal loss from exploding
            nn.init.constant_(branch[-1].bias, -math.log((1.0 - 0.01) / 0.01))

    def distance_head_forward(self, level_map: torch.Tensor, level_index: int) -> torch.Tensor:
        return self.dist_branches[level_index](level_map)

    def forward(self, pyramid: FeaturePyramid) -> RawHeadOutputs:
        k = self.cfg.num_keypoints
        outs = []
        for i, (level, stride) in enumerate(zip(pyramid.levels, pyramid.strides)):
            kp_raw = self.kp_branches[i](level)
            outs.append(
                LevelOutputs(
                    stride=stride,
                    cls_logits=self.cls_branches[i](level),
                    box_logits=self.box_branches[i](level),
                    kp_offsets=kp_raw[:, : 2 * k],
                    kp_vis_logits=kp_raw[:, 2 * k :],
                    dist_logits=self.dist_branches[i](level),
                )
            )
        return RawHeadOutputs(levels=tuple(outs))


def decode_distance(logits, distance_min_mm: float = -1.0, distance_max_mm: float = 6.0) -> tuple[float, float]:
    """Expected-bin distance in mm plus argmax-neighborhood certainty.

    The expected bin index of softmax(logits) is scaled linearly onto
    [d_min, d_max]. Certainty is the argmax probability (ties to the lowest
    index) plus the larger of its existing neighbors; boundary bins have
    only one neighbor.
    """
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size < 2:
        raise ValidationError(f"expected a logit vector with >= 2 bins, got shape {logits.shape}")
    if not np.isfinite(logits).all():
        raise ValidationError("non-finite distance logits")

    shifted = np.exp(logits - logits.max())
    probs = shifted / shifted.sum()
    reg_max = logits.size - 1
    expected = float(np.dot(np.arange(reg_max + 1, dtype=np.float64), probs))
    distance = distance_min_mm + (expected / reg_max) * (distance_max_mm - distance_min_mm)

    star = int(np.argmax(probs))
    neighbors = []
    if star > 0:
        neighbors.append(probs[star - 1])
    if star < reg_max:
        neighbors.append(probs[star + 1])
    certainty = float(probs[star] + max(neighbors))
    return distance, certainty


def distance_distribution(logits) -> DistanceDistribution:
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    logits = np.asarray(logits, dtype=np.float64)
    shifted = np.exp(logits - logits.max())
    dist = DistanceDistribution(shifted / shifted.sum())
    dist.validate()
    return dist


@dataclass
class LevelTargets:
    stride: int
    pos_mask: torch.Tensor     # (H, W) bool
    cls_target: torch.Tensor   # (num_classes, H, W)
    box_target: torch.Tensor   # (4, H, W), edge distances in bin (cell) units
    kp_target: torch.Tensor    # (K, 2, H, W), offsets in cell units
    vis_target: torch.Tensor   # (K, H, W)
    dist_target: torch.Tensor  # (H, W), bin-space distance


def assign_targets(
    annotations: list[Annotation],
    image_size: int,
    strides: tuple[int, ...],
    cfg: HeadConfig | None = None,
) -> list[LevelTargets]:
    """Center-sampling assignment of ground truth to pyramid cells.

    A cell is positive when its center falls inside the central
    ``center_fraction`` sub-box of a ground-truth box whose characteristic
    size sqrt(w*h) lands in that level's scale range. Ranges may overlap, in
    which case the box is assigned at every matching level; sqrt(w*h) keeps
    thin elongated instruments on grids fine enough to localize their short
    axis. Smaller boxes win cell overlaps.
    """
    cfg = cfg or HeadConfig()
    k = cfg.num_keypoints
    targets = []
    for stride in strides:
        n = image_size // stride
        targets.append(
            LevelTargets(
                stride=stride,
                pos_mask=torch.zeros(n, n, dtype=torch.bool),
                cls_target=torch.zeros(cfg.num_classes, n, n),
                box_target=torch.zeros(4, n, n),
                kp_target=torch.zeros(k, 2, n, n),
                vis_target=torch.zeros(k, n, n),
                dist_target=torch.zeros(n, n),
            )
        )

    def area(a: Annotation) -> float:
        return (a.bbox[2] - a.bbox[0]) * (a.bbox[3] - a.bbox[1])

    for ann in sorted(annotations, key=area, reverse=True):
        ann.validate(image_size, image_size, cfg.distance_min_mm, cfg.distance_max_mm)
        x_min, y_min, x_max, y_max = ann.bbox
        if x_min < 0 or y_min < 0 or x_max > image_size or y_max > image_size:
            raise ValidationError(f"bbox {ann.bbox} extends outside the {image_size}px image")
        if len(ann.keypoints) != k:
            raise ValidationError(f"expected {k} keypoints, got {len(ann.keypoints)}")

        size = math.sqrt((x_max - x_min) * (y_max - y_min))
        levels = [i for i, (lo, hi) in enumerate(cfg.scale_ranges) if lo <= size < hi]
        if not levels:
            levels = [len(cfg.scale_ranges) - 1]

        t_d = (ann.distance_mm - cfg.distance_min_mm) / (cfg.distance_max_mm - cfg.distance_min_mm)
        t_d = min(max(t_d * cfg.reg_max_distance, 0.0), float(cfg.reg_max_distance))

        for level in levels:
            tgt = targets[level]
            stride = tgt.stride
            n = tgt.pos_mask.shape[0]

            cx, cy = (x_min + x_max) / 2, (y_min + y_max) / 2
            half_w = (x_max - x_min) * cfg.center_fraction / 2
            half_h = (y_max - y_min) * cfg.center_fraction / 2
            j_lo = max(int(math.ceil((cx - half_w) / stride - 0.5)), 0)
            j_hi = min(int(math.floor((cx + half_w) / stride - 0.5)), n - 1)
            i_lo = max(int(math.ceil((cy - half_h) / stride - 0.5)), 0)
            i_hi = min(int(math.floor((cy + half_h) / stride - 0.5)), n - 1)

            for i in range(i_lo, i_hi + 1):
                for j in range(j_lo, j_hi + 1):
                    x_c, y_c = (j + 0.5) * stride, (i + 0.5) * stride
                    tgt.pos_mask[i, j] = True
                    tgt.cls_target[:, i, j] = 0.0
                    tgt.cls_target[ann.instrument_class, i, j] = 1.0
                    edges = torch.tensor(
                        [(x_c - x_min), (y_c - y_min), (x_max - x_c), (y_max - y_c)]
                    ) / stride
                    tgt.box_target[:, i, j] = edges.clamp(0.0, float(cfg.reg_max_box))
                    for kp_idx, (kx, ky, visible) in enumerate(ann.keypoints):
                        tgt.vis_target[kp_idx, i, j] = float(visible)
                        if visible:
                            tgt.kp_target[kp_idx, 0, i, j] = (kx - x_c) / stride
                            tgt.kp_target[kp_idx, 1, i, j] = (ky - y_c) / stride
                    tgt.dist_target[i, j] = t_d
    return targets


def box_expectation(box_logits: torch.Tensor, reg_max: int) -> torch.Tensor:
    """(B, 4*(R+1), H, W) logits -> (B, 4, H, W) expected edge offsets in [0, R]."""
    b, _, h, w = box_logits.shape
    probs = torch.softmax(box_logits.reshape(b, 4, reg_max + 1, h, w), dim=2)
    bins = torch.arange(reg_max + 1, dtype=probs.dtype, device=probs.device)
    return (probs * bins[None, None, :, None, None]).sum(dim=2)


def box_iou(a: tuple[float, float, float, float], b: tuple[float, float, float, float]) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def greedy_nms(
    boxes: list[tuple[float, float, float, float]],
    scores: list[float],
    classes: list[int],
    iou_thresh: float,
) -> list[int]:
    """Class-wise greedy suppression; kept indices in descending-score order.

    Score ties keep the earlier index first.
    """
    order = sorted(range(len(boxes)), key=lambda i: -scores[i])
    kept: list[int] = []
    for i in order:
        if any(classes[i] == classes[j] and box_iou(boxes[i], boxes[j]) > iou_thresh for j in kept):
            continue
        kept.append(i)
    return kept


def decode_detections(
    raw: RawHeadOutputs,
    score_thresh: float = 0.3,
    nms_iou: float = 0.5,
    cfg: HeadConfig | None = None,
) -> list[list[Detection]]:
    """Decode batched head outputs into per-frame detection lists.

    Candidates above the score threshold are decoded (expected-value boxes,
    center-plus-offset keypoints), suppressed class-wise by greedy NMS, and
    their distance read from the surviving cell. Sorted by descending score.
    """
    cfg = cfg or HeadConfig()
    raw.validate(cfg)
    image_size = raw.image_size
    batch = raw.levels[0].cls_logits.shape[0]
    k = cfg.num_keypoints

    results = []
    for b in range(batch):
        candidates = []
        for level_idx, lvl in enumerate(raw.levels):
            scores = torch.sigmoid(lvl.cls_logits[b]).detach()
            keep = scores > score_thresh
            if not keep.any():
                continue
            edges = box_expectation(lvl.box_logits[b : b + 1], cfg.reg_max_box)[0].detach()
            offsets = lvl.kp_offsets[b].detach().reshape(k, 2, *lvl.kp_offsets.shape[-2:])
            vis = torch.sigmoid(lvl.kp_vis_logits[b]).detach()
            stride = lvl.stride
            for cls_id, i, j in zip(*keep.nonzero(as_tuple=True)):
                cls_id, i, j = int(cls_id), int(i), int(j)
                x_c, y_c = (j + 0.5) * stride, (i + 0.5) * stride
                box = (
                    max(x_c - float(edges[0, i, j]) * stride, 0.0),
                    max(y_c - float(edges[1, i, j]) * stride, 0.0),
                    min(x_c + float(edges[2, i, j]) * stride, float(image_size)),
                    min(y_c + float(edges[3, i, j]) * stride, float(image_size)),
                )
                kps = tuple(
                    (
                        x_c + float(offsets[kp_idx, 0, i, j]) * stride,
                        y_c + float(offsets[kp_idx, 1, i, j]) * stride,
                        float(vis[kp_idx, i, j]),
                    )
                    for kp_idx in range(k)
                )
                candidates.append((float(scores[cls_id, i, j]), cls_id, box, kps, level_idx, (i, j)))

        keep_idx = greedy_nms(
            [c[2] for c in candidates], [c[0] for c in candidates], [c[1] for c in candidates], nms_iou
        )
        kept = [candidates[i] for i in keep_idx]

        detections = []
        for score, cls_id, box, kps, level_idx, cell in kept:
            logits = raw.levels[level_idx].dist_logits[b, :, cell[0], cell[1]]
            distance, certainty = decode_distance(logits, cfg.distance_min_mm, cfg.distance_max_mm)
            det = Detection(
                class_id=cls_id,
                score=score,
                bbox=box,
                keypoints=kps,
                distance_mm=distance,
                certainty=certainty,
                level=level_idx,
                cell=cell,
            )
            det.validate(cfg.distance_min_mm, cfg.distance_max_mm)
            detections.append(det)
        results.append(detections)
    return results
