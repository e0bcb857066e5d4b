"""Detection and distance-estimation metrics.

mAP follows the all-point interpolated protocol at IoU 0.5: per class,
predictions sorted by score greedily match the best still-free ground
truth, the precision envelope is integrated over recall, and the mean runs
over classes that actually appear in the ground truth.

Distance and keypoint metrics run on class-agnostic score-greedy matches
at the same IoU threshold; a detection of the wrong class but right place
still has its distance judged. Unmatched ground truths are excluded from
the means and reported as a count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datamodel import Annotation
from .heads import Detection, box_iou


@dataclass
class MatchedPair:
    frame: int
    detection: Detection
    annotation: Annotation


@dataclass
class MetricsReport:
    map50: float
    kp_dist_px: float | None
    dmae_um: float | None
    dmae_0_1_um: float | None
    certain_dmae_um: float | None
    masked_dmae_um: float | None
    masked_dmae_0_1_um: float | None
    counts: dict[str, int] = field(default_factory=dict)
    unmatched_gt: int = 0
    latency_ms: dict[str, float] | None = None

    def to_dict(self) -> dict:
        out = {"map50": self.map50, "counts": self.counts, "unmatched_gt": self.unmatched_gt}
        for name in ("kp_dist_px", "dmae_um", "dmae_0_1_um", "certain_dmae_um", "masked_dmae_um", "masked_dmae_0_1_um"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        if self.latency_ms is not None:
            out["latency_ms"] = self.latency_ms
        return out


def compute_map50(
    predictions: list[list[Detection]],
    ground_truths: list[list[Annotation]],
    iou_thresh: float = 0.5,
) -> float:
    """Mean AP at the IoU threshold, in percent, over classes present in gts."""
    if len(predictions) != len(ground_truths):
        raise ValueError(f"{len(predictions)} prediction frames vs {len(ground_truths)} gt frames")
    classes = sorted({a.instrument_class for gts in ground_truths for a in gts})
    if not classes:
        return 0.0
    return 100.0 * float(np.mean([_average_precision(predictions, ground_truths, c, iou_thresh) for c in classes]))


def _average_precision(predictions, ground_truths, class_id: int, iou_thresh: float) -> float:
    entries = []
    for frame, dets in enumerate(predictions):
        for det in dets:
            if det.class_id == class_id:
                entries.append((det.score, frame, det.bbox))
    # stable sort: ties stay in frame/decode order for determinism
    entries.sort(key=lambda e: -e[0])

    gt_boxes = {
        frame: [a.bbox for a in gts if a.instrument_class == class_id]
        for frame, gts in enumerate(ground_truths)
    }
    n_gt = sum(len(v) for v in gt_boxes.values())
    if n_gt == 0:
        return 0.0
    used = {frame: [False] * len(boxes) for frame, boxes in gt_boxes.items()}

    tp = np.zeros(len(entries))
    fp = np.zeros(len(entries))
    for idx, (_, frame, box) in enumerate(entries):
        best_iou, best_j = 0.0, -1
        for j, gt_box in enumerate(gt_boxes[frame]):
            if used[frame][j]:
                continue
            iou = box_iou(box, gt_box)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_thresh:
            used[frame][best_j] = True
            tp[idx] = 1.0
        else:
            fp[idx] = 1.0

    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)

    # all-point interpolation: integrate the precision envelope over recall
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def match_detections(
    predictions: list[list[Detection]],
    ground_truths: list[list[Annotation]],
    iou_thresh: float = 0.5,
) -> tuple[list[MatchedPair], int]:
    """Class-agnostic greedy matching; returns (pairs, unmatched gt count)."""
    if len(predictions) != len(ground_truths):
        raise ValueError(f"{len(predictions)} prediction frames vs {len(ground_truths)} gt frames")
    pairs = []
    unmatched = 0
    for frame, (dets, gts) in enumerate(zip(predictions, ground_truths)):
        free = list(range(len(gts)))
        for det in sorted(dets, key=lambda d: -d.score):
            best_iou, best_j = 0.0, -1
            for j in free:
                iou = box_iou(det.bbox, gts[j].bbox)
                if iou > best_iou:
                    best_iou, best_j = iou, j
            if best_j >= 0 and best_iou >= iou_thresh:
                free.remove(best_j)
                pairs.append(MatchedPair(frame, det, gts[best_j]))
        unmatched += len(free)
    return pairs, unmatched


def compute_distance_metrics(
    predictions: list[list[Detection]],
    ground_truths: list[list[Annotation]],
    corrupted_frames: list[bool] | None = None,
    certainty_thresh: float = 0.9,
    iou_thresh: float = 0.5,
) -> tuple[dict[str, float], dict[str, int], int]:
    """Bucketed |pred - gt| means in micrometers over matched pairs.

    Returns (metrics, bucket counts, unmatched gt count); a bucket with no
    samples is left out of the metrics dict entirely.
    """
    pairs, unmatched = match_detections(predictions, ground_truths, iou_thresh)

    def bucket(name: str, selected: list[MatchedPair], metrics: dict, counts: dict) -> None:
        counts[name] = len(selected)
        if selected:
            errors = [abs(p.detection.distance_mm - p.annotation.distance_mm) * 1000.0 for p in selected]
            metrics[name] = float(np.mean(errors))

    metrics: dict[str, float] = {}
    counts: dict[str, int] = {}
    bucket("dmae_um", pairs, metrics, counts)
    bucket("dmae_0_1_um", [p for p in pairs if 0.0 <= p.annotation.distance_mm < 1.0], metrics, counts)
    bucket("certain_dmae_um", [p for p in pairs if p.detection.certainty > certainty_thresh], metrics, counts)
    if corrupted_frames is not None:
        masked = [p for p in pairs if corrupted_frames[p.frame]]
        bucket("masked_dmae_um", masked, metrics, counts)
        bucket(
            "masked_dmae_0_1_um",
            [p for p in masked if 0.0 <= p.annotation.distance_mm < 1.0],
            metrics,
            counts,
        )
    return metrics, counts, unmatched


def compute_kp_dist(
    predictions: list[list[Detection]],
    ground_truths: list[list[Annotation]],
    iou_thresh: float = 0.5,
) -> float | None:
    """Mean pixel distance over visible gt keypoints of matched pairs."""
    pairs, _ = match_detections(predictions, ground_truths, iou_thresh)
    dists = []
    for pair in pairs:
        for pred_kp, gt_kp in zip(pair.detection.keypoints, pair.annotation.keypoints):
            if gt_kp[2]:
                dists.append(float(np.hypot(pred_kp[0] - gt_kp[0], pred_kp[1] - gt_kp[1])))
    return float(np.mean(dists)) if dists else None
