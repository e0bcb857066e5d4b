"""Independent oracles and small builders shared across the test modules.

Everything here is written straight from the definitions (IoU, all-point
interpolated AP, greedy suppression, central finite differences) so the
production code is checked against a second route, not against itself.
"""

from __future__ import annotations

import numpy as np
import torch

from surgifuse.datamodel import Annotation, MultimodalFrame, ScanGeometry


def iou_xyxy(a, b) -> float:
    left, top = max(a[0], b[0]), max(a[1], b[1])
    right, bottom = min(a[2], b[2]), min(a[3], b[3])
    inter = (right - left) * (bottom - top) if right > left and bottom > top else 0.0
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def brute_force_ap(detections, ground_truths, iou_thresh: float = 0.5) -> float:
    """All-point interpolated AP in [0, 1] from its definition.

    ``detections`` are (score, frame, box) tuples, ``ground_truths`` are
    (frame, box). Detections are matched in descending score order (ties by
    input order) to the unmatched ground truth of highest IoU >= threshold.
    AP = sum over recall increments of (delta recall) * (best precision at
    any rank from that point on).
    """
    n_gt = len(ground_truths)
    if n_gt == 0:
        raise ValueError("oracle needs at least one ground truth")
    order = sorted(range(len(detections)), key=lambda i: -detections[i][0])
    taken = [False] * n_gt
    hits = []
    for i in order:
        _, frame, box = detections[i]
        best, best_j = -1.0, None
        for j, (g_frame, g_box) in enumerate(ground_truths):
            if g_frame != frame or taken[j]:
                continue
            value = iou_xyxy(box, g_box)
            if value > best:
                best, best_j = value, j
        if best_j is not None and best >= iou_thresh:
            taken[best_j] = True
            hits.append(True)
        else:
            hits.append(False)

    precisions, recalls = [], []
    tp = 0
    for rank, hit in enumerate(hits, start=1):
        tp += hit
        precisions.append(tp / rank)
        recalls.append(tp / n_gt)

    ap, prev = 0.0, 0.0
    for k, hit in enumerate(hits):
        if hit:
            ap += (recalls[k] - prev) * max(precisions[k:])
            prev = recalls[k]
    return ap


def exhaustive_nms(boxes, scores, classes, iou_thresh: float) -> list[int]:
    """Greedy class-wise suppression by repeated argmax, no sorting involved."""
    alive = list(range(len(boxes)))
    kept = []
    while alive:
        best = alive[0]
        for i in alive[1:]:
            if scores[i] > scores[best]:
                best = i
        kept.append(best)
        alive = [
            i
            for i in alive
            if i != best
            and not (classes[i] == classes[best] and iou_xyxy(boxes[i], boxes[best]) > iou_thresh)
        ]
    return kept


def max_rel_grad_error(fn, wrt: list[torch.Tensor], eps: float = 1e-5) -> float:
    """Worst relative disagreement between autograd and central differences.

    ``fn`` recomputes the scalar from current tensor contents; ``wrt`` are
    float64 leaf tensors perturbed elementwise in place. Elements where both
    gradients are below 1e-5 are ignored: central differences of an O(1)
    scalar resolve gradients only down to roughly |f| * 1e-16 / eps, so
    smaller entries measure roundoff, not disagreement.
    """
    out = fn()
    analytic = torch.autograd.grad(out, wrt)
    worst = 0.0
    with torch.no_grad():
        for tensor, grad in zip(wrt, analytic):
            flat = tensor.data.reshape(-1)
            grad_flat = grad.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = float(fn())
                flat[i] = orig - eps
                f_minus = float(fn())
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                exact = float(grad_flat[i])
                scale = max(abs(numeric), abs(exact))
                if scale < 1e-5:
                    continue
                worst = max(worst, abs(numeric - exact) / scale)
    return worst


def randomize_parameters(module: torch.nn.Module, seed: int = 0, scale: float = 0.2) -> None:
    """Move a module to a generic parameter point before a finite-difference check.

    Fresh initializations put normalization biases at exactly zero, which can
    park pre-activations on a ReLU kink where subgradients and central
    differences legitimately differ. Also spreads the normalization running
    statistics so eval-mode affine paths are generic.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
        for name, buf in module.named_buffers():
            if name.endswith("running_mean"):
                buf.copy_(torch.randn(buf.shape, generator=gen, dtype=buf.dtype) * scale)
            elif name.endswith("running_var"):
                buf.copy_(1.0 + 0.3 * torch.rand(buf.shape, generator=gen, dtype=buf.dtype))


def perpendicular_geometry(cx: float, cy: float, half: float, axial=(0.0, 9.0)) -> ScanGeometry:
    return ScanGeometry(
        line_a_start=(cx - half, cy),
        line_a_end=(cx + half, cy),
        line_b_start=(cx, cy - half),
        line_b_end=(cx, cy + half),
        axial_range_mm=axial,
    )


def make_frame(
    index: int = 0,
    size: int = 64,
    bscan: tuple[int, int] = (32, 32),
    annotation: Annotation | None = None,
    fill: float = 0.5,
) -> MultimodalFrame:
    # persisted frames carry 8-bit-grid values, so the builder snaps too
    from surgifuse.datamodel import quantize_unit

    return MultimodalFrame(
        frame_index=index,
        opmi=quantize_unit(np.full((size, size, 3), fill, dtype=np.float32)),
        bscan_a=quantize_unit(np.full(bscan, fill, dtype=np.float32)),
        bscan_b=quantize_unit(np.full(bscan, fill, dtype=np.float32)),
        scan_geometry=perpendicular_geometry(size / 2, size / 2, size / 4),
        annotation=annotation,
    )


def make_annotation(
    cls: int = 0,
    bbox=(10.0, 12.0, 30.0, 40.0),
    keypoints=((12.0, 14.0, True), (20.0, 30.0, True)),
    distance_mm: float = 1.0,
) -> Annotation:
    return Annotation(instrument_class=cls, bbox=bbox, keypoints=keypoints, distance_mm=distance_mm)
