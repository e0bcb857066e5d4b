"""Training, evaluation, corruption-robustness study, and latency benchmark.

Checkpoints are a single torch archive: parameter tensors keyed by module
path plus model/train configs, a digest of both, the seed, and a schema
version. The training loss log is one JSON record per optimizer step.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import platform
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ConfigurationError, build_config
from .datamodel import Annotation, DatasetManifest
from .encoders import corrupt_columns
from .heads import (
    Detection,
    HeadConfig,
    LevelTargets,
    RawHeadOutputs,
    assign_targets,
    decode_detections,
)
from .losses import LossWeights, dfl, focal_loss, giou_loss, keypoint_losses, total_loss
from .metrics import MetricsReport, compute_distance_metrics, compute_kp_dist, compute_map50
from .model import VARIANTS, ModelConfig, SurgiFuseModel, frame_positions, frame_to_tensors
from .temporal import cosine_contrastive_loss

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "mm"
    epochs: int = 30
    batch_size: int = 8
    windows_per_batch: int = 2
    learning_rate: float = 1.2726e-4
    weight_decay: float = 1e-4
    sequence_length: int = 16
    window_stride: int = 16
    corrupt_consecutive: int = 4
    corrupt_random: int = 4
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    seed: int = 0
    threads: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.windows_per_batch < 1:
            raise ConfigurationError("epochs, batch_size, windows_per_batch must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.sequence_length < 1 or self.window_stride < 1:
            raise ConfigurationError("sequence_length and window_stride must be >= 1")
        if self.corrupt_consecutive < 0 or self.corrupt_random < 0:
            raise ConfigurationError("corruption counts must be >= 0")
        if self.corrupt_consecutive + self.corrupt_random > self.sequence_length:
            raise ConfigurationError(
                f"corruption counts {self.corrupt_consecutive}+{self.corrupt_random} "
                f"exceed sequence_length {self.sequence_length}"
            )


def corruption_flags(length: int, consecutive: int, random_count: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask: one consecutive block plus extra random frames."""
    if consecutive + random_count > length:
        raise ConfigurationError(f"cannot corrupt {consecutive}+{random_count} of {length} frames")
    flags = np.zeros(length, dtype=bool)
    if consecutive > 0:
        start = int(rng.integers(0, length - consecutive + 1))
        flags[start : start + consecutive] = True
    if random_count > 0:
        remaining = np.nonzero(~flags)[0]
        picked = rng.choice(len(remaining), size=random_count, replace=False)
        flags[remaining[picked]] = True
    return flags


@dataclass
class _Frame:
    opmi: torch.Tensor       # (3, H, W)
    bscan_a: torch.Tensor    # (1, H, W)
    bscan_b: torch.Tensor
    positions: torch.Tensor  # (2M, 2)
    targets: list[LevelTargets]
    annotations: list[Annotation]


@dataclass
class _Split:
    frames: list[_Frame]
    sequences: list[list[int]]  # frame indices per sequence, in order
    image_size: int


def _load_split(data: DatasetManifest, split: str, model_cfg: ModelConfig) -> _Split:
    ids = data.split_ids(split)
    if not ids:
        raise ConfigurationError(f"dataset at {data.root} has no sequences in split {split!r}")
    frames: list[_Frame] = []
    sequences: list[list[int]] = []
    image_size = None
    strides = tuple(model_cfg.encoder.strides)
    for seq_id in ids:
        seq = data.load_sequence(seq_id)
        indices = []
        for frame in seq.frames:
            opmi, ba, bb = frame_to_tensors(frame)
            image_size = frame.image_size
            anns = [frame.annotation] if frame.annotation is not None else []
            frames.append(
                _Frame(
                    opmi=opmi[0],
                    bscan_a=ba[0],
                    bscan_b=bb[0],
                    positions=frame_positions(frame.scan_geometry, model_cfg.ioct.tokens_per_scan, frame.image_size),
                    targets=assign_targets(anns, frame.image_size, strides, model_cfg.heads),
                    annotations=anns,
                )
            )
            indices.append(len(frames) - 1)
        sequences.append(indices)
    return _Split(frames=frames, sequences=sequences, image_size=image_size)


def _stack_targets(per_frame: list[list[LevelTargets]]) -> list[LevelTargets]:
    stacked = []
    for lvl in range(len(per_frame[0])):
        parts = [f[lvl] for f in per_frame]
        stacked.append(
            LevelTargets(
                stride=parts[0].stride,
                pos_mask=torch.stack([p.pos_mask for p in parts]),
                cls_target=torch.stack([p.cls_target for p in parts]),
                box_target=torch.stack([p.box_target for p in parts]),
                kp_target=torch.stack([p.kp_target for p in parts]),
                vis_target=torch.stack([p.vis_target for p in parts]),
                dist_target=torch.stack([p.dist_target for p in parts]),
            )
        )
    return stacked


def detection_losses(
    raw: RawHeadOutputs,
    targets: list[LevelTargets],
    head_cfg: HeadConfig,
    gamma: float,
    alpha: float,
) -> dict[str, torch.Tensor]:
    """Per-component detection losses for one batched forward pass."""
    zero = raw.levels[0].cls_logits.sum() * 0.0
    n_cls = head_cfg.num_classes
    k = head_cfg.num_keypoints

    cls_logits, cls_targets = [], []
    num_pos = 0
    box_logit_rows, box_bin_targets = [], []
    pred_boxes, gt_boxes = [], []
    kp_preds, kp_tgts, vis_logits, vis_tgts = [], [], [], []
    dist_rows, dist_tgts = [], []

    for lvl_out, tgt in zip(raw.levels, targets):
        mask = tgt.pos_mask
        num_pos += int(mask.sum())
        cls_logits.append(lvl_out.cls_logits.permute(0, 2, 3, 1).reshape(-1, n_cls))
        cls_targets.append(tgt.cls_target.permute(0, 2, 3, 1).reshape(-1, n_cls))
        if not bool(mask.any()):
            continue
        stride = tgt.stride
        _, ii, jj = mask.nonzero(as_tuple=True)
        x_c = (jj.to(torch.float32) + 0.5) * stride
        y_c = (ii.to(torch.float32) + 0.5) * stride

        rows = lvl_out.box_logits.permute(0, 2, 3, 1)[mask].reshape(-1, 4, head_cfg.reg_max_box + 1)
        edges_t = tgt.box_target.permute(0, 2, 3, 1)[mask]
        box_logit_rows.append(rows)
        box_bin_targets.append(edges_t)

        probs = torch.softmax(rows, dim=-1)
        bins = torch.arange(head_cfg.reg_max_box + 1, dtype=probs.dtype)
        edges_p = (probs * bins).sum(-1)
        pred_boxes.append(
            torch.stack(
                [x_c - edges_p[:, 0] * stride, y_c - edges_p[:, 1] * stride,
                 x_c + edges_p[:, 2] * stride, y_c + edges_p[:, 3] * stride], dim=-1
            )
        )
        gt_boxes.append(
            torch.stack(
                [x_c - edges_t[:, 0] * stride, y_c - edges_t[:, 1] * stride,
                 x_c + edges_t[:, 2] * stride, y_c + edges_t[:, 3] * stride], dim=-1
            )
        )

        kp_preds.append(lvl_out.kp_offsets.reshape(-1, k, 2, *mask.shape[-2:]).permute(0, 3, 4, 1, 2)[mask])
        kp_tgts.append(tgt.kp_target.permute(0, 3, 4, 1, 2)[mask])
        vis_logits.append(lvl_out.kp_vis_logits.permute(0, 2, 3, 1)[mask])
        vis_tgts.append(tgt.vis_target.permute(0, 2, 3, 1)[mask])
        dist_rows.append(lvl_out.dist_logits.permute(0, 2, 3, 1)[mask])
        dist_tgts.append(tgt.dist_target[mask])

    components = {
        "cls": focal_loss(torch.cat(cls_logits), torch.cat(cls_targets), gamma, alpha, num_pos=num_pos)
    }
    if box_logit_rows:
        components["box_dfl"] = dfl(torch.cat(box_logit_rows), torch.cat(box_bin_targets))
        components["giou"] = giou_loss(torch.cat(pred_boxes), torch.cat(gt_boxes))
        kp_loss, vis_loss = keypoint_losses(
            torch.cat(kp_preds), torch.cat(vis_logits), torch.cat(kp_tgts), torch.cat(vis_tgts)
        )
        components["kp"] = kp_loss
        components["vis"] = vis_loss
        components["dist_dfl"] = dfl(torch.cat(dist_rows), torch.cat(dist_tgts))
    else:
        components.update(box_dfl=zero, giou=zero, kp=zero, vis=zero, dist_dfl=zero)
    return components


def train(
    cfg: TrainConfig,
    data: DatasetManifest,
    out_dir: Path | str,
    model_cfg: ModelConfig | None = None,
) -> Path:
    """Train a variant and write checkpoint.pt plus train_log.jsonl under out_dir."""
    cfg.validate()
    if cfg.threads > 0:
        torch.set_num_threads(cfg.threads)
    torch.manual_seed(cfg.seed)

    model_cfg = dataclasses.replace(model_cfg or ModelConfig(), variant=cfg.variant)
    model_cfg.validate()
    model = SurgiFuseModel(model_cfg)
    model.train()

    split = _load_split(data, "train", model_cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    if cfg.variant == "rmm":
        windows = _make_windows(split, cfg.sequence_length, cfg.window_stride)
        if not windows:
            raise ConfigurationError(
                f"no training windows: sequences shorter than sequence_length {cfg.sequence_length}"
            )
        steps_per_epoch = max(1, (len(windows) + cfg.windows_per_batch - 1) // cfg.windows_per_batch)
    else:
        steps_per_epoch = max(1, (len(split.frames) + cfg.batch_size - 1) // cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=total_steps)

    shuffle_gen = torch.Generator().manual_seed(cfg.seed)
    noise_gen = torch.Generator().manual_seed(cfg.seed + 1)
    schedule_rng = np.random.default_rng(cfg.seed + 2)

    step = 0
    log_path = out_dir / "train_log.jsonl"
    with log_path.open("w") as log:
        for epoch in range(cfg.epochs):
            if cfg.variant == "rmm":
                order = torch.randperm(len(windows), generator=shuffle_gen).tolist()
                batches = [
                    [windows[i] for i in order[o : o + cfg.windows_per_batch]]
                    for o in range(0, len(order), cfg.windows_per_batch)
                ]
            else:
                order = torch.randperm(len(split.frames), generator=shuffle_gen).tolist()
                batches = [order[o : o + cfg.batch_size] for o in range(0, len(order), cfg.batch_size)]

            for batch in batches:
                lr_now = optimizer.param_groups[0]["lr"]
                optimizer.zero_grad()
                if cfg.variant == "rmm":
                    components = _rmm_window_loss(model, split, batch, cfg, noise_gen, schedule_rng)
                else:
                    components = _frame_batch_loss(model, split, batch, cfg)
                try:
                    loss, breakdown = total_loss(components, cfg.loss_weights)
                except FloatingPointError as exc:
                    raise FloatingPointError(f"at step {step}: {exc}") from exc
                if not bool(torch.isfinite(loss)):
                    raise FloatingPointError(f"non-finite total loss at step {step}")
                loss.backward()
                optimizer.step()
                scheduler.step()
                record = {"step": step, "epoch": epoch, "lr": lr_now, **breakdown}
                log.write(json.dumps(record, sort_keys=True) + "\n")
                step += 1
            logger.info("epoch %d/%d done (%d steps)", epoch + 1, cfg.epochs, step)

    ckpt_path = out_dir / "checkpoint.pt"
    save_checkpoint(model, ckpt_path, train_cfg=cfg, seed=cfg.seed)
    return ckpt_path


def _frame_batch_loss(model: SurgiFuseModel, split: _Split, batch: list[int], cfg: TrainConfig):
    frames = [split.frames[i] for i in batch]
    opmi = torch.stack([f.opmi for f in frames])
    if cfg.variant == "sm":
        raw, _, _ = model(opmi)
    else:
        raw, _, _ = model(
            opmi,
            torch.stack([f.bscan_a for f in frames]),
            torch.stack([f.bscan_b for f in frames]),
            torch.stack([f.positions for f in frames]),
        )
    targets = _stack_targets([f.targets for f in frames])
    components = detection_losses(raw, targets, model.cfg.heads, cfg.focal_gamma, cfg.focal_alpha)
    components["cos"] = components["cls"] * 0.0
    return components


def _make_windows(split: _Split, length: int, stride: int) -> list[list[int]]:
    windows = []
    for seq in split.sequences:
        for start in range(0, len(seq) - length + 1, stride):
            windows.append(seq[start : start + length])
    return windows


def _rmm_window_loss(
    model: SurgiFuseModel,
    split: _Split,
    batch_windows: list[list[int]],
    cfg: TrainConfig,
    noise_gen: torch.Generator,
    schedule_rng: np.random.Generator,
):
    n_win = len(batch_windows)
    length = cfg.sequence_length
    flags = np.stack(
        [corruption_flags(length, cfg.corrupt_consecutive, cfg.corrupt_random, schedule_rng) for _ in batch_windows]
    )  # (n_win, length)

    state = model.init_state(n_win)
    sums: dict[str, torch.Tensor] = {}
    cos_terms = []
    for t in range(length):
        frames = [split.frames[w[t]] for w in batch_windows]
        opmi = torch.stack([f.opmi for f in frames])
        pyramid = model.encoder(opmi)
        cset = model.embed_tokens(
            torch.stack([f.bscan_a for f in frames]),
            torch.stack([f.bscan_b for f in frames]),
            torch.stack([f.positions for f in frames]),
        )
        flag_t = torch.from_numpy(flags[:, t])
        if bool(flag_t.any()):
            noise_cset = corrupt_columns(cset, noise_gen)
            tokens = torch.where(flag_t.view(-1, 1, 1), noise_cset.tokens, cset.tokens)
            corrupted_cset = dataclasses.replace(cset, tokens=tokens, corrupted=flag_t)
        else:
            corrupted_cset = cset

        fused_c = model.fusion(pyramid, corrupted_cset)
        refined_c, next_state = model.temporal.refine(fused_c, state)
        if bool(flag_t.any()):
            # counterfactual intact step from the same incoming state
            fused_n = model.fusion(pyramid, cset)
            refined_n, _ = model.temporal.refine(fused_n, state)
            for w in flag_t.nonzero(as_tuple=True)[0].tolist():
                cos_terms.append(
                    cosine_contrastive_loss(refined_c.levels[0][w], refined_n.levels[0][w])
                )
        state = next_state

        raw = model.heads(refined_c)
        targets = _stack_targets([f.targets for f in frames])
        comps = detection_losses(raw, targets, model.cfg.heads, cfg.focal_gamma, cfg.focal_alpha)
        for name, value in comps.items():
            sums[name] = value if name not in sums else sums[name] + value

    components = {name: value / length for name, value in sums.items()}
    components["cos"] = (
        torch.stack(cos_terms).mean() if cos_terms else components["cls"] * 0.0
    )
    return components


def save_checkpoint(model: SurgiFuseModel, path: Path | str, train_cfg: TrainConfig | None, seed: int) -> None:
    model_dict = dataclasses.asdict(model.cfg)
    train_dict = dataclasses.asdict(train_cfg) if train_cfg is not None else None
    digest = hashlib.sha256(
        json.dumps({"model": model_dict, "train": train_dict}, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()
    torch.save(
        {
            "schema_version": CHECKPOINT_SCHEMA_VERSION,
            "variant": model.variant,
            "model_config": model_dict,
            "train_config": train_dict,
            "config_digest": digest,
            "seed": seed,
            "state_dict": model.state_dict(),
        },
        str(path),
    )


def load_checkpoint(path: Path | str) -> tuple[SurgiFuseModel, dict]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint {path} does not exist")
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    version = payload.get("schema_version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise ConfigurationError(f"checkpoint schema {version!r} unsupported, expected {CHECKPOINT_SCHEMA_VERSION}")
    model_cfg = build_config(ModelConfig, payload["model_config"])
    model = SurgiFuseModel(model_cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


def evaluate(
    model: SurgiFuseModel,
    data: DatasetManifest,
    split: str = "test",
    score_thresh: float = 0.3,
    nms_iou: float = 0.5,
    corrupt_frames: int = 0,
    window_len: int = 16,
    seed: int = 0,
) -> tuple[MetricsReport, list[list[Detection]]]:
    """Run the model over a split and compute all metrics.

    ``corrupt_frames`` > 0 replaces that many consecutive frames' tokens per
    window_len-frame block (block position random per block) and populates
    the masked metric buckets.
    """
    ids = data.split_ids(split)
    if not ids:
        raise ConfigurationError(f"split {split!r} is empty")
    if corrupt_frames > 0 and model.variant == "sm":
        raise ConfigurationError("corruption evaluation needs a variant that consumes iOCT tokens")

    flag_rng = np.random.default_rng(seed)
    noise_gen = torch.Generator().manual_seed(seed)
    model.eval()

    predictions: list[list[Detection]] = []
    ground_truths: list[list[Annotation]] = []
    corrupted_flags: list[bool] = []
    latencies: list[float] = []

    with torch.no_grad():
        for seq_id in ids:
            seq = data.load_sequence(seq_id)
            flags = np.zeros(len(seq.frames), dtype=bool)
            if corrupt_frames > 0:
                for start in range(0, len(seq.frames), window_len):
                    block = min(window_len, len(seq.frames) - start)
                    n = min(corrupt_frames, block)
                    offset = int(flag_rng.integers(0, block - n + 1))
                    flags[start + offset : start + offset + n] = True

            state = model.init_state(1) if model.variant == "rmm" else None
            for idx, frame in enumerate(seq.frames):
                opmi, ba, bb = frame_to_tensors(frame)
                t0 = time.perf_counter()
                if model.variant == "sm":
                    raw, state, _ = model(opmi, state=state)
                else:
                    positions = frame_positions(
                        frame.scan_geometry, model.cfg.ioct.tokens_per_scan, frame.image_size
                    )
                    cset = model.embed_tokens(ba, bb, positions)
                    if flags[idx]:
                        cset = corrupt_columns(cset, noise_gen)
                    raw, state, _ = model(opmi, state=state, cset=cset)
                dets = decode_detections(raw, score_thresh, nms_iou, model.cfg.heads)[0]
                latencies.append((time.perf_counter() - t0) * 1000.0)
                predictions.append(dets)
                ground_truths.append([frame.annotation] if frame.annotation is not None else [])
                corrupted_flags.append(bool(flags[idx]))

    dist_metrics, bucket_counts, unmatched = compute_distance_metrics(
        predictions, ground_truths, corrupted_flags if corrupt_frames > 0 else None
    )
    counts = dict(bucket_counts)
    counts["frames"] = len(predictions)
    counts["detections"] = sum(len(d) for d in predictions)

    report = MetricsReport(
        map50=compute_map50(predictions, ground_truths),
        kp_dist_px=compute_kp_dist(predictions, ground_truths),
        dmae_um=dist_metrics.get("dmae_um"),
        dmae_0_1_um=dist_metrics.get("dmae_0_1_um"),
        certain_dmae_um=dist_metrics.get("certain_dmae_um"),
        masked_dmae_um=dist_metrics.get("masked_dmae_um"),
        masked_dmae_0_1_um=dist_metrics.get("masked_dmae_0_1_um"),
        counts=counts,
        unmatched_gt=unmatched,
        latency_ms={
            "mean": float(np.mean(latencies)),
            "median": float(np.median(latencies)),
            "p95": float(np.percentile(latencies, 95)),
        },
    )
    return report, predictions


_STUDY_METRICS = ("dmae_um", "masked_dmae_um", "dmae_0_1_um", "masked_dmae_0_1_um", "map50")


@dataclass
class CorruptionReport:
    levels: tuple[int, ...]
    seeds: int
    rows: list[dict]

    def to_dict(self) -> dict:
        return {"levels": list(self.levels), "seeds": self.seeds, "rows": self.rows}

    def to_text(self) -> str:
        header = f"{'n':>3} " + " ".join(f"{m:>24}" for m in _STUDY_METRICS)
        lines = [header, "-" * len(header)]
        for row in self.rows:
            cells = []
            for metric in _STUDY_METRICS:
                agg = row[metric]
                cells.append(f"{agg['mean']:.2f} +/- {agg['std']:.2f}".rjust(24) if agg else " " * 24)
            lines.append(f"{row['n']:>3} " + " ".join(cells))
        return "\n".join(lines)


def corruption_study(
    model: SurgiFuseModel,
    data: DatasetManifest,
    levels: tuple[int, ...] = (0, 4, 8),
    n_seeds: int = 5,
    split: str = "test",
    window_len: int = 16,
    score_thresh: float = 0.3,
    nms_iou: float = 0.5,
) -> CorruptionReport:
    """Per corruption level: mean and std of the distance metrics across seeds."""
    if model.variant != "rmm":
        raise ConfigurationError(f"corruption study needs an rmm checkpoint, got variant {model.variant!r}")
    if n_seeds < 1:
        raise ConfigurationError("need at least one seed")

    rows = []
    for n in levels:
        per_seed: dict[str, list[float]] = {m: [] for m in _STUDY_METRICS}
        for seed in range(n_seeds):
            report, _ = evaluate(
                model, data, split,
                score_thresh=score_thresh, nms_iou=nms_iou,
                corrupt_frames=n, window_len=window_len, seed=seed,
            )
            values = report.to_dict()
            for metric in _STUDY_METRICS:
                if values.get(metric) is not None:
                    per_seed[metric].append(float(values[metric]))
        row: dict = {"n": n}
        for metric in _STUDY_METRICS:
            vals = per_seed[metric]
            if vals:
                std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
                row[metric] = {"mean": float(np.mean(vals)), "std": std, "seeds": len(vals)}
            else:
                row[metric] = None
        rows.append(row)
    return CorruptionReport(levels=tuple(levels), seeds=n_seeds, rows=rows)


def bench_latency(
    model: SurgiFuseModel,
    n_frames: int,
    warmup: int = 10,
    image_size: int = 128,
    seed: int = 0,
) -> dict:
    """Forward+decode latency over synthesized random frames, per-frame stats in ms."""
    if n_frames < 1:
        raise ConfigurationError(f"n_frames must be >= 1, got {n_frames}")
    coarsest = model.cfg.encoder.strides[-1]
    if image_size % coarsest:
        raise ConfigurationError(f"image_size {image_size} not divisible by stride {coarsest}")

    gen = torch.Generator().manual_seed(seed)
    m = model.cfg.ioct.tokens_per_scan
    width = 4 * m
    positions = torch.rand(2 * m, 2, generator=gen)
    model.eval()
    timings = []
    state = model.init_state(1) if model.variant == "rmm" else None
    with torch.no_grad():
        for i in range(warmup + n_frames):
            opmi = torch.rand(1, model.cfg.encoder.in_channels, image_size, image_size, generator=gen)
            ba = torch.rand(1, 1, 64, width, generator=gen)
            bb = torch.rand(1, 1, 64, width, generator=gen)
            t0 = time.perf_counter()
            if model.variant == "sm":
                raw, state, _ = model(opmi, state=state)
            else:
                raw, state, _ = model(opmi, ba, bb, positions, state=state)
            decode_detections(raw, cfg=model.cfg.heads)
            if i >= warmup:
                timings.append((time.perf_counter() - t0) * 1000.0)

    return {
        "frames": n_frames,
        "warmup": warmup,
        "mean_ms": float(np.mean(timings)),
        "median_ms": float(statistics.median(timings)),
        "p95_ms": float(np.percentile(timings, 95)),
        "hardware": {
            "platform": platform.platform(),
            "machine": platform.machine(),
            "torch": torch.__version__,
            "threads": torch.get_num_threads(),
        },
    }


def detection_to_record(det: Detection) -> dict:
    return {
        "class_id": det.class_id,
        "score": det.score,
        "bbox": list(det.bbox),
        "keypoints": [list(kp) for kp in det.keypoints],
        "distance_mm": det.distance_mm,
        "certainty": det.certainty,
        "level": det.level,
        "cell": list(det.cell),
    }


def save_predictions(predictions: list[list[Detection]], path: Path | str) -> None:
    """One JSON record per frame: {"frame": i, "detections": [...]}. """
    with Path(path).open("w") as fh:
        for i, dets in enumerate(predictions):
            fh.write(json.dumps({"frame": i, "detections": [detection_to_record(d) for d in dets]}, sort_keys=True))
            fh.write("\n")


def save_metrics_report(report: MetricsReport, path: Path | str) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
