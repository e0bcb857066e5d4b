"""Command-line entry point wiring generation, training, and evaluation.

Exit codes: 0 success, 1 runtime or IO failure, 2 usage or configuration
error. The SURGIFUSE_OUT environment variable sets the default output root.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import click

from .config import ConfigurationError, build_config, load_yaml
from .datamodel import SPLITS, DatasetError, ValidationError, load_dataset, save_sequence
from .model import VARIANTS, ModelConfig
from .pipeline import (
    TrainConfig,
    bench_latency,
    corruption_study,
    evaluate,
    load_checkpoint,
    save_metrics_report,
    save_predictions,
    train,
)
from .synthgen import GeneratorConfig, generate_sequence

ENV_OUT_ROOT = "SURGIFUSE_OUT"


@dataclass(frozen=True)
class RunConfig:
    """Everything one experiment needs, loadable from a single YAML file.

    Sections map to the component configs; unknown keys anywhere are
    rejected with the offending field path.
    """

    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train_sequences: int = 12
    val_sequences: int = 2
    test_sequences: int = 2

    def validate(self) -> None:
        for name in ("train_sequences", "val_sequences", "test_sequences"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.train_sequences + self.val_sequences + self.test_sequences < 1:
            raise ConfigurationError("at least one sequence must be requested")
        self.generator.validate()
        self.train.validate()
        self.model.validate()


def load_run_config(path: Path | str | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        cfg = build_config(RunConfig, load_yaml(path))
    cfg.validate()
    return cfg


def _out_root() -> Path:
    return Path(os.environ.get(ENV_OUT_ROOT, "."))


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigurationError, ValidationError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except (DatasetError, FloatingPointError, OSError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


@click.group()
def main() -> None:
    """Multimodal surgical scene understanding experiments."""


_config_option = click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="YAML run config; omitted sections use defaults.",
)


@main.command("gen-data")
@_config_option
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Dataset root.")
@click.option("--seed", type=int, default=None, help="Base sequence seed, overrides config.")
@_guarded
def gen_data(config_path: Path | None, out: Path | None, seed: int | None) -> None:
    """Generate the synthetic train/val/test sequences and the manifest."""
    cfg = load_run_config(config_path)
    out = out if out is not None else _out_root() / "dataset"
    base = seed if seed is not None else cfg.generator.seed
    counts = {"train": cfg.train_sequences, "val": cfg.val_sequences, "test": cfg.test_sequences}

    offset = 0
    for split in SPLITS:
        for _ in range(counts[split]):
            gen_cfg = dataclasses.replace(cfg.generator, seed=base + offset)
            seq = generate_sequence(gen_cfg, base + offset)
            save_sequence(seq, out, split=split, distance_range_mm=gen_cfg.distance_range_mm)
            offset += 1

    manifest = load_dataset(out)
    click.echo(f"dataset root: {out}")
    for split in SPLITS:
        ids = manifest.split_ids(split)
        frames = sum(manifest.sequences[i].frame_count for i in ids)
        click.echo(f"  {split}: {len(ids)} sequences, {frames} frames")


@main.command("train")
@_config_option
@click.option("--data", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--variant", type=click.Choice(VARIANTS), default=None, help="Overrides config.")
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Run directory.")
@_guarded
def train_cmd(config_path: Path | None, data: Path, variant: str | None, out: Path | None) -> None:
    """Train one variant; writes checkpoint.pt and train_log.jsonl."""
    cfg = load_run_config(config_path)
    train_cfg = dataclasses.replace(cfg.train, variant=variant) if variant else cfg.train
    manifest = load_dataset(data)
    out = out if out is not None else _out_root() / "runs" / train_cfg.variant
    ckpt = train(train_cfg, manifest, out, cfg.model)
    click.echo(f"checkpoint: {ckpt}")
    click.echo(f"loss log: {Path(out) / 'train_log.jsonl'}")


def _metric_line(name: str, value: float | None, unit: str = "") -> str:
    return f"  {name}: " + ("absent" if value is None else f"{value:.2f}{unit}")


@main.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--data", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--split", type=click.Choice(SPLITS), default="test")
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Report JSON path.")
@click.option("--predictions", type=click.Path(path_type=Path), default=None, help="Optional per-frame detection JSONL.")
@_guarded
def eval_cmd(checkpoint: Path, data: Path, split: str, out: Path | None, predictions: Path | None) -> None:
    """Evaluate a checkpoint on one split; prints and saves the metric report."""
    model, _ = load_checkpoint(checkpoint)
    manifest = load_dataset(data)
    report, preds = evaluate(model, manifest, split)

    out = out if out is not None else checkpoint.parent / f"metrics_{split}.json"
    save_metrics_report(report, out)
    if predictions is not None:
        save_predictions(preds, predictions)

    click.echo(f"{model.variant} on {split}:")
    click.echo(_metric_line("map50", report.map50, "%"))
    click.echo(_metric_line("kp_dist_px", report.kp_dist_px, " px"))
    click.echo(_metric_line("dmae_um", report.dmae_um))
    click.echo(_metric_line("dmae_0_1_um", report.dmae_0_1_um))
    click.echo(_metric_line("certain_dmae_um", report.certain_dmae_um))
    lat = report.latency_ms
    click.echo(f"  latency_ms: mean {lat['mean']:.2f}, median {lat['median']:.2f}, p95 {lat['p95']:.2f}")
    click.echo(f"report: {out}")


@main.command("corruption-study")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--data", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--levels", default="0,4,8", help="Comma-separated corruption counts per 16-frame window.")
@click.option("--seeds", type=int, default=5)
@click.option("--split", type=click.Choice(SPLITS), default="test")
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Table file; a .json sibling is written too.")
@_guarded
def corruption_cmd(checkpoint: Path, data: Path, levels: str, seeds: int, split: str, out: Path | None) -> None:
    """Corruption-robustness table: distance metrics vs corrupted frame count."""
    try:
        parsed = tuple(int(part) for part in levels.split(","))
    except ValueError:
        raise ConfigurationError(f"--levels must be comma-separated integers, got {levels!r}") from None
    model, _ = load_checkpoint(checkpoint)
    manifest = load_dataset(data)
    report = corruption_study(model, manifest, parsed, seeds, split)

    out = out if out is not None else checkpoint.parent / "corruption_study.txt"
    Path(out).write_text(report.to_text() + "\n")
    Path(out).with_suffix(".json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    click.echo(report.to_text())
    click.echo(f"table: {out}")


@main.command("bench")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--frames", type=int, required=True)
@click.option("--warmup", type=int, default=10)
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Report JSON path.")
@_guarded
def bench_cmd(checkpoint: Path, frames: int, warmup: int, out: Path | None) -> None:
    """Per-frame forward+decode latency over synthesized frames."""
    model, _ = load_checkpoint(checkpoint)
    report = bench_latency(model, frames, warmup)
    text = json.dumps(report, indent=2, sort_keys=True)
    if out is not None:
        Path(out).write_text(text + "\n")
    click.echo(text)


if __name__ == "__main__":
    main()
