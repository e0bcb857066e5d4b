"""Domain types, dataset directory layout, and validated serialization.

A dataset on disk looks like::

    <root>/meta.json
    <root>/sequences/<id>/frame_00000_opmi.png   (RGB, 8-bit)
    <root>/sequences/<id>/frame_00000_oct0.png   (grayscale, 8-bit)
    <root>/sequences/<id>/frame_00000_oct1.png
    <root>/sequences/<id>/annotations.jsonl      (one record per frame)

``meta.json`` carries ``schema_version``, global image sizes, the metric
distance range, and the per-sequence split assignment. Annotation records
round-trip floats exactly (JSON shortest-repr); images are stored lossless,
so pixel data quantized to the 8-bit grid round-trips bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

SCHEMA_VERSION = 1
NUM_INSTRUMENT_CLASSES = 4
SPLITS = ("train", "val", "test")

_PERP_TOL = 1e-6
_MIDPOINT_TOL = 1e-6


class ValidationError(ValueError):
    """A domain invariant was violated."""


class DatasetError(RuntimeError):
    """Dataset files are missing, unreadable, or malformed."""


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Quantize a [0, 1] float image onto the 8-bit grid."""
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(values: np.ndarray) -> np.ndarray:
    return values.astype(np.float32) / np.float32(255.0)


def quantize_unit(values: np.ndarray) -> np.ndarray:
    """Snap a [0, 1] float image to representable 8-bit levels.

    Images pass through this before entering a frame so that a PNG
    save/load cycle reproduces the array bit-exactly.
    """
    return from_uint8(to_uint8(values))


@dataclass(frozen=True)
class ScanGeometry:
    """Placement of the two cross-sectional scan lines in top-view pixels.

    Both lines share their midpoint (the scan center) and are mutually
    perpendicular. ``axial_range_mm`` maps metric depth onto B-scan rows.
    """

    line_a_start: tuple[float, float]
    line_a_end: tuple[float, float]
    line_b_start: tuple[float, float]
    line_b_end: tuple[float, float]
    axial_range_mm: tuple[float, float]

    def validate(self) -> None:
        da = _unit_direction(self.line_a_start, self.line_a_end, "line_a")
        db = _unit_direction(self.line_b_start, self.line_b_end, "line_b")
        dot = abs(da[0] * db[0] + da[1] * db[1])
        if dot > _PERP_TOL:
            raise ValidationError(f"scan lines not perpendicular: |cos| = {dot:.3g}")
        ma = _midpoint(self.line_a_start, self.line_a_end)
        mb = _midpoint(self.line_b_start, self.line_b_end)
        if math.hypot(ma[0] - mb[0], ma[1] - mb[1]) > _MIDPOINT_TOL:
            raise ValidationError(f"scan line midpoints differ: {ma} vs {mb}")
        z_near, z_far = self.axial_range_mm
        if not z_far > z_near:
            raise ValidationError(f"axial_range_mm must satisfy z_far > z_near, got {self.axial_range_mm}")

    @property
    def center(self) -> tuple[float, float]:
        return _midpoint(self.line_a_start, self.line_a_end)


def _unit_direction(start, end, name: str) -> tuple[float, float]:
    dx, dy = end[0] - start[0], end[1] - start[1]
    norm = math.hypot(dx, dy)
    if norm == 0.0:
        raise ValidationError(f"{name} is degenerate (start == end)")
    return dx / norm, dy / norm


def _midpoint(start, end) -> tuple[float, float]:
    return (start[0] + end[0]) / 2.0, (start[1] + end[1]) / 2.0


@dataclass(frozen=True)
class Annotation:
    """Ground truth for one frame.

    ``keypoints`` holds (x, y, visible) triples in top-view pixels;
    index 0 is the instrument tooltip, index 1 the shaft midpoint.
    ``distance_mm`` is the signed tool-to-surface distance at the tooltip.
    """

    instrument_class: int
    bbox: tuple[float, float, float, float]
    keypoints: tuple[tuple[float, float, bool], ...]
    distance_mm: float

    def validate(self, width: int, height: int, distance_min_mm: float, distance_max_mm: float) -> None:
        if not 0 <= self.instrument_class < NUM_INSTRUMENT_CLASSES:
            raise ValidationError(f"instrument_class out of range: {self.instrument_class}")
        x_min, y_min, x_max, y_max = self.bbox
        if not (x_min < x_max and y_min < y_max):
            raise ValidationError(f"bbox must satisfy x_min < x_max and y_min < y_max, got {self.bbox}")
        for i, (x, y, visible) in enumerate(self.keypoints):
            if visible and not (0.0 <= x < width and 0.0 <= y < height):
                raise ValidationError(f"keypoints[{i}] marked visible but outside image: ({x}, {y})")
        if not distance_min_mm <= self.distance_mm <= distance_max_mm:
            raise ValidationError(
                f"distance_mm {self.distance_mm} outside [{distance_min_mm}, {distance_max_mm}]"
            )


@dataclass(frozen=True)
class MultimodalFrame:
    """One synchronized sample: a top-view image plus two B-scans.

    ``opmi`` is (H, W, 3), the B-scans are (H_o, W_o); all float32 in [0, 1].
    Frames are immutable after construction and safe to share across threads.
    """

    frame_index: int
    opmi: np.ndarray
    bscan_a: np.ndarray
    bscan_b: np.ndarray
    scan_geometry: ScanGeometry
    annotation: Annotation | None = None

    def validate(self, distance_min_mm: float, distance_max_mm: float) -> None:
        if self.opmi.ndim != 3 or self.opmi.shape[2] != 3:
            raise ValidationError(f"opmi must be (H, W, 3), got {self.opmi.shape}")
        h, w = self.opmi.shape[:2]
        if h != w:
            raise ValidationError(f"opmi must be square, got {h}x{w}")
        if self.bscan_a.ndim != 2 or self.bscan_b.shape != self.bscan_a.shape:
            raise ValidationError(
                f"B-scans must be 2D with matching shapes, got {self.bscan_a.shape} vs {self.bscan_b.shape}"
            )
        for name, img in (("opmi", self.opmi), ("bscan_a", self.bscan_a), ("bscan_b", self.bscan_b)):
            if img.size and (float(img.min()) < 0.0 or float(img.max()) > 1.0):
                raise ValidationError(f"{name} has pixel values outside [0, 1]")
        self.scan_geometry.validate()
        if self.annotation is not None:
            self.annotation.validate(w, h, distance_min_mm, distance_max_mm)

    @property
    def image_size(self) -> int:
        return self.opmi.shape[0]


@dataclass(frozen=True)
class SequenceRecord:
    """An ordered run of frames produced by one generator call."""

    sequence_id: str
    frames: tuple[MultimodalFrame, ...]
    generator_config_digest: str

    def validate(self, distance_min_mm: float, distance_max_mm: float) -> None:
        last = None
        for frame in self.frames:
            if last is not None and frame.frame_index <= last:
                raise ValidationError(
                    f"frame_index not strictly increasing: {frame.frame_index} after {last}"
                )
            last = frame.frame_index
            frame.validate(distance_min_mm, distance_max_mm)
        sizes = {f.opmi.shape for f in self.frames} | {f.bscan_a.shape for f in self.frames}
        if len({f.opmi.shape for f in self.frames}) > 1 or len({f.bscan_a.shape for f in self.frames}) > 1:
            raise ValidationError(f"frames disagree on image dimensions: {sorted(map(str, sizes))}")

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class SequenceInfo:
    sequence_id: str
    frame_count: int
    split: str
    config_digest: str


@dataclass
class DatasetManifest:
    """Index of a dataset directory; frames load lazily per sequence."""

    root: Path
    image_size: int | None
    bscan_shape: tuple[int, int] | None
    distance_min_mm: float
    distance_max_mm: float
    sequences: dict[str, SequenceInfo] = field(default_factory=dict)

    def split_ids(self, split: str) -> list[str]:
        if split not in SPLITS:
            raise ValidationError(f"unknown split {split!r}, expected one of {SPLITS}")
        return sorted(s.sequence_id for s in self.sequences.values() if s.split == split)

    def load_sequence(self, sequence_id: str) -> SequenceRecord:
        """Load and validate one sequence; raises if any invariant fails."""
        if sequence_id not in self.sequences:
            raise DatasetError(f"unknown sequence {sequence_id!r}")
        info = self.sequences[sequence_id]
        seq_dir = self.root / "sequences" / sequence_id
        records = _read_annotation_records(seq_dir / "annotations.jsonl")
        if len(records) != info.frame_count:
            raise DatasetError(
                f"{sequence_id}: manifest lists {info.frame_count} frames but "
                f"annotations.jsonl has {len(records)} records"
            )
        frames = []
        for record in records:
            idx = record["frame_index"]
            opmi = _load_image(seq_dir / _frame_file(idx, "opmi"), "RGB")
            oct0 = _load_image(seq_dir / _frame_file(idx, "oct0"), "L")
            oct1 = _load_image(seq_dir / _frame_file(idx, "oct1"), "L")
            frames.append(
                MultimodalFrame(
                    frame_index=idx,
                    opmi=opmi,
                    bscan_a=oct0,
                    bscan_b=oct1,
                    scan_geometry=_geometry_from_record(record["scan_geometry"]),
                    annotation=_annotation_from_record(record["annotation"]),
                )
            )
        seq = SequenceRecord(sequence_id, tuple(frames), info.config_digest)
        seq.validate(self.distance_min_mm, self.distance_max_mm)
        return seq


def _frame_file(index: int, kind: str) -> str:
    return f"frame_{index:05d}_{kind}.png"


def save_sequence(
    seq: SequenceRecord,
    root: Path | str,
    *,
    split: str = "train",
    distance_range_mm: tuple[float, float] = (-1.0, 6.0),
) -> None:
    """Persist one sequence under ``root`` and upsert the dataset meta file.

    Output is byte-deterministic for identical input: JSON is written with
    sorted keys and images as 8-bit lossless PNG.
    """
    root = Path(root)
    if split not in SPLITS:
        raise ValidationError(f"unknown split {split!r}, expected one of {SPLITS}")
    seq.validate(*distance_range_mm)

    seq_dir = root / "sequences" / seq.sequence_id
    try:
        seq_dir.mkdir(parents=True, exist_ok=True)
        lines = []
        for frame in seq.frames:
            Image.fromarray(to_uint8(frame.opmi), mode="RGB").save(
                seq_dir / _frame_file(frame.frame_index, "opmi")
            )
            Image.fromarray(to_uint8(frame.bscan_a), mode="L").save(
                seq_dir / _frame_file(frame.frame_index, "oct0")
            )
            Image.fromarray(to_uint8(frame.bscan_b), mode="L").save(
                seq_dir / _frame_file(frame.frame_index, "oct1")
            )
            lines.append(json.dumps(_frame_record(frame), sort_keys=True, separators=(",", ":")))
        (seq_dir / "annotations.jsonl").write_text("".join(line + "\n" for line in lines))
    except OSError as exc:
        raise DatasetError(f"failed writing sequence to {seq_dir}: {exc}") from exc

    meta_path = root / "meta.json"
    meta = _read_meta(meta_path) if meta_path.exists() else _empty_meta()
    entry = {
        "id": seq.sequence_id,
        "frames": len(seq.frames),
        "split": split,
        "config_digest": seq.generator_config_digest,
    }
    meta["sequences"] = [s for s in meta["sequences"] if s["id"] != seq.sequence_id] + [entry]
    meta["sequences"].sort(key=lambda s: s["id"])
    meta["distance_min_mm"], meta["distance_max_mm"] = distance_range_mm
    if seq.frames:
        meta["image_size"] = int(seq.frames[0].image_size)
        meta["bscan_shape"] = list(seq.frames[0].bscan_a.shape)
    try:
        meta_path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    except OSError as exc:
        raise DatasetError(f"failed writing {meta_path}: {exc}") from exc


def load_dataset(root: Path | str) -> DatasetManifest:
    """Read the meta file, verify every listed file exists, return the manifest."""
    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise DatasetError(f"no meta.json under {root}")
    meta = _read_meta(meta_path)
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(
            f"unsupported schema_version {meta.get('schema_version')!r}, expected {SCHEMA_VERSION}"
        )

    sequences: dict[str, SequenceInfo] = {}
    missing: list[str] = []
    for entry in meta["sequences"]:
        info = SequenceInfo(entry["id"], int(entry["frames"]), entry["split"], entry["config_digest"])
        if info.split not in SPLITS:
            raise DatasetError(f"sequence {info.sequence_id}: unknown split {info.split!r}")
        sequences[info.sequence_id] = info
        seq_dir = root / "sequences" / info.sequence_id
        expected = [seq_dir / "annotations.jsonl"]
        # Frame indices are read from the annotation file when present; fall
        # back to 0..n-1 for the existence check if it is the missing piece.
        indices = range(info.frame_count)
        if expected[0].exists():
            try:
                indices = [r["frame_index"] for r in _read_annotation_records(expected[0])]
            except DatasetError:
                pass  # reported on load_sequence with a line number
        for idx in indices:
            for kind in ("opmi", "oct0", "oct1"):
                expected.append(seq_dir / _frame_file(idx, kind))
        missing.extend(str(p) for p in expected if not p.exists())
    if missing:
        raise DatasetError("missing dataset files:\n" + "\n".join(missing))

    bscan_shape = meta.get("bscan_shape")
    return DatasetManifest(
        root=root,
        image_size=meta.get("image_size"),
        bscan_shape=tuple(bscan_shape) if bscan_shape else None,
        distance_min_mm=float(meta["distance_min_mm"]),
        distance_max_mm=float(meta["distance_max_mm"]),
        sequences=sequences,
    )


def window(seq: SequenceRecord, length: int, stride: int) -> list[tuple[MultimodalFrame, ...]]:
    """Cut a sequence into fixed-length frame windows; partial tails are dropped.

    Windows spanning a gap in frame_index are skipped so every returned
    window is contiguous in time.
    """
    if length < 1 or stride < 1:
        raise ValidationError(f"length and stride must be >= 1, got {length}, {stride}")
    frames = seq.frames
    out = []
    for i in range(0, len(frames) - length + 1, stride):
        chunk = frames[i : i + length]
        if chunk[-1].frame_index - chunk[0].frame_index == length - 1:
            out.append(chunk)
    return out


def _empty_meta() -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "image_size": None,
        "bscan_shape": None,
        "distance_min_mm": None,
        "distance_max_mm": None,
        "sequences": [],
    }


def _read_meta(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc


def _read_annotation_records(path: Path) -> list[dict]:
    if not path.exists():
        raise DatasetError(f"missing annotation file {path}")
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{lineno}: corrupt annotation record: {exc}") from exc
    return records


def _load_image(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return from_uint8(np.asarray(img.convert(mode)))
    except OSError as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


def _frame_record(frame: MultimodalFrame) -> dict:
    geom = frame.scan_geometry
    annotation = None
    if frame.annotation is not None:
        a = frame.annotation
        annotation = {
            "instrument_class": a.instrument_class,
            "bbox": list(a.bbox),
            "keypoints": [[x, y, bool(v)] for x, y, v in a.keypoints],
            "distance_mm": a.distance_mm,
        }
    return {
        "frame_index": frame.frame_index,
        "scan_geometry": {
            "line_a": [list(geom.line_a_start), list(geom.line_a_end)],
            "line_b": [list(geom.line_b_start), list(geom.line_b_end)],
            "axial_range_mm": list(geom.axial_range_mm),
        },
        "annotation": annotation,
    }


def _geometry_from_record(record: dict) -> ScanGeometry:
    (a0, a1), (b0, b1) = record["line_a"], record["line_b"]
    return ScanGeometry(
        line_a_start=tuple(a0),
        line_a_end=tuple(a1),
        line_b_start=tuple(b0),
        line_b_end=tuple(b1),
        axial_range_mm=tuple(record["axial_range_mm"]),
    )


def _annotation_from_record(record: dict | None) -> Annotation | None:
    if record is None:
        return None
    return Annotation(
        instrument_class=int(record["instrument_class"]),
        bbox=tuple(record["bbox"]),
        keypoints=tuple((x, y, bool(v)) for x, y, v in record["keypoints"]),
        distance_mm=float(record["distance_mm"]),
    )
