import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surgifuse.datamodel import (
    SCHEMA_VERSION,
    Annotation,
    DatasetError,
    MultimodalFrame,
    ScanGeometry,
    SequenceRecord,
    ValidationError,
    from_uint8,
    load_dataset,
    quantize_unit,
    save_sequence,
    to_uint8,
    window,
)

from helpers import make_annotation, make_frame, perpendicular_geometry


def make_sequence(n: int, start: int = 0, step: int = 1, seq_id: str = "seq_x") -> SequenceRecord:
    frames = tuple(make_frame(index=start + i * step) for i in range(n))
    return SequenceRecord(sequence_id=seq_id, frames=frames, generator_config_digest="d" * 64)


class TestPixelQuantization:
    def test_uint8_round_trip_is_exact_on_grid(self):
        levels = np.arange(256, dtype=np.uint8)
        values = from_uint8(levels)
        assert np.array_equal(to_uint8(values), levels)

    def test_quantize_is_idempotent(self):
        rng = np.random.default_rng(0)
        img = rng.random((17, 13)).astype(np.float32)
        once = quantize_unit(img)
        assert np.array_equal(quantize_unit(once), once)

    def test_quantize_clips(self):
        img = np.array([-0.5, 0.0, 1.0, 2.0], dtype=np.float32)
        assert np.array_equal(quantize_unit(img), np.array([0.0, 0.0, 1.0, 1.0], dtype=np.float32))

    @given(st.integers(0, 255))
    def test_every_level_survives(self, level):
        value = np.float32(level) / np.float32(255.0)
        assert int(to_uint8(np.array([value]))[0]) == level


class TestScanGeometry:
    def test_valid_perpendicular_cross(self):
        perpendicular_geometry(32.0, 32.0, 10.0).validate()

    def test_non_perpendicular_rejected(self):
        geom = ScanGeometry((0.0, 0.0), (10.0, 0.0), (5.0, -5.0), (6.0, 5.0), (0.0, 9.0))
        with pytest.raises(ValidationError, match="perpendicular"):
            geom.validate()

    def test_mismatched_midpoints_rejected(self):
        geom = ScanGeometry((0.0, 0.0), (10.0, 0.0), (8.0, -5.0), (8.0, 5.0), (0.0, 9.0))
        with pytest.raises(ValidationError, match="midpoint"):
            geom.validate()

    def test_degenerate_line_rejected(self):
        geom = ScanGeometry((3.0, 3.0), (3.0, 3.0), (3.0, -5.0), (3.0, 5.0), (0.0, 9.0))
        with pytest.raises(ValidationError, match="degenerate"):
            geom.validate()

    def test_axial_range_order(self):
        geom = perpendicular_geometry(32.0, 32.0, 10.0, axial=(5.0, 5.0))
        with pytest.raises(ValidationError, match="z_far"):
            geom.validate()

    def test_center(self):
        assert perpendicular_geometry(20.0, 24.0, 7.0).center == (20.0, 24.0)


class TestAnnotation:
    def test_valid(self):
        make_annotation().validate(64, 64, -1.0, 6.0)

    def test_inverted_bbox(self):
        ann = make_annotation(bbox=(30.0, 12.0, 10.0, 40.0))
        with pytest.raises(ValidationError, match="bbox"):
            ann.validate(64, 64, -1.0, 6.0)

    def test_visible_keypoint_outside_image(self):
        ann = make_annotation(keypoints=((70.0, 10.0, True), (20.0, 30.0, True)))
        with pytest.raises(ValidationError, match="keypoints\\[0\\]"):
            ann.validate(64, 64, -1.0, 6.0)

    def test_invisible_keypoint_may_leave_image(self):
        ann = make_annotation(keypoints=((70.0, 10.0, False), (20.0, 30.0, True)))
        ann.validate(64, 64, -1.0, 6.0)

    def test_distance_out_of_range(self):
        ann = make_annotation(distance_mm=7.5)
        with pytest.raises(ValidationError, match="distance_mm"):
            ann.validate(64, 64, -1.0, 6.0)

    def test_class_out_of_range(self):
        ann = make_annotation(cls=4)
        with pytest.raises(ValidationError, match="instrument_class"):
            ann.validate(64, 64, -1.0, 6.0)


class TestFrameAndSequence:
    def test_non_square_rejected(self):
        frame = dataclasses.replace(make_frame(), opmi=np.zeros((32, 48, 3), dtype=np.float32))
        with pytest.raises(ValidationError, match="square"):
            frame.validate(-1.0, 6.0)

    def test_bscan_shape_mismatch(self):
        frame = dataclasses.replace(make_frame(), bscan_b=np.zeros((16, 32), dtype=np.float32))
        with pytest.raises(ValidationError, match="B-scans"):
            frame.validate(-1.0, 6.0)

    def test_pixel_range_enforced(self):
        bad = np.full((64, 64, 3), 1.5, dtype=np.float32)
        frame = dataclasses.replace(make_frame(), opmi=bad)
        with pytest.raises(ValidationError, match="outside"):
            frame.validate(-1.0, 6.0)

    def test_frame_index_strictly_increasing(self):
        frames = (make_frame(index=0), make_frame(index=2), make_frame(index=2))
        seq = SequenceRecord("s", frames, "d" * 64)
        with pytest.raises(ValidationError, match="strictly increasing"):
            seq.validate(-1.0, 6.0)

    def test_len(self):
        assert len(make_sequence(5)) == 5


class TestWindow:
    def test_counts_at_matching_stride(self):
        seq = make_sequence(64)
        assert len(window(seq, 16, 16)) == 4
        assert len(window(seq, 16, 8)) == 7

    def test_short_sequence_yields_nothing(self):
        assert window(make_sequence(5), 16, 16) == []

    def test_windows_are_contiguous_and_skip_gaps(self):
        # frame 3 missing: indices 0,1,2,4,5,6
        frames = tuple(make_frame(index=i) for i in (0, 1, 2, 4, 5, 6))
        seq = SequenceRecord("s", frames, "d" * 64)
        wins = window(seq, 3, 1)
        for win in wins:
            indices = [f.frame_index for f in win]
            assert indices == list(range(indices[0], indices[0] + 3))
        assert len(wins) == 2  # (0,1,2) and (4,5,6)

    def test_bad_args(self):
        with pytest.raises(ValidationError):
            window(make_sequence(4), 0, 1)

    @given(n=st.integers(0, 40), length=st.integers(1, 20), stride=st.integers(1, 20))
    @settings(max_examples=40, deadline=None)
    def test_window_shapes_property(self, n, length, stride):
        seq = make_sequence(n)
        wins = window(seq, length, stride)
        expected = max(0, (n - length) // stride + 1) if n >= length else 0
        assert len(wins) == expected
        assert all(len(w) == length for w in wins)


class TestPersistence:
    def _seq_with_annotations(self, n=4):
        frames = tuple(
            make_frame(index=i, annotation=make_annotation(distance_mm=0.5 + 0.1 * i)) for i in range(n)
        )
        return SequenceRecord("seq_rt", frames, "a" * 64)

    def test_file_counts(self, tmp_path):
        save_sequence(self._seq_with_annotations(16), tmp_path)
        seq_dir = tmp_path / "sequences" / "seq_rt"
        assert len(list(seq_dir.glob("*.png"))) == 48
        lines = (seq_dir / "annotations.jsonl").read_text().splitlines()
        assert len(lines) == 16

    def test_empty_sequence(self, tmp_path):
        save_sequence(SequenceRecord("seq_e", (), "b" * 64), tmp_path)
        meta = json.loads((tmp_path / "meta.json").read_text())
        entry = next(s for s in meta["sequences"] if s["id"] == "seq_e")
        assert entry["frames"] == 0
        assert list((tmp_path / "sequences" / "seq_e").glob("*.png")) == []

    def test_round_trip_structure(self, tmp_path):
        seq = self._seq_with_annotations(3)
        save_sequence(seq, tmp_path, split="val")
        manifest = load_dataset(tmp_path)
        assert manifest.split_ids("val") == ["seq_rt"]
        loaded = manifest.load_sequence("seq_rt")
        assert loaded.sequence_id == seq.sequence_id
        assert loaded.generator_config_digest == seq.generator_config_digest
        for a, b in zip(seq.frames, loaded.frames):
            assert a.frame_index == b.frame_index
            assert np.array_equal(a.opmi, b.opmi)
            assert np.array_equal(a.bscan_a, b.bscan_a)
            assert np.array_equal(a.bscan_b, b.bscan_b)
            assert a.scan_geometry == b.scan_geometry
            assert a.annotation.instrument_class == b.annotation.instrument_class
            assert a.annotation.bbox == pytest.approx(b.annotation.bbox)
            assert a.annotation.distance_mm == pytest.approx(b.annotation.distance_mm)

    def test_byte_deterministic(self, tmp_path):
        seq = self._seq_with_annotations(3)
        for sub in ("one", "two"):
            save_sequence(seq, tmp_path / sub)
        files_one = sorted((tmp_path / "one").rglob("*"))
        files_two = sorted((tmp_path / "two").rglob("*"))
        assert [p.name for p in files_one if p.is_file()] == [p.name for p in files_two if p.is_file()]
        for a, b in zip(files_one, files_two):
            if a.is_file():
                assert a.read_bytes() == b.read_bytes(), a.name

    def test_missing_file_listed(self, tmp_path):
        save_sequence(self._seq_with_annotations(3), tmp_path)
        victim = tmp_path / "sequences" / "seq_rt" / "frame_00001_oct0.png"
        victim.unlink()
        with pytest.raises(DatasetError, match="frame_00001_oct0.png"):
            load_dataset(tmp_path)

    def test_schema_version_mismatch(self, tmp_path):
        save_sequence(self._seq_with_annotations(1), tmp_path)
        meta = json.loads((tmp_path / "meta.json").read_text())
        meta["schema_version"] = SCHEMA_VERSION + 1
        (tmp_path / "meta.json").write_text(json.dumps(meta))
        with pytest.raises(DatasetError, match="schema_version"):
            load_dataset(tmp_path)

    def test_corrupt_annotation_line(self, tmp_path):
        save_sequence(self._seq_with_annotations(2), tmp_path)
        ann = tmp_path / "sequences" / "seq_rt" / "annotations.jsonl"
        lines = ann.read_text().splitlines()
        lines[1] = "{not json"
        ann.write_text("\n".join(lines) + "\n")
        manifest_error = None
        try:
            manifest = load_dataset(tmp_path)
            manifest.load_sequence("seq_rt")
        except DatasetError as exc:
            manifest_error = str(exc)
        assert manifest_error is not None and ":2:" in manifest_error

    def test_frame_count_mismatch(self, tmp_path):
        save_sequence(self._seq_with_annotations(3), tmp_path)
        meta = json.loads((tmp_path / "meta.json").read_text())
        meta["sequences"][0]["frames"] = 5
        (tmp_path / "meta.json").write_text(json.dumps(meta))
        manifest = load_dataset(tmp_path)  # files listed in annotations all exist
        with pytest.raises(DatasetError, match="lists 5 frames"):
            manifest.load_sequence("seq_rt")

    def test_unknown_split_rejected(self, tmp_path):
        with pytest.raises(ValidationError, match="split"):
            save_sequence(self._seq_with_annotations(1), tmp_path, split="holdout")

    def test_meta_upsert_replaces(self, tmp_path):
        seq = self._seq_with_annotations(2)
        save_sequence(seq, tmp_path)
        save_sequence(seq, tmp_path)  # same id again
        meta = json.loads((tmp_path / "meta.json").read_text())
        assert [s["id"] for s in meta["sequences"]] == ["seq_rt"]

    def test_missing_meta(self, tmp_path):
        with pytest.raises(DatasetError, match="meta.json"):
            load_dataset(tmp_path / "nowhere")
