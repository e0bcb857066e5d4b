import numpy as np
import pytest
import torch

from surgifuse.config import ConfigurationError
from surgifuse.datamodel import ScanGeometry
from surgifuse.encoders import (
    IoctEmbedderConfig,
    OpmiEncoderConfig,
    column_positions,
)
from surgifuse.fusion import FusionConfig
from surgifuse.heads import HeadConfig
from surgifuse.model import (
    ModelConfig,
    SurgiFuseModel,
    frame_positions,
    frame_to_tensors,
)
from surgifuse.temporal import TemporalConfig

from helpers import make_frame

IMG = 32
SCAN_H, SCAN_W = 16, 16


def tiny_config(variant: str = "sm") -> ModelConfig:
    return ModelConfig(
        variant=variant,
        encoder=OpmiEncoderConfig(in_channels=3, stem_channels=4, level_channels=(8, 8, 8), strides=(4, 8, 16)),
        ioct=IoctEmbedderConfig(tokens_per_scan=4, token_width=8, hidden_channels=8),
        fusion=FusionConfig(attn_dim=8, heads=2, blocks=1, key_pos_dim=4),
        temporal=TemporalConfig(grid_size=2, hidden_dim=8),
        heads=HeadConfig(
            num_classes=2,
            num_keypoints=2,
            reg_max_box=4,
            reg_max_distance=4,
            branch_channels=8,
            scale_ranges=((0.0, 8.0), (8.0, 16.0), (16.0, 1e9)),
        ),
    )


def make_inputs(batch: int = 1, seed: int = 0):
    gen = torch.Generator().manual_seed(seed)
    opmi = torch.rand(batch, 3, IMG, IMG, generator=gen)
    bscan_a = torch.rand(batch, 1, SCAN_H, SCAN_W, generator=gen)
    bscan_b = torch.rand(batch, 1, SCAN_H, SCAN_W, generator=gen)
    geom = ScanGeometry(
        line_a_start=(8.0, 16.0), line_a_end=(24.0, 16.0),
        line_b_start=(16.0, 8.0), line_b_end=(16.0, 24.0),
        axial_range_mm=(0.0, 9.0),
    )
    positions = column_positions(geom, tokens_per_scan=4, image_size=IMG)
    return opmi, bscan_a, bscan_b, positions


class TestModelConfig:
    def test_default_validates(self):
        ModelConfig().validate()

    def test_unknown_variant(self):
        with pytest.raises(ConfigurationError, match="variant"):
            ModelConfig(variant="dual").validate()

    def test_subconfig_errors_propagate(self):
        cfg = tiny_config()
        bad = ModelConfig(variant="mm", encoder=cfg.encoder, fusion=FusionConfig(attn_dim=10, heads=4))
        with pytest.raises(ConfigurationError):
            bad.validate()


class TestSingleModality:
    def test_forward_shapes(self):
        model = SurgiFuseModel(tiny_config("sm")).eval()
        opmi, *_ = make_inputs()
        raw, state, pyramid = model(opmi)
        assert state is None
        assert len(raw.levels) == 3
        assert raw.levels[0].cls_logits.shape == (1, 2, 8, 8)
        assert pyramid.levels[0].shape == (1, 8, 8, 8)
        raw.validate(model.cfg.heads)

    def test_no_token_path(self):
        model = SurgiFuseModel(tiny_config("sm"))
        _, a, b, pos = make_inputs()
        with pytest.raises(ConfigurationError, match="does not embed"):
            model.embed_tokens(a, b, pos)
        with pytest.raises(ConfigurationError, match="no recurrent state"):
            model.init_state(1)

    def test_scans_ignored_allowed(self):
        # extra modal inputs on sm are simply unused, not an error
        model = SurgiFuseModel(tiny_config("sm")).eval()
        opmi, a, b, pos = make_inputs()
        raw, _, _ = model(opmi, a, b, pos)
        raw.validate(model.cfg.heads)

    def test_deterministic(self):
        model = SurgiFuseModel(tiny_config("sm")).eval()
        opmi, *_ = make_inputs()
        with torch.no_grad():
            first, _, _ = model(opmi)
            second, _, _ = model(opmi)
        assert torch.equal(first.levels[0].cls_logits, second.levels[0].cls_logits)


class TestMultimodal:
    def test_forward_shapes(self):
        model = SurgiFuseModel(tiny_config("mm")).eval()
        opmi, a, b, pos = make_inputs(batch=2)
        raw, state, pyramid = model(opmi, a, b, pos)
        assert state is None
        assert raw.levels[1].cls_logits.shape == (2, 2, 4, 4)
        assert pyramid.levels[2].shape == (2, 8, 2, 2)

    def test_missing_scans_rejected(self):
        model = SurgiFuseModel(tiny_config("mm"))
        opmi, a, _, pos = make_inputs()
        with pytest.raises(ConfigurationError, match="needs both scans"):
            model(opmi)
        with pytest.raises(ConfigurationError, match="needs both scans"):
            model(opmi, a, None, pos)

    def test_tokens_change_output(self):
        model = SurgiFuseModel(tiny_config("mm")).eval()
        opmi, a, b, pos = make_inputs()
        with torch.no_grad():
            base, _, _ = model(opmi, a, b, pos)
            other, _, _ = model(opmi, a, torch.rand_like(b) * 0.5, pos)
        assert not torch.allclose(base.levels[0].cls_logits, other.levels[0].cls_logits, atol=1e-7)

    def test_embed_tokens_layout(self):
        model = SurgiFuseModel(tiny_config("mm")).eval()
        _, a, b, pos = make_inputs(batch=2)
        cset = model.embed_tokens(a, b, pos)
        assert cset.tokens.shape == (2, 8, 8)
        assert cset.positions.shape == (2, 8, 2)
        assert cset.source_flags.tolist() == [0, 0, 0, 0, 1, 1, 1, 1]
        assert cset.corrupted.tolist() == [False, False]

    def test_cset_override_skips_scans(self):
        model = SurgiFuseModel(tiny_config("mm")).eval()
        opmi, a, b, pos = make_inputs()
        cset = model.embed_tokens(a, b, pos)
        with torch.no_grad():
            via_scans, _, _ = model(opmi, a, b, pos)
            via_cset, _, _ = model(opmi, cset=cset)
        assert torch.equal(via_scans.levels[0].cls_logits, via_cset.levels[0].cls_logits)

    def test_gradients_reach_both_streams(self):
        model = SurgiFuseModel(tiny_config("mm")).train()
        opmi, a, b, pos = make_inputs()
        raw, _, _ = model(opmi, a, b, pos)
        loss = sum(level.cls_logits.square().sum() for level in raw.levels)
        loss.backward()
        first_conv = next(m for m in model.encoder.modules() if isinstance(m, torch.nn.Conv2d))
        stem_grad = first_conv.weight.grad
        assert stem_grad is not None and float(stem_grad.abs().sum()) > 0
        emb_grads = [p.grad for p in model.embedder.parameters() if p.grad is not None]
        assert emb_grads and any(float(g.abs().sum()) > 0 for g in emb_grads)


class TestRecurrentMultimodal:
    def test_state_threading(self):
        model = SurgiFuseModel(tiny_config("rmm")).eval()
        opmi, a, b, pos = make_inputs()
        state = model.init_state(1)
        with torch.no_grad():
            raw1, state1, _ = model(opmi, a, b, pos, state=state)
            raw2, state2, _ = model(opmi, a, b, pos, state=state1)
        assert state1 is not None and state2 is not None
        assert not torch.equal(state1.hidden[0], state2.hidden[0])

    def test_auto_initial_state(self):
        model = SurgiFuseModel(tiny_config("rmm")).eval()
        opmi, a, b, pos = make_inputs()
        with torch.no_grad():
            auto, auto_state, _ = model(opmi, a, b, pos)
            explicit, _, _ = model(opmi, a, b, pos, state=model.init_state(1))
        assert auto_state is not None
        assert torch.equal(auto.levels[0].cls_logits, explicit.levels[0].cls_logits)

    def test_input_state_not_mutated(self):
        model = SurgiFuseModel(tiny_config("rmm")).eval()
        opmi, a, b, pos = make_inputs()
        state = model.init_state(1)
        before = [h.clone() for h in state.hidden]
        with torch.no_grad():
            model(opmi, a, b, pos, state=state)
        assert all(torch.equal(x, y) for x, y in zip(before, state.hidden))

    def test_history_changes_output(self):
        model = SurgiFuseModel(tiny_config("rmm")).eval()
        opmi, a, b, pos = make_inputs()
        hot = torch.ones_like(opmi)
        with torch.no_grad():
            _, warm, _ = model(hot, a, b, pos)
            fresh, _, _ = model(opmi, a, b, pos)
            carried, _, _ = model(opmi, a, b, pos, state=warm)
        assert not torch.allclose(fresh.levels[0].cls_logits, carried.levels[0].cls_logits, atol=1e-7)


class TestFrameConversion:
    def test_tensor_shapes_and_dtype(self):
        frame = make_frame(size=IMG, bscan=(SCAN_H, SCAN_W))
        opmi, a, b = frame_to_tensors(frame)
        assert opmi.shape == (1, 3, IMG, IMG) and opmi.dtype == torch.float32
        assert a.shape == (1, 1, SCAN_H, SCAN_W)
        assert b.shape == (1, 1, SCAN_H, SCAN_W)

    def test_channel_order(self):
        frame = make_frame(size=IMG, bscan=(SCAN_H, SCAN_W))
        img = frame.opmi.copy()
        img[3, 5, 2] = 1.0
        frame = frame.__class__(
            frame_index=frame.frame_index, opmi=img, bscan_a=frame.bscan_a,
            bscan_b=frame.bscan_b, scan_geometry=frame.scan_geometry, annotation=None,
        )
        opmi, _, _ = frame_to_tensors(frame)
        assert opmi[0, 2, 3, 5] == pytest.approx(1.0)
        assert np.allclose(opmi[0].permute(1, 2, 0).numpy(), img)

    def test_frame_positions_passthrough(self):
        frame = make_frame(size=IMG, bscan=(SCAN_H, SCAN_W))
        via_model = frame_positions(frame.scan_geometry, 4, IMG)
        direct = column_positions(frame.scan_geometry, 4, IMG)
        assert torch.equal(via_model, direct)

    def test_frame_runs_through_mm(self):
        model = SurgiFuseModel(tiny_config("mm")).eval()
        frame = make_frame(size=IMG, bscan=(SCAN_H, SCAN_W))
        opmi, a, b = frame_to_tensors(frame)
        pos = frame_positions(frame.scan_geometry, 4, IMG)
        with torch.no_grad():
            raw, _, _ = model(opmi, a, b, pos)
        raw.validate(model.cfg.heads)
