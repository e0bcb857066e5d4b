import pytest
import torch

from surgifuse.config import ConfigurationError
from surgifuse.datamodel import ValidationError
from surgifuse.encoders import FeaturePyramid
from surgifuse.temporal import TemporalConfig, TemporalModule, cosine_contrastive_loss

from helpers import max_rel_grad_error, randomize_parameters


def make_module(channels=(6,), grid=2, hidden=8, cell="gru"):
    return TemporalModule(channels, TemporalConfig(cell=cell, grid_size=grid, hidden_dim=hidden))


def make_pyramid(channels=(6,), size=8, batch=1, seed=0):
    gen = torch.Generator().manual_seed(seed)
    levels, strides = [], []
    s = size
    for i, c in enumerate(channels):
        levels.append(torch.randn(batch, c, s, s, generator=gen))
        strides.append(2 ** (i + 3))
        s //= 2
    return FeaturePyramid(levels=tuple(levels), strides=tuple(strides))


class TestConfig:
    def test_cell_kind_checked(self):
        with pytest.raises(ConfigurationError, match="gru"):
            TemporalConfig(cell="rnn").validate()

    def test_sizes_checked(self):
        with pytest.raises(ConfigurationError):
            TemporalConfig(grid_size=0).validate()


class TestPoolRegions:
    def test_constant_map_pools_to_constant_grid(self):
        torch.manual_seed(0)
        mod = make_module(grid=2).eval()
        grid = mod.pool_regions(torch.full((1, 6, 8, 8), 0.7), 0)
        assert tuple(grid.shape) == (1, 8, 2, 2)
        flat = grid.reshape(1, 8, 4)
        assert torch.allclose(flat, flat[..., :1].expand_as(flat), atol=1e-6)

    def test_grid_equal_to_map_size_keeps_values(self):
        mod = make_module(channels=(8,), grid=4, hidden=8).eval()
        with torch.no_grad():
            mod.proj_in[0].weight.copy_(torch.eye(8).reshape(8, 8, 1, 1))
            mod.proj_in[0].bias.zero_()
        level = torch.randn(1, 8, 4, 4, generator=torch.Generator().manual_seed(1))
        assert torch.allclose(mod.pool_regions(level, 0), level, atol=1e-6)

    def test_checkerboard_cancels(self):
        mod = make_module(channels=(1,), grid=2, hidden=4).eval()
        with torch.no_grad():
            mod.proj_in[0].bias.zero_()
        board = torch.tensor([[1.0, -1.0], [-1.0, 1.0]]).repeat(2, 2)[None, None]
        grid = mod.pool_regions(board, 0)
        assert torch.allclose(grid, torch.zeros_like(grid), atol=1e-7)

    def test_too_small_level_rejected(self):
        mod = make_module(grid=4)
        with pytest.raises(ConfigurationError, match="smaller than grid"):
            mod.pool_regions(torch.zeros(1, 6, 3, 3), 0)


class TestRecurrentStep:
    def test_zero_fixed_point_for_gru(self):
        mod = make_module(grid=2, hidden=4)
        with torch.no_grad():
            for cell in mod.cells[0]:
                cell.bias_ih.zero_()
                cell.bias_hh.zero_()
        state = mod.init_state(1)
        new_state, out = mod.recurrent_step(state, torch.zeros(1, 4, 2, 2), 0)
        assert torch.equal(out, torch.zeros_like(out))
        for layer in new_state.hidden[0]:
            assert torch.equal(layer, torch.zeros_like(layer))

    def test_deterministic(self):
        torch.manual_seed(0)
        mod = make_module(grid=2, hidden=4).eval()
        state = mod.init_state(1)
        grid = torch.randn(1, 4, 2, 2, generator=torch.Generator().manual_seed(3))
        s1, o1 = mod.recurrent_step(state, grid, 0)
        s2, o2 = mod.recurrent_step(state, grid, 0)
        assert torch.equal(o1, o2)
        assert torch.equal(s1.hidden[0], s2.hidden[0])

    def test_history_dependence(self):
        torch.manual_seed(1)
        mod = make_module(grid=2, hidden=4).eval()
        gen = torch.Generator().manual_seed(5)
        a = torch.randn(1, 4, 2, 2, generator=gen)
        b = torch.randn(1, 4, 2, 2, generator=gen)
        current = torch.randn(1, 4, 2, 2, generator=gen)
        state_a, _ = mod.recurrent_step(mod.init_state(1), a, 0)
        state_b, _ = mod.recurrent_step(mod.init_state(1), b, 0)
        _, out_a = mod.recurrent_step(state_a, current, 0)
        _, out_b = mod.recurrent_step(state_b, current, 0)
        assert not torch.allclose(out_a, out_b, atol=1e-5)

    def test_state_not_mutated(self):
        torch.manual_seed(2)
        mod = make_module(grid=2, hidden=4).eval()
        state = mod.init_state(1)
        before = state.hidden[0].clone()
        mod.recurrent_step(state, torch.randn(1, 4, 2, 2), 0)
        assert torch.equal(state.hidden[0], before)

    def test_shape_mismatch_rejected(self):
        mod = make_module(grid=2, hidden=4)
        state = mod.init_state(1)
        with pytest.raises(ValidationError, match="incompatible"):
            mod.recurrent_step(state, torch.zeros(2, 4, 2, 2), 0)

    def test_lstm_cell_state_threaded(self):
        torch.manual_seed(3)
        mod = make_module(grid=2, hidden=4, cell="lstm").eval()
        state = mod.init_state(1)
        assert state.cell is not None
        new_state, _ = mod.recurrent_step(state, torch.randn(1, 4, 2, 2), 0)
        assert not torch.equal(new_state.cell[0], state.cell[0])


class TestRefine:
    def test_shape_preservation(self):
        torch.manual_seed(0)
        mod = make_module(channels=(6, 10), grid=2, hidden=8).eval()
        pyr = make_pyramid(channels=(6, 10), size=8)
        out, state = mod.refine(pyr, mod.init_state(1))
        assert out.strides == pyr.strides
        for before, after in zip(pyr.levels, out.levels):
            assert after.shape == before.shape

    def test_zeroed_projection_is_exact_identity(self):
        torch.manual_seed(1)
        mod = make_module(channels=(6,), grid=2, hidden=8).eval()
        mod.zero_output_projections()
        pyr = make_pyramid()
        out, state = mod.refine(pyr, mod.init_state(1))
        assert torch.equal(out.levels[0], pyr.levels[0])
        # state still evolves underneath the identity output
        assert not torch.equal(state.hidden[0], mod.init_state(1).hidden[0])

    def test_temporal_asymmetry(self):
        torch.manual_seed(2)
        mod = make_module(channels=(4,), grid=2, hidden=8).eval()
        frames = [make_pyramid(channels=(4,), size=4, seed=s) for s in range(4)]

        def last_output(sequence):
            state = mod.init_state(1)
            out = None
            for pyr in sequence:
                out, state = mod.refine(pyr, state)
            return out.levels[0]

        forward = last_output(frames)
        backward = last_output(frames[::-1])
        assert not torch.allclose(forward, backward, atol=1e-5)

    def test_state_isolation_between_sequences(self):
        torch.manual_seed(3)
        mod = make_module(channels=(4,), grid=2, hidden=8).eval()
        seq_a = [make_pyramid(channels=(4,), size=4, seed=s) for s in (0, 1)]
        seq_b = [make_pyramid(channels=(4,), size=4, seed=s) for s in (7, 8)]

        def run(sequence):
            state = mod.init_state(1)
            outs = []
            for pyr in sequence:
                out, state = mod.refine(pyr, state)
                outs.append(out.levels[0])
            return outs

        alone = run(seq_a)
        run(seq_b)  # interleaved unrelated work on its own state
        again = run(seq_a)
        for x, y in zip(alone, again):
            assert torch.equal(x, y)

    def test_level_count_mismatch_rejected(self):
        mod = make_module(channels=(4, 6), grid=2, hidden=8)
        with pytest.raises(ValidationError, match="levels"):
            mod.refine(make_pyramid(channels=(4,), size=4), mod.init_state(1))

    def test_detached_state_cuts_graph(self):
        torch.manual_seed(4)
        mod = make_module(channels=(4,), grid=2, hidden=8)
        pyr = make_pyramid(channels=(4,), size=4)
        _, state = mod.refine(pyr, mod.init_state(1))
        assert state.hidden[0].requires_grad
        cut = state.detach()
        assert not cut.hidden[0].requires_grad

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        mod = make_module(channels=(3,), grid=2, hidden=4).double().eval()
        randomize_parameters(mod, seed=5)
        level = torch.randn(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)

        def loss():
            pyr = FeaturePyramid(levels=(level,), strides=(8,))
            state = mod.init_state(1, dtype=torch.float64)
            out, state = mod.refine(pyr, state)
            out, _ = mod.refine(out, state)  # second step exercises state flow
            return (out.levels[0] ** 2).mean()

        wrt = [level] + [p for p in mod.parameters() if p.requires_grad]
        assert max_rel_grad_error(loss, wrt) < 1e-4


class TestCosineLoss:
    def test_equal_vectors(self):
        v = torch.tensor([1.0, 2.0, 3.0])
        assert float(cosine_contrastive_loss(v, v)) == pytest.approx(0.0, abs=1e-7)

    def test_opposite_vectors(self):
        v = torch.tensor([1.0, -2.0, 0.5])
        assert float(cosine_contrastive_loss(-v, v)) == pytest.approx(2.0, abs=1e-7)

    def test_orthogonal_vectors(self):
        a = torch.tensor([1.0, 0.0])
        b = torch.tensor([0.0, 3.0])
        assert float(cosine_contrastive_loss(a, b)) == pytest.approx(1.0, abs=1e-7)

    def test_bounds_random(self):
        gen = torch.Generator().manual_seed(0)
        for _ in range(50):
            a = torch.randn(16, generator=gen)
            b = torch.randn(16, generator=gen)
            val = float(cosine_contrastive_loss(a, b))
            assert -1e-6 <= val <= 2.0 + 1e-6

    def test_gradient_only_to_corrupted_branch(self):
        a = torch.randn(8, requires_grad=True, generator=torch.Generator().manual_seed(1))
        b = torch.randn(8, requires_grad=True, generator=torch.Generator().manual_seed(2))
        loss = cosine_contrastive_loss(a, b)
        loss.backward()
        assert a.grad is not None and a.grad.abs().sum() > 0
        assert b.grad is None

    def test_zero_corrupted_vector_continues_at_one(self):
        zero = torch.zeros(4, requires_grad=True)
        target = torch.ones(4)
        loss = cosine_contrastive_loss(zero, target)
        assert float(loss.detach()) == 1.0
        loss.backward()
        assert torch.equal(zero.grad, torch.zeros(4))

    def test_zero_target_rejected(self):
        with pytest.raises(ValidationError, match="all-zero"):
            cosine_contrastive_loss(torch.ones(4), torch.zeros(4))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError, match="differ"):
            cosine_contrastive_loss(torch.ones(4), torch.ones(5))

    def test_scale_invariance(self):
        gen = torch.Generator().manual_seed(3)
        a = torch.randn(12, generator=gen)
        b = torch.randn(12, generator=gen)
        assert float(cosine_contrastive_loss(3.0 * a, b)) == pytest.approx(
            float(cosine_contrastive_loss(a, b)), abs=1e-6
        )

    def test_gradients_match_finite_differences(self):
        gen = torch.Generator().manual_seed(4)
        a = torch.randn(6, dtype=torch.float64, generator=gen, requires_grad=True)
        b = torch.randn(6, dtype=torch.float64, generator=gen)
        assert max_rel_grad_error(lambda: cosine_contrastive_loss(a, b), [a]) < 1e-4
