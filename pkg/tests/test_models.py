import numpy as np
import pytest
from conftest import TOY_VOCAB
from oracles import finite_difference_grads, relative_error, straight_line_forward

from mtprover.decoding import DecodeCache, greedy_pick
from mtprover.models import (
    LinearMTPModel,
    Stage,
    TableModel,
    TrainingDiverged,
    TrainStageConfig,
    batch_loss,
    cyclic_corpus,
    init_branches_from_backbone,
    linear_backward,
    linear_forward,
    table_step,
    train_stage,
)
from mtprover.mtp import ModelStepOutput, MTPConfig, sequence_loss


class TestTableModel:
    def test_empty_table_is_uniform(self):
        m = TableModel(4, 2, 2)
        out = table_step(m, [1, 2, 3])
        np.testing.assert_array_equal(out.main, np.full(4, 0.25))
        assert len(out.branches) == 2

    def test_lookup_returns_stored_output(self):
        m = TableModel(8, 1, 2)
        main = np.zeros(8)
        main[7] = 1.0
        m.set([3, 1], main, [np.full(8, 1 / 8)])
        out = table_step(m, [5, 3, 1])
        assert out is m.entries[(3, 1)]
        assert out.main.tobytes() == main.tobytes()

    def test_deterministic(self):
        m = TableModel(3, 1, 1)
        m.set([0], [0.2, 0.5, 0.3], [[1, 0, 0]])
        a, b = table_step(m, [2, 0]), table_step(m, [2, 0])
        assert a.main.tobytes() == b.main.tobytes()

    def test_rejects_malformed_entry(self):
        m = TableModel(3, 1, 1)
        with pytest.raises(ValueError):
            m.set([0], [0.5, 0.5, 0.5], [[1, 0, 0]])


class TestLinearForward:
    def test_zero_parameters_give_uniform(self):
        m = LinearMTPModel.zeros(5, 4, 3)
        out = linear_forward(m, [1, 2], [0, 1, 2])
        for p in [out.main, *out.branches]:
            np.testing.assert_allclose(p, np.full(5, 0.2), rtol=0, atol=1e-15)

    @pytest.mark.parametrize("window", [None, 2])
    def test_matches_straight_line(self, window):
        m = LinearMTPModel.random(16, 8, 5, seed=42, context_window=window)
        shifts = [4, 5, 6, 7, 8]
        out = linear_forward(m, [1, 2, 3], shifts)
        main, branches = straight_line_forward(m, [1, 2, 3], shifts)
        np.testing.assert_allclose(out.main, main, rtol=1e-12, atol=0)
        for got, exp in zip(out.branches, branches):
            np.testing.assert_allclose(got, exp, rtol=1e-12, atol=0)

    def test_branch_prefix_independent_of_branch_count(self):
        m5 = LinearMTPModel.random(16, 8, 5, seed=7)
        m3 = LinearMTPModel.from_arrays(m5.E, m5.F, m5.G[:3], m5.U)
        a = linear_forward(m5, [1, 2, 3], [3, 4, 5, 6, 7])
        b = linear_forward(m3, [1, 2, 3], [3, 4, 5, 6, 7])
        assert len(b.branches) == 3
        for h in range(3):
            assert a.branches[h].tobytes() == b.branches[h].tobytes()

    def test_branch_invariant_to_later_projections(self):
        m = LinearMTPModel.random(10, 6, 4, seed=3)
        G = list(m.G)
        G[3] = G[3] + 1.0
        G[2] = G[2] * -2.0
        changed = LinearMTPModel.from_arrays(m.E, m.F, G, m.U)
        a = linear_forward(m, [0, 5], [1, 2, 3, 4])
        b = linear_forward(changed, [0, 5], [1, 2, 3, 4])
        for h in range(2):
            assert a.branches[h].tobytes() == b.branches[h].tobytes()
        assert a.branches[2].tobytes() != b.branches[2].tobytes()

    def test_short_shift_sequence_omits_branches(self):
        m = LinearMTPModel.random(10, 6, 4, seed=3)
        assert len(linear_forward(m, [1], [2]).branches) == 1

    @pytest.mark.parametrize("window", [None, 3])
    def test_cached_extension_matches_forward_with_greedy_shifts(self, window):
        m = LinearMTPModel.random(12, 6, 3, seed=5, context_window=window)
        ctx = [1, 4, 2, 9, 0, 3]
        cache = DecodeCache()
        out = m.extend(cache, ctx)[-1]
        shifts = [greedy_pick(out.main)] + [greedy_pick(b) for b in out.branches[:-1]]
        ref = linear_forward(m, ctx, shifts)
        np.testing.assert_allclose(out.main, ref.main, rtol=1e-12)
        for got, exp in zip(out.branches, ref.branches):
            np.testing.assert_allclose(got, exp, rtol=1e-12)


def _perfect_cyclic_model(V=4, margin=1000.0):
    # window-1 context is E[last] = e_last; head maps e_t to t+1 with a huge margin;
    # branch h sees the shift token and predicts its successor
    E = np.eye(V)
    F = np.eye(V)
    G = [np.hstack([np.zeros((V, V)), np.eye(V)]) for _ in range(3)]
    U = np.zeros((V, V))
    for t in range(V):
        U[t, (t + 1) % V] = margin
    return LinearMTPModel.from_arrays(E, F, G, U, context_window=1)


class TestBackward:
    def test_matches_finite_differences(self):
        cfg = MTPConfig(3, 0.9)
        m = LinearMTPModel.random(7, 4, 3, seed=11)
        rng = np.random.default_rng(0)
        batch = [rng.integers(0, 7, size=n) for n in (6, 9)]
        g = linear_backward(m, batch, cfg).blocks()
        num = finite_difference_grads(m, batch, cfg)
        for name in num:
            assert relative_error(g[name], num[name]) < 1e-5, name

    def test_zero_loss_gives_zero_gradients(self):
        m = _perfect_cyclic_model()
        data = cyclic_corpus(4, 12)
        cfg = MTPConfig(3, 0.9)
        assert batch_loss(m, data, cfg) == 0.0
        for name, g in linear_backward(m, data, cfg).blocks().items():
            assert not np.any(g), name

    def test_horizon_zero_reproduces_plain_lm_gradient_of_head(self):
        m = LinearMTPModel.random(9, 5, 4, seed=2, context_window=3)
        rng = np.random.default_rng(4)
        batch = [rng.integers(0, 9, size=n) for n in (5, 8, 11)]
        got = linear_backward(m, batch, MTPConfig(4, 0.9), horizon=0).U

        # plain next-token LM gradient of U, written out per position
        expected = np.zeros_like(m.U)
        for seq in batch:
            P = len(seq) - 1
            for t in range(P):
                ctx = seq[max(0, t + 1 - 3): t + 1]
                h0 = m.F @ m.E[ctx].mean(axis=0)
                logits = h0 @ m.U
                p = np.exp(logits - logits.max())
                p /= p.sum()
                p[seq[t + 1]] -= 1.0
                expected += np.outer(h0, p) / P
        expected /= len(batch)
        np.testing.assert_allclose(got, expected, rtol=1e-10, atol=1e-14)

        full = linear_backward(m, batch, MTPConfig(4, 0.9)).U
        assert not np.allclose(full, expected)

    def test_horizon_zero_loss_is_plain_cross_entropy(self):
        m = LinearMTPModel.random(9, 5, 2, seed=2)
        seq = [1, 4, 4, 0, 8, 2]
        outs = [ModelStepOutput(linear_forward(m, seq[: t + 1], []).main, []) for t in range(len(seq) - 1)]
        assert batch_loss(m, [seq], MTPConfig(2, 0.9), horizon=0) == pytest.approx(
            sequence_loss(outs, seq, MTPConfig(2, 0.9)), rel=1e-12
        )

    @pytest.mark.parametrize("window", [None, 2])
    def test_batch_loss_matches_per_position_sequence_loss(self, window):
        cfg = MTPConfig(4, 0.9)
        m = LinearMTPModel.random(11, 6, 4, seed=9, context_window=window)
        seq = [3, 1, 4, 1, 5, 9, 2, 6, 5, 3]
        outs = []
        for t in range(len(seq) - 1):
            outs.append(linear_forward(m, seq[: t + 1], seq[t + 1: t + 1 + cfg.num_branches]))
        # teacher shifts for branch h are x[t+h]; masked tails drop branches whose target is missing
        for t, o in enumerate(outs):
            keep = max(0, len(seq) - 2 - t)
            o.branches = o.branches[:keep]
        assert batch_loss(m, [seq], cfg) == pytest.approx(sequence_loss(outs, seq, cfg), rel=1e-12)


class TestBranchInit:
    def test_hidden_block_copies_backbone(self):
        m = init_branches_from_backbone(LinearMTPModel.random(8, 5, 3, seed=1), seed=2)
        for g in m.G:
            assert g[:, :5].tobytes() == m.F.tobytes()
            assert np.all(np.abs(g[:, 5:]) <= 0.08)

    def test_deterministic(self):
        base = LinearMTPModel.random(8, 5, 3, seed=1)
        assert init_branches_from_backbone(base, 2).equals(init_branches_from_backbone(base, 2))
        assert not init_branches_from_backbone(base, 2).equals(init_branches_from_backbone(base, 3))

    def test_forward_after_init_matches_straight_line(self):
        m = init_branches_from_backbone(LinearMTPModel.random(16, 8, 5, seed=42), seed=43)
        m = train_stage(m, [], TrainStageConfig(Stage.FROZEN_BRANCH_ALIGNMENT, 0), MTPConfig()).model
        out = linear_forward(m, [1, 2, 3], [2, 3, 4, 5, 6])
        main, branches = straight_line_forward(m, [1, 2, 3], [2, 3, 4, 5, 6])
        np.testing.assert_allclose(out.main, main, rtol=1e-12)
        for got, exp in zip(out.branches, branches):
            np.testing.assert_allclose(got, exp, rtol=1e-12)


class TestTrainStage:
    def setup_method(self):
        self.data = cyclic_corpus(TOY_VOCAB, 16)
        self.cfg = MTPConfig(3, 0.9)
        self.model = init_branches_from_backbone(
            LinearMTPModel.random(TOY_VOCAB, 8, 3, seed=0, context_window=2), seed=1
        )

    def test_stage_one_freezes_shared_blocks(self):
        res = train_stage(self.model, self.data, TrainStageConfig(Stage.FROZEN_BRANCH_ALIGNMENT, 50, 0, 1.0), self.cfg)
        for name in ("E", "F", "U"):
            assert getattr(res.model, name).tobytes() == getattr(self.model, name).tobytes()
        assert all(a.tobytes() != b.tobytes() for a, b in zip(res.model.G, self.model.G))

    @pytest.mark.parametrize("lr", [None, 1.0])
    def test_stage_one_branch_loss_strictly_decreases(self, lr):
        stage = TrainStageConfig(Stage.FROZEN_BRANCH_ALIGNMENT, 50, 0, lr)
        res = train_stage(self.model, self.data, stage, self.cfg)
        assert len(res.branch_losses) == 50
        assert all(b < a for a, b in zip(res.branch_losses, res.branch_losses[1:]))

    def test_stage_two_updates_every_block(self):
        res = train_stage(self.model, self.data, TrainStageConfig(Stage.JOINT_CALIBRATION, 5, 0, 0.5), self.cfg)
        for name in ("E", "F", "U"):
            assert getattr(res.model, name).tobytes() != getattr(self.model, name).tobytes()

    def test_zero_steps_returns_model_unchanged(self):
        res = train_stage(self.model, self.data, TrainStageConfig(Stage.JOINT_CALIBRATION, 0), self.cfg)
        assert res.model is self.model
        assert res.losses == []

    def test_default_learning_rates(self):
        assert TrainStageConfig(Stage.FROZEN_BRANCH_ALIGNMENT, 1).learning_rate == 2e-4
        assert TrainStageConfig(Stage.JOINT_CALIBRATION, 1).learning_rate == 2e-5

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_step(self):
        with pytest.raises(TrainingDiverged) as info:
            train_stage(self.model, self.data, TrainStageConfig(Stage.JOINT_CALIBRATION, 50, 0, 1e200), self.cfg)
        assert info.value.step >= 1

    def test_minibatches_are_seeded(self):
        a = train_stage(self.model, self.data, TrainStageConfig(Stage.JOINT_CALIBRATION, 5, 3, 0.5, 2), self.cfg)
        b = train_stage(self.model, self.data, TrainStageConfig(Stage.JOINT_CALIBRATION, 5, 3, 0.5, 2), self.cfg)
        assert a.model.equals(b.model)
        assert a.losses == b.losses


def test_trained_branches_track_greedy_lookahead(trained_toy):
    """Branch h's greedy token equals the main path h steps ahead at >= 99% of positions."""
    m = trained_toy
    H = m.num_branches
    cache = DecodeCache()
    outs = m.extend(cache, [0])
    path = []
    for _ in range(400):
        y = greedy_pick(outs[-1].main)
        path.append(y)
        outs.append(m.extend(cache, [y])[0])
    hits = total = 0
    for t in range(len(path) - H):
        for h in range(1, H + 1):
            total += 1
            hits += greedy_pick(outs[t].branches[h - 1]) == path[t + h]
    assert hits / total >= 0.99
    # the main path itself follows the corpus cycle
    assert path[:16] == [(1 + i) % TOY_VOCAB for i in range(16)]
