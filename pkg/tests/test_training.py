import math

import numpy as np
import pytest

from miltag.data import Bag, Dataset, SynthConfig, generate_synthetic
from miltag.embeddings import build_matrix, normalize_table
from miltag.losses import DegenerateBagError, Gradients, backward, tag_loss, _positives_for
from miltag.model import forward
from miltag.training import AdamState, TrainConfig, TrainingDiverged, adam_step, init_params, train

from conftest import random_params


def zero_grads_like(params):
    return Gradients(*[np.zeros_like(arr) for _, arr in params.trainables()])


def synth_setup(seed=6, train_size=24, **cfg_kwargs):
    train_set, test_set, table, _ = generate_synthetic(
        SynthConfig(train_size=train_size, test_size=4, seed=seed, **cfg_kwargs)
    )
    matrix, extended = build_matrix(
        normalize_table(table), train_set.seen_tags, train_set.unseen_tags
    )
    return train_set, test_set, matrix, extended


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kwargs, message",
        [
            (dict(learning_rate=-1.0), "learning_rate"),
            (dict(beta1=1.0), "beta1"),
            (dict(beta2=-0.1), "beta2"),
            (dict(epsilon=0.0), "epsilon"),
            (dict(iterations=0), "iterations"),
            (dict(pooling="median"), "pooling"),
            (dict(hidden_dim=0), "hidden_dim"),
            (dict(log_every=0), "log_every"),
        ],
    )
    def test_rejects(self, kwargs, message):
        with pytest.raises(ValueError, match=message):
            TrainConfig(**kwargs).validate()

    def test_paper_defaults(self):
        cfg = TrainConfig()
        assert cfg.learning_rate == 1e-5
        assert cfg.beta1 == 0.9
        assert cfg.beta2 == 0.999
        assert cfg.epsilon == 1e-8
        cfg.validate()


class TestInitParams:
    def test_deterministic(self, rng):
        _, _, matrix, _ = synth_setup()
        a = init_params(32, 64, 16, matrix, "mean", seed=9)
        b = init_params(32, 64, 16, matrix, "mean", seed=9)
        for (_, x), (_, y) in zip(a.trainables(), b.trainables()):
            assert np.array_equal(x, y)

    def test_biases_zero(self):
        _, _, matrix, _ = synth_setup()
        params = init_params(32, 64, 16, matrix, "mean", seed=9)
        assert np.all(params.b1 == 0.0)
        assert np.all(params.b2 == 0.0)

    def test_uniform_bounds_respected(self):
        _, _, matrix, _ = synth_setup()
        params = init_params(32, 512, 16, matrix, "mean", seed=3)
        assert np.max(np.abs(params.w1)) <= math.sqrt(6.0 / 32)
        assert np.max(np.abs(params.w2)) <= math.sqrt(6.0 / (512 + 16))

    def test_sample_mean_near_zero(self):
        # H*D = 512*32 > 1e4 entries; mean of U(-b, b) has standard error b/sqrt(3N)
        _, _, matrix, _ = synth_setup()
        params = init_params(32, 512, 16, matrix, "mean", seed=3)
        bound = math.sqrt(6.0 / 32)
        n = params.w1.size
        assert abs(params.w1.mean()) < 3.0 * bound / math.sqrt(3.0 * n)

    def test_dim_mismatch(self):
        _, _, matrix, _ = synth_setup()
        with pytest.raises(ValueError, match="embed_dim"):
            init_params(32, 64, 8, matrix, "mean", seed=0)


class TestAdamStep:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.params = random_params(rng, 3, 4, 2, 3)
        self.state = AdamState.zeros_like(self.params)
        self.cfg = TrainConfig(learning_rate=1e-5)

    def test_first_step_magnitude(self):
        # with g = 1 everywhere, bias correction makes the first step lr/(1+eps)
        grads = Gradients(*[np.ones_like(arr) for _, arr in self.params.trainables()])
        updated, state = adam_step(self.params, grads, self.state, self.cfg)
        step = self.params.w1 - updated.w1
        expected = 1e-5 / (1.0 + 1e-8)
        assert np.allclose(step, expected, rtol=1e-12)
        assert state.t == 1

    def test_zero_gradient_keeps_params(self):
        updated, state = adam_step(self.params, zero_grads_like(self.params), self.state, self.cfg)
        for (_, a), (_, b) in zip(self.params.trainables(), updated.trainables()):
            assert np.array_equal(a, b)
        assert state.t == 1

    def test_tensors_update_independently(self):
        grads = zero_grads_like(self.params)
        grads.dw1[:] = 1.0
        updated, _ = adam_step(self.params, grads, self.state, self.cfg)
        assert not np.array_equal(updated.w1, self.params.w1)
        assert np.array_equal(updated.b1, self.params.b1)
        assert np.array_equal(updated.w2, self.params.w2)
        assert np.array_equal(updated.b2, self.params.b2)

    def test_lr_zero_is_identity(self):
        cfg = TrainConfig(learning_rate=0.0)
        grads = Gradients(*[np.ones_like(arr) for _, arr in self.params.trainables()])
        updated, _ = adam_step(self.params, grads, self.state, cfg)
        for (_, a), (_, b) in zip(self.params.trainables(), updated.trainables()):
            assert np.array_equal(a, b)

    def test_non_finite_gradients_rejected(self):
        grads = zero_grads_like(self.params)
        grads.dw2[0, 0] = np.inf
        with pytest.raises(ValueError, match="non-finite"):
            adam_step(self.params, grads, self.state, self.cfg)

    def test_moments_follow_definitions(self):
        grads = Gradients(*[np.full_like(arr, 2.0) for _, arr in self.params.trainables()])
        _, state = adam_step(self.params, grads, self.state, self.cfg)
        assert np.allclose(state.m["w1"], (1 - 0.9) * 2.0)
        assert np.allclose(state.v["w1"], (1 - 0.999) * 4.0)


class TestTrain:
    def test_end_to_end_deterministic(self):
        train_set, _, matrix, _ = synth_setup()
        cfg = TrainConfig(learning_rate=1e-3, iterations=60, hidden_dim=32, log_every=20)
        pa, ca = train(train_set, matrix, cfg)
        pb, cb = train(train_set, matrix, cfg)
        assert ca == cb
        for (_, a), (_, b) in zip(pa.trainables(), pb.trainables()):
            assert np.array_equal(a, b)

    def test_single_iteration_is_one_adam_step(self):
        train_set, _, matrix, _ = synth_setup()
        cfg = TrainConfig(learning_rate=1e-3, iterations=1, hidden_dim=16, log_every=1)
        trained, curve = train(train_set, matrix, cfg)

        # replicate by hand: init, first shuffled bag, forward/backward, one step
        params = init_params(train_set.feature_dim, 16, matrix.dim, matrix, "mean", cfg.seed)
        order = np.random.default_rng([cfg.seed, 1]).permutation(len(train_set.bags))
        bag = train_set.bags[int(order[0])]
        positives = _positives_for(bag, matrix.index)
        trace = forward(params, bag)
        expected, state = adam_step(params, backward(params, trace, positives),
                                    AdamState.zeros_like(params), cfg)
        assert state.t == 1
        assert curve == [(1, tag_loss(trace.bag_scores, positives).value)]
        for (_, a), (_, b) in zip(trained.trainables(), expected.trainables()):
            assert np.array_equal(a, b)

    def test_frozen_matrix_bit_identical(self):
        train_set, _, matrix, _ = synth_setup()
        before = matrix.columns.copy()
        cfg = TrainConfig(learning_rate=1e-3, iterations=30, hidden_dim=16)
        trained, _ = train(train_set, matrix, cfg)
        assert np.array_equal(matrix.columns, before)
        assert trained.frozen is matrix

    def test_loss_curve_finite_nonnegative(self):
        train_set, _, matrix, _ = synth_setup()
        cfg = TrainConfig(learning_rate=1e-3, iterations=50, hidden_dim=16, log_every=10)
        _, curve = train(train_set, matrix, cfg)
        assert len(curve) == 5
        assert all(np.isfinite(v) and v >= 0.0 for _, v in curve)

    def test_degenerate_bags_do_not_consume_iterations(self):
        train_set, _, matrix, _ = synth_setup(train_size=6)
        # a bag tagged with every seen tag has no ranking pair and must be skipped
        degenerate = Bag("deg", np.zeros((train_set.feature_dim, 2)), train_set.seen_tags)
        bags = train_set.bags + [degenerate]
        ds = Dataset(bags, train_set.seen_tags, train_set.unseen_tags, split="train")
        cfg = TrainConfig(learning_rate=1e-3, iterations=len(bags), hidden_dim=8, log_every=100)
        _, curve = train(ds, matrix, cfg)
        assert curve[-1][0] == len(bags)  # all requested iterations were real steps

    def test_all_degenerate_raises(self):
        train_set, _, matrix, _ = synth_setup(train_size=2)
        bags = [
            Bag(f"deg{i}", np.zeros((train_set.feature_dim, 2)), train_set.seen_tags)
            for i in range(3)
        ]
        ds = Dataset(bags, train_set.seen_tags, train_set.unseen_tags, split="train")
        cfg = TrainConfig(learning_rate=1e-3, iterations=5, hidden_dim=8)
        with pytest.raises(DegenerateBagError, match="no trainable bags"):
            train(ds, matrix, cfg)

    def test_non_finite_loss_names_bag(self, monkeypatch):
        train_set, _, matrix, _ = synth_setup(train_size=4)
        from miltag.losses import LossValue
        import miltag.training as training_module

        monkeypatch.setattr(
            training_module, "tag_loss", lambda scores, positives: LossValue(float("nan"), 1)
        )
        cfg = TrainConfig(learning_rate=1e-3, iterations=20, hidden_dim=8, seed=1)
        with pytest.raises(TrainingDiverged, match="non-finite loss at iteration 1 on bag"):
            train(train_set, matrix, cfg)

    def test_matrix_must_match_seen_tags(self):
        train_set, _, _, extended = synth_setup()
        cfg = TrainConfig(iterations=1)
        with pytest.raises(ValueError, match="seen tags"):
            train(train_set, extended, cfg)

    def test_checkpoints_written_and_reproducible(self, tmp_path):
        train_set, _, matrix, _ = synth_setup()
        cfg = TrainConfig(learning_rate=1e-3, iterations=20, hidden_dim=8,
                          checkpoint_every=10, log_every=10)
        train(train_set, matrix, cfg, checkpoint_dir=tmp_path / "a")
        train(train_set, matrix, cfg, checkpoint_dir=tmp_path / "b")
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == ["checkpoint_0000010.ckpt", "checkpoint_0000020.ckpt"]
        for name in names:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
