import numpy as np
import pytest

from memory_dml.data import generate_clusters, split_by_class
from memory_dml.encoder import MlpEncoderParams, ParamGradient, init_encoder
from memory_dml.errors import ConfigError, DatasetError, TrainingDivergedError
from memory_dml.memory import feature_drift
from memory_dml.trainer import (AdamState, TrainConfig, adam_step, apply_point, grid_points, grid_run,
                                is_collapsed, learning_rate_at, make_probe, sample_batch, train, warm_start)
from memory_dml.weighting import WeightScheme


@pytest.fixture(scope="module")
def datasets():
    return split_by_class(generate_clusters(8, 12, 6, 1.0, 0.1, seed=0), 0.5, seed=0)


def _small_config(**overrides):
    settings = dict(
        mode="memory", momentum=0.9, classes_per_batch=4, samples_per_class=2, iterations=12,
        hidden_dims=(8,), embedding_dim=4, memory_size=24, probe_size=16, drift_interval=4,
        scheme=WeightScheme.for_loss("binomial", alpha=2.0, beta=10.0, lam=0.5),
    )
    settings.update(overrides)
    return TrainConfig(**settings)


class TestTrainConfig:

    def test_batch_size_and_default_capacity(self):
        cfg = TrainConfig(classes_per_batch=8, samples_per_class=4)
        assert cfg.batch_size == 32
        assert cfg.memory_capacity == 16 * 32

    @pytest.mark.parametrize("kwargs", [
        dict(samples_per_class=1),
        dict(mode="queue"),
        dict(momentum=1.5),
        dict(iterations=-1),
        dict(enqueue_encoder="other"),
        dict(adam_betas=(0.9, 1.0)),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_mode_labels(self):
        assert TrainConfig(mode="memory", momentum=0.0).mode_label() == "memory (XBM-equivalent)"
        assert "s-MoCo" in TrainConfig(mode="memory", momentum=0.999).mode_label()
        assert TrainConfig(mode="minibatch").mode_label() == "minibatch"


class TestSampleBatch:

    def test_p_by_k_structure(self, datasets):
        train_set, _ = datasets
        inputs, labels = sample_batch(train_set, 2, 2, np.random.default_rng(0))
        assert inputs.shape == (4, 6)
        values, counts = np.unique(labels, return_counts=True)
        assert len(values) == 2 and np.all(counts == 2)

    def test_deterministic(self, datasets):
        train_set, _ = datasets
        a = sample_batch(train_set, 3, 4, np.random.default_rng(5))
        b = sample_batch(train_set, 3, 4, np.random.default_rng(5))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_too_many_classes(self, datasets):
        train_set, _ = datasets
        with pytest.raises(DatasetError):
            sample_batch(train_set, train_set.num_classes + 1, 2, np.random.default_rng(0))

    def test_too_many_samples(self, datasets):
        train_set, _ = datasets
        with pytest.raises(DatasetError):
            sample_batch(train_set, 2, 13, np.random.default_rng(0))


class TestAdamStep:

    def test_zero_gradient_no_decay_is_identity(self):
        params = init_encoder([3, 4, 2], seed=0)
        new, state = adam_step(params, ParamGradient.zeros_like(params), AdamState.zeros_like(params),
                               lr=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(new.flatten(), params.flatten())
        assert state.step == 1

    def test_first_step_is_signed_learning_rate(self):
        rng = np.random.default_rng(42)
        params = init_encoder([3, 4, 2], seed=0)
        grads = params.unflatten(rng.normal(size=params.flatten().size))
        grads = ParamGradient(grads.weights, grads.biases)
        new, _ = adam_step(params, grads, AdamState.zeros_like(params), lr=1e-3, eps=1e-8, weight_decay=0.0)
        np.testing.assert_allclose(new.flatten() - params.flatten(), -1e-3 * np.sign(grads.flatten()), rtol=1e-4)

    def test_weight_decay_is_added_to_gradient(self):
        params = init_encoder([3, 4, 2], seed=0)
        new, _ = adam_step(params, ParamGradient.zeros_like(params), AdamState.zeros_like(params),
                           lr=1e-3, weight_decay=5e-4)
        moved = new.flatten() - params.flatten()
        nonzero = params.flatten() != 0.0
        np.testing.assert_allclose(moved[nonzero], -1e-3 * np.sign(params.flatten()[nonzero]), rtol=1e-3)

    def test_inputs_are_not_modified(self):
        params = init_encoder([3, 4, 2], seed=0)
        before = params.flatten().copy()
        state = AdamState.zeros_like(params)
        adam_step(params, ParamGradient([np.ones_like(w) for w in params.weights],
                                        [np.ones_like(b) for b in params.biases]), state)
        np.testing.assert_array_equal(params.flatten(), before)
        assert state.step == 0

    def test_non_finite_gradient(self):
        params = init_encoder([3, 4, 2], seed=0)
        grads = ParamGradient.zeros_like(params)
        grads.weights[0][0, 0] = np.nan
        with pytest.raises(TrainingDivergedError, match="training diverged at iteration 7"):
            adam_step(params, grads, AdamState.zeros_like(params), iteration=7)


class TestLearningRate:

    def test_constant_by_default(self):
        cfg = TrainConfig(iterations=100, learning_rate=0.01)
        assert learning_rate_at(cfg, 99) == 0.01

    def test_step_decay(self):
        cfg = TrainConfig(iterations=100, learning_rate=0.01, lr_decay=True)
        assert learning_rate_at(cfg, 49) == pytest.approx(0.01)
        assert learning_rate_at(cfg, 50) == pytest.approx(0.001)
        assert learning_rate_at(cfg, 80) == pytest.approx(0.0001)


class TestTrain:

    def test_zero_iterations(self, datasets):
        train_set, _ = datasets
        encoder = init_encoder([6, 8, 4], seed=3)
        params, record = train(_small_config(iterations=0), train_set, encoder=encoder)
        np.testing.assert_array_equal(params.flatten(), encoder.flatten())
        assert len(record) == 0 and list(record.rows()) == []

    def test_record_shape(self, datasets):
        train_set, test_set = datasets
        _, record = train(_small_config(eval_interval=6), train_set, test_set=test_set)
        assert record.iterations == list(range(12))
        assert sorted(record.feature_drift) == [0, 4, 8]
        assert record.feature_drift[0] == 0.0
        assert sorted(record.recall_history) == [5, 11]
        assert all(np.isfinite(record.losses))
        assert 0.0 <= record.final_recall_at_1 <= 1.0
        rows = list(record.rows())
        assert rows[0][3] == "0.0" and rows[1][3] == ""

    @pytest.mark.parametrize("mode", ["minibatch", "memory"])
    def test_deterministic(self, datasets, mode):
        train_set, _ = datasets
        params_a, record_a = train(_small_config(mode=mode), train_set)
        params_b, record_b = train(_small_config(mode=mode), train_set)
        assert record_a == record_b
        np.testing.assert_array_equal(params_a.flatten(), params_b.flatten())

    def test_modes_differ_from_the_first_step(self, datasets):
        train_set, _ = datasets
        _, minibatch = train(_small_config(mode="minibatch", iterations=1), train_set)
        _, memory = train(_small_config(mode="memory", momentum=0.0, iterations=1), train_set)
        assert minibatch.losses[0] != memory.losses[0]

    def test_xbm_equivalence(self, datasets):
        train_set, _ = datasets
        params_a, record_a = train(_small_config(momentum=0.0, enqueue_encoder="momentum"), train_set)
        params_b, record_b = train(_small_config(momentum=0.0, enqueue_encoder="main"), train_set)
        assert record_a == record_b
        np.testing.assert_array_equal(params_a.flatten(), params_b.flatten())

    def test_in_batch_pairs_change_the_run(self, datasets):
        train_set, _ = datasets
        _, plain = train(_small_config(iterations=3), train_set)
        _, mixed = train(_small_config(iterations=3, in_batch_pairs=True), train_set)
        assert plain.losses != mixed.losses

    def test_in_batch_pairs_count_batch_hard_negatives(self, datasets):
        # Same init and batch at the first step, so the combined count splits exactly
        train_set, _ = datasets
        _, batch_only = train(_small_config(mode="minibatch", iterations=1, hard_neg_threshold=-1.0), train_set)
        _, plain = train(_small_config(iterations=1, hard_neg_threshold=-1.0), train_set)
        _, mixed = train(_small_config(iterations=1, hard_neg_threshold=-1.0, in_batch_pairs=True), train_set)
        assert batch_only.hard_negatives[0] == 8 * 6
        assert mixed.hard_negatives[0] == plain.hard_negatives[0] + batch_only.hard_negatives[0]

    def test_shared_drift_inputs_keep_runs_independent(self, datasets):
        train_set, _ = datasets
        cfg = _small_config()
        probe = make_probe(cfg, train_set)
        _, shared_a = train(cfg, train_set, probe=probe)
        _, shared_b = train(_small_config(momentum=0.0), train_set, probe=probe)
        _, own = train(_small_config(momentum=0.0), train_set)
        assert probe.snapshots == {}
        assert shared_b.feature_drift == own.feature_drift
        assert shared_a.feature_drift != shared_b.feature_drift

    def test_drift_matches_parameter_snapshots(self, datasets):
        train_set, _ = datasets
        probe = make_probe(_small_config(), train_set)
        start, _ = train(_small_config(mode="minibatch", iterations=4), train_set)
        end, _ = train(_small_config(mode="minibatch", iterations=8), train_set)
        _, record = train(_small_config(mode="minibatch", iterations=9), train_set)
        assert record.feature_drift[8] == pytest.approx(feature_drift(probe, end, start), rel=1e-12)

    def test_divergence_carries_partial_record(self, datasets):
        train_set, _ = datasets
        encoder = init_encoder([6, 8, 4], seed=0)
        broken = MlpEncoderParams([w.copy() for w in encoder.weights], [b.copy() for b in encoder.biases])
        broken.biases[-1][:] = np.nan
        with pytest.raises(TrainingDivergedError) as excinfo:
            train(_small_config(), train_set, encoder=broken)
        assert excinfo.value.iteration == 0
        assert excinfo.value.record is not None and len(excinfo.value.record) == 0

    def test_encoder_dimension_mismatch(self, datasets):
        train_set, _ = datasets
        with pytest.raises(ValueError):
            train(_small_config(), train_set, encoder=init_encoder([5, 8, 4], seed=0))


class TestCollapse:

    def test_threshold_is_twice_chance(self):
        assert is_collapsed(0.24, 8)
        assert not is_collapsed(0.25, 8)
        assert not is_collapsed(None, 8)


class TestGrid:

    def test_points_in_grid_order(self):
        points = grid_points({"a": [0.3, 0.5], "b": [0.3, 0.5]})
        assert points == [{"a": 0.3, "b": 0.3}, {"a": 0.3, "b": 0.5}, {"a": 0.5, "b": 0.3}, {"a": 0.5, "b": 0.5}]

    def test_unknown_axis(self):
        with pytest.raises(ConfigError):
            grid_points({"gamma": [1.0]})

    def test_apply_point_sets_axes_together(self):
        base = TrainConfig(scheme=WeightScheme.hll(0.3, 0.3))
        cfg = apply_point(base, {"a": 0.5, "b": 0.5, "momentum": 0.5})
        assert (cfg.scheme.negative.a, cfg.scheme.negative.b, cfg.momentum) == (0.5, 0.5, 0.5)

    def test_single_point_matches_train(self, datasets):
        train_set, test_set = datasets
        base = _small_config()
        rows = grid_run(base, {"alpha": [2.0]}, train_set, test_set)
        _, record = train(base, train_set, test_set=test_set)
        assert len(rows) == 1
        assert rows[0].recall_at_1 == record.final_recall_at_1
        assert rows[0].status in ("ok", "collapsed")

    def test_hll_invalid_points(self, datasets):
        train_set, test_set = datasets
        base = _small_config(iterations=2, scheme=WeightScheme.hll(0.3, 0.5))
        rows = grid_run(base, {"a": [0.3, 0.5], "b": [0.3, 0.5]}, train_set, test_set, jobs=2)
        assert [row.status == "invalid" for row in rows] == [False, False, True, False]
        assert rows[2].point == {"a": 0.5, "b": 0.3} and rows[2].recall_at_1 is None

    def test_momentum_axis_runs_independently(self, datasets):
        train_set, test_set = datasets
        rows = grid_run(_small_config(iterations=4), {"momentum": [0.0, 0.999]}, train_set, test_set, jobs=2)
        assert [row.point["momentum"] for row in rows] == [0.0, 0.999]
        assert all(row.recall_at_1 is not None for row in rows)


class TestWarmStart:

    def test_matches_minibatch_training(self, datasets):
        train_set, _ = datasets
        warm = warm_start(_small_config(), train_set, 5)
        params, _ = train(_small_config(mode="minibatch", iterations=5), train_set)
        np.testing.assert_array_equal(warm.flatten(), params.flatten())

    def test_runs_continue_from_warm_encoder(self, datasets):
        train_set, _ = datasets
        warm = warm_start(_small_config(), train_set, 5)
        params, record = train(_small_config(iterations=0), train_set, encoder=warm)
        np.testing.assert_array_equal(params.flatten(), warm.flatten())
        _, cold = train(_small_config(iterations=1), train_set)
        _, resumed = train(_small_config(iterations=1), train_set, encoder=warm)
        assert cold.losses != resumed.losses

    def test_negative_iterations(self, datasets):
        train_set, _ = datasets
        with pytest.raises(ConfigError):
            warm_start(_small_config(), train_set, -1)
