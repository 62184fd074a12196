import numpy as np
import pytest

from memory_dml.core import partition_pairs, similarity_matrix
from memory_dml.encoder import (MlpEncoderParams, ParamGradient, backward, chain_pair_gradient, forward,
                                init_encoder, load_params, save_params)
from memory_dml.errors import DegenerateEmbeddingError
from memory_dml.weighting import WeightScheme, grad_wrt_similarity, surrogate_loss, true_loss


def _numeric_gradient(params, loss_fn, h=1e-6):
    flat = params.flatten()
    grad = np.zeros_like(flat)
    for k in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[k] += h
        minus[k] -= h
        grad[k] = (loss_fn(params.unflatten(plus)) - loss_fn(params.unflatten(minus))) / (2 * h)
    return grad


def _offset_encoder(seed):
    # Nonzero biases keep every output away from the origin
    params = init_encoder([4, 8, 3], seed=seed)
    biases = [np.full(8, 0.1), np.array([0.5, -0.4, 0.3])]
    return MlpEncoderParams(params.weights, biases)


class TestInit:

    def test_shapes(self):
        params = init_encoder([4, 8, 3], seed=0)
        assert params.layer_dims == [4, 8, 3]
        assert [w.shape for w in params.weights] == [(8, 4), (3, 8)]
        assert all(np.all(b == 0.0) for b in params.biases)

    def test_deterministic(self):
        a, b = init_encoder([16, 64, 8], seed=7), init_encoder([16, 64, 8], seed=7)
        np.testing.assert_array_equal(a.flatten(), b.flatten())
        assert a.distance(init_encoder([16, 64, 8], seed=8)) > 0.0

    def test_fan_in_scale(self):
        params = init_encoder([400, 300, 8], seed=1)
        assert np.std(params.weights[0]) == pytest.approx(1.0 / np.sqrt(400), rel=0.05)

    @pytest.mark.parametrize("dims", [[4], [4, 0, 3], [4, 8, 1]])
    def test_invalid_dims(self, dims):
        with pytest.raises(ValueError):
            init_encoder(dims, seed=0)


class TestForward:

    def test_unit_norm_output(self):
        rng = np.random.default_rng(42)
        v, _ = forward(init_encoder([5, 10, 4], seed=3), rng.normal(size=(20, 5)))
        assert v.shape == (20, 4)
        np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-12)

    def test_zero_output_is_degenerate(self):
        params = init_encoder([3, 4, 2], seed=0)
        zeroed = MlpEncoderParams([np.zeros_like(w) for w in params.weights], params.biases)
        with pytest.raises(DegenerateEmbeddingError):
            forward(zeroed, np.ones((2, 3)))

    def test_input_dim_mismatch(self):
        with pytest.raises(ValueError):
            forward(init_encoder([3, 4, 2], seed=0), np.ones((2, 5)))

    def test_relu_subgradient_at_zero(self):
        # Hidden pre-activation exactly 0 contributes no gradient
        params = MlpEncoderParams([np.array([[1.0], [0.0]]), np.array([[1.0, 1.0], [0.0, 1.0]])],
                                  [np.zeros(2), np.array([0.0, 1.0])])
        v, cache = forward(params, np.array([[2.0]]))
        grad = backward(params, cache, np.ones_like(v))
        assert grad.weights[0][1, 0] == 0.0
        assert grad.biases[0][1] == 0.0


class TestBackward:

    def test_gradient_shapes(self):
        params = init_encoder([4, 8, 3], seed=0)
        v, cache = forward(params, np.ones((6, 4)))
        grad = backward(params, cache, np.ones_like(v))
        assert isinstance(grad, ParamGradient)
        assert grad.congruent_with(params)

    def test_upstream_shape_mismatch(self):
        params = init_encoder([4, 8, 3], seed=0)
        v, cache = forward(params, np.ones((6, 4)))
        with pytest.raises(ValueError):
            backward(params, cache, np.ones((6, 2)))

    def test_normalization_jacobian_is_tangent(self):
        # A gradient along v itself does not move the normalized output
        rng = np.random.default_rng(42)
        params = init_encoder([4, 8, 3], seed=0)
        v, cache = forward(params, rng.normal(size=(6, 4)))
        grad = backward(params, cache, 3.0 * v)
        np.testing.assert_allclose(grad.flatten(), 0.0, atol=1e-12)


class TestPairGradientCheck:
    """Pair gradients chained through the manual backward pass against parameter finite differences"""

    def test_in_batch_surrogate(self):
        rng = np.random.default_rng(42)
        scheme = WeightScheme.for_loss("binomial", alpha=2.0, beta=10.0, lam=0.3)
        for trial in range(20):
            params = _offset_encoder(trial)
            inputs = rng.normal(size=(6, 4))
            labels = np.array([0, 0, 1, 1, 2, 2])
            partition = partition_pairs(labels, labels, exclude_self=True)
            v, cache = forward(params, inputs)
            weights = scheme.weight_matrix(similarity_matrix(v, v), partition)

            grad_v = chain_pair_gradient(weights, partition, v, v, 6, candidates_are_anchors=True)
            analytic = backward(params, cache, grad_v).flatten()

            def loss_fn(p):
                u, _ = forward(p, inputs)
                return surrogate_loss(scheme, u @ u.T, partition, batch_size=6, weights=weights)

            np.testing.assert_allclose(_numeric_gradient(params, loss_fn), analytic, rtol=1e-4, atol=1e-8)

    def test_memory_candidates_with_true_loss(self):
        rng = np.random.default_rng(7)
        scheme = WeightScheme.for_loss("ms", alpha=2.0, beta=10.0, lam=0.4)
        for trial in range(20):
            params = _offset_encoder(100 + trial)
            inputs = rng.normal(size=(6, 4))
            labels = np.array([0, 0, 1, 1, 2, 2])
            memory = rng.normal(size=(10, 3))
            memory /= np.linalg.norm(memory, axis=1, keepdims=True)
            memory_labels = rng.integers(0, 3, size=10)
            partition = partition_pairs(labels, memory_labels)
            v, cache = forward(params, inputs)

            sim = similarity_matrix(v, memory)
            weights = scheme.weight_matrix(sim, partition)
            np.testing.assert_allclose(
                chain_pair_gradient(weights, partition, v, memory, 6),
                grad_wrt_similarity(scheme, sim, partition, batch_size=6) @ memory,
                atol=1e-14,
            )
            analytic = backward(params, cache, chain_pair_gradient(weights, partition, v, memory, 6)).flatten()

            def loss_fn(p):
                u, _ = forward(p, inputs)
                return true_loss(scheme, u @ memory.T, partition, batch_size=6)

            np.testing.assert_allclose(_numeric_gradient(params, loss_fn), analytic, rtol=1e-4, atol=1e-8)

    def test_weight_shape_mismatch(self):
        partition = partition_pairs([0, 1], [0, 1, 1])
        with pytest.raises(ValueError):
            chain_pair_gradient(np.zeros((2, 2)), partition, np.zeros((2, 3)), np.zeros((3, 3)), 2)


class TestParamsIO:

    def test_save_and_load(self, tmp_path):
        params = init_encoder([5, 7, 3], seed=11)
        path = tmp_path / "encoder.csv"
        save_params(params, path)
        loaded = load_params(path)
        assert loaded.layer_dims == [5, 7, 3]
        np.testing.assert_array_equal(loaded.flatten(), params.flatten())

    def test_missing_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1.0,2.0\n")
        with pytest.raises(ValueError):
            load_params(path)

    def test_unflatten_wrong_length(self):
        with pytest.raises(ValueError):
            init_encoder([2, 3, 2], seed=0).unflatten(np.zeros(4))
