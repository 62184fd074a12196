"""
Small MLP encoder with l2-normalized output and a hand-written backward pass
"""

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from memory_dml.core import PairPartition
from memory_dml.errors import DegenerateEmbeddingError
from memory_dml.weighting import signed_weights


@dataclass
class _LayerStack:
    """Per-layer weight matrices (fan_out x fan_in) and bias vectors"""

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @property
    def layer_dims(self) -> List[int]:
        if not self.weights:
            return []
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def arrays(self) -> List[np.ndarray]:
        """Parameters in layer-major order: W_1, b_1, W_2, b_2, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays()])

    def congruent_with(self, other: "_LayerStack") -> bool:
        mine, theirs = self.arrays(), other.arrays()
        return len(mine) == len(theirs) and all(a.shape == b.shape for a, b in zip(mine, theirs))

    def _check_congruent(self, other: "_LayerStack"):
        if not self.congruent_with(other):
            raise ValueError(f"shape mismatch: {self.layer_dims} vs {other.layer_dims}")


@dataclass
class MlpEncoderParams(_LayerStack):
    """Encoder parameters: rectifier hidden layers, identity output, then l2 normalization"""

    def copy(self) -> "MlpEncoderParams":
        return MlpEncoderParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def unflatten(self, flat: np.ndarray) -> "MlpEncoderParams":
        """New parameters of this shape filled from a layer-major flat vector"""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != sum(a.size for a in self.arrays()):
            raise ValueError("flat parameter vector has the wrong length")
        weights, biases, offset = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(flat[offset:offset + w.size].reshape(w.shape))
            offset += w.size
            biases.append(flat[offset:offset + b.size].copy())
            offset += b.size
        return MlpEncoderParams(weights, biases)

    def distance(self, other: "MlpEncoderParams") -> float:
        self._check_congruent(other)
        return float(np.linalg.norm(self.flatten() - other.flatten()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass
class ParamGradient(_LayerStack):
    """Gradient of a scalar loss w.r.t. every encoder parameter"""

    @classmethod
    def zeros_like(cls, params: MlpEncoderParams) -> "ParamGradient":
        return cls([np.zeros_like(w) for w in params.weights], [np.zeros_like(b) for b in params.biases])


def init_encoder(layer_dims: Sequence[int], seed: Union[int, Sequence[int]]) -> MlpEncoderParams:
    """
    Initialize an encoder deterministically

    Args:
        layer_dims: [d_in, d_h..., d_e]
        seed: Random seed, or a (seed, stream) key

    Returns:
        Parameters with weights ~ N(0, 1/fan_in) and zero biases
    """
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ValueError(f"need at least input and embedding dims, got {list(layer_dims)}")
    if any(d < 1 for d in dims):
        raise ValueError(f"layer dims must be positive, got {dims}")
    if dims[-1] < 2:
        raise ValueError("embedding dimension must be at least 2")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpEncoderParams(weights, biases)


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre_activations: List[np.ndarray]  # z_l for every layer; the last one is u
    activations: List[np.ndarray]      # layer inputs: x, relu(z_1), ...
    norms: np.ndarray                  # ||u|| per sample, shape (n, 1)
    embeddings: np.ndarray


def forward(params: MlpEncoderParams, inputs: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    """
    Encode a batch

    Args:
        params: Encoder parameters
        inputs: Array (n, d_in)

    Returns:
        (unit-norm embeddings (n, d_e), cache for backward)
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if x.shape[1] != params.layer_dims[0]:
        raise ValueError(f"input dim {x.shape[1]} does not match encoder d_in={params.layer_dims[0]}")
    activations, pre_activations = [x], []
    a = x
    last = len(params.weights) - 1
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        pre_activations.append(z)
        if layer < last:
            a = np.maximum(z, 0.0)
            activations.append(a)
    u = pre_activations[-1]
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateEmbeddingError()
    v = u / norms
    return v, ForwardCache(x, pre_activations, activations, norms, v)


def backward(params: MlpEncoderParams, cache: ForwardCache, grad_wrt_embeddings: np.ndarray) -> ParamGradient:
    """
    Backpropagate an upstream gradient w.r.t. normalized embeddings

    Args:
        params: Parameters used in the forward call
        cache: Cache from that forward call
        grad_wrt_embeddings: dL/dv, shape (n, d_e)

    Returns:
        ParamGradient
    """
    g = np.asarray(grad_wrt_embeddings, dtype=np.float64)
    v = cache.embeddings
    if g.shape != v.shape:
        raise ValueError(f"upstream gradient shape {g.shape} does not match embeddings {v.shape}")
    # d(u/||u||)/du = (I - v v^T) / ||u||
    delta = (g - v * np.sum(g * v, axis=1, keepdims=True)) / cache.norms
    grad = ParamGradient.zeros_like(params)
    for layer in range(len(params.weights) - 1, -1, -1):
        grad.weights[layer] = delta.T @ cache.activations[layer]
        grad.biases[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ params.weights[layer]) * (cache.pre_activations[layer - 1] > 0.0)
    return grad


def chain_pair_gradient(weights: np.ndarray, partition: PairPartition,
                        anchor_embeddings: np.ndarray, candidate_embeddings: np.ndarray,
                        batch_size: int, candidates_are_anchors: bool = False) -> np.ndarray:
    """
    Gradient of the GPW surrogate w.r.t. anchor embeddings

    Args:
        weights: Weight magnitudes (m_a, m_c), treated as constants
        partition: Pair partition
        anchor_embeddings: (m_a, d_e)
        candidate_embeddings: (m_c, d_e); constants (stop-gradient) unless
            candidates_are_anchors
        batch_size: m
        candidates_are_anchors: In-batch pairs; candidates are the anchors
            themselves, so each sample also collects its candidate-side term

    Returns:
        dL/dv for every anchor, shape (m_a, d_e)
    """
    if weights.shape != partition.shape:
        raise ValueError("weights and partition differ in shape")
    if weights.shape != (len(anchor_embeddings), len(candidate_embeddings)):
        raise ValueError("weights do not match the number of anchors and candidates")
    coefficients = signed_weights(weights, partition) / batch_size
    grad = coefficients @ candidate_embeddings
    if candidates_are_anchors:
        if len(anchor_embeddings) != len(candidate_embeddings):
            raise ValueError("in-batch pairs need a square weight matrix")
        grad = grad + coefficients.T @ anchor_embeddings
    return grad


def save_params(params: MlpEncoderParams, path) -> None:
    """Write parameters as CSV: one row per array, layer-major, row-major within a matrix"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["# layer_dims"] + params.layer_dims)
        for array in params.arrays():
            writer.writerow([repr(float(x)) for x in array.reshape(-1)])


def load_params(path) -> MlpEncoderParams:
    """Read parameters written by save_params"""
    with open(path, "r", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][0] != "# layer_dims":
        raise ValueError(f"{path}: missing layer_dims header")
    dims = [int(d) for d in rows[0][1:]]
    template = init_encoder(dims, seed=0)
    if len(rows) - 1 != len(template.arrays()):
        raise ValueError(f"{path}: expected {len(template.arrays())} parameter rows, found {len(rows) - 1}")
    flat = np.array([float(x) for row in rows[1:] for x in row], dtype=np.float64)
    return template.unflatten(flat)
