"""
Embedding memory with a momentum-updated memory encoder

One mechanism covers XBM (momentum 0) and supervised MoCo (momentum > 0).
"""

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
from loguru import logger

from memory_dml.core import PairPartition, partition_pairs, similarity_matrix
from memory_dml.encoder import MlpEncoderParams, forward
from memory_dml.errors import MemoryNotWarmedError


class MemoryBank:
    """FIFO ring of labeled embeddings plus the momentum encoder that fills it"""

    def __init__(self, capacity: int, momentum: float, main_params: MlpEncoderParams):
        """
        Initialize memory

        Args:
            capacity: Maximum number of stored embeddings (K_mem)
            momentum: Momentum coefficient m in [0, 1]
            main_params: Main encoder; the memory encoder starts as a copy of it
        """
        if capacity < 1:
            raise ValueError(f"memory capacity must be positive, got {capacity}")
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
        self.capacity = int(capacity)
        self.momentum = float(momentum)
        self.momentum_params = main_params.copy()
        embed_dim = main_params.layer_dims[-1]
        self.embed_queue = np.zeros((self.capacity, embed_dim))
        self.label_queue = np.zeros(self.capacity, dtype=np.int64)
        self.queue_ptr = 0
        self.size = 0
        logger.debug(f"Memory bank: capacity={self.capacity}, momentum={self.momentum}, dim={embed_dim}")

    def __len__(self) -> int:
        return self.size

    @property
    def is_full(self) -> bool:
        return self.size == self.capacity

    def get(self) -> Tuple[np.ndarray, np.ndarray]:
        """Stored (embeddings, labels), oldest first"""
        if not self.is_full:
            return self.embed_queue[:self.size].copy(), self.label_queue[:self.size].copy()
        order = np.roll(np.arange(self.capacity), -self.queue_ptr)
        return self.embed_queue[order], self.label_queue[order]

    def momentum_update(self, main_params: MlpEncoderParams) -> "MemoryBank":
        """theta_M <- m * theta_M + (1 - m) * theta, elementwise"""
        if not self.momentum_params.congruent_with(main_params):
            raise ValueError(
                f"shape mismatch: memory encoder {self.momentum_params.layer_dims} "
                f"vs main encoder {main_params.layer_dims}"
            )
        m = self.momentum
        for mine, theirs in zip(self.momentum_params.arrays(), main_params.arrays()):
            mine *= m
            mine += (1.0 - m) * theirs
        return self

    def enqueue_embeddings(self, embeddings: np.ndarray, labels: np.ndarray) -> "MemoryBank":
        """Append already-normalized embeddings, evicting the oldest entries"""
        embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if embeddings.shape[1] != self.embed_queue.shape[1]:
            raise ValueError(f"embedding dim {embeddings.shape[1]} does not match memory dim {self.embed_queue.shape[1]}")
        if len(embeddings) != len(labels):
            raise ValueError("embeddings and labels differ in length")
        if len(embeddings) > self.capacity:
            embeddings, labels = embeddings[-self.capacity:], labels[-self.capacity:]
        n = len(embeddings)
        slots = (self.queue_ptr + np.arange(n)) % self.capacity
        self.embed_queue[slots] = embeddings
        self.label_queue[slots] = labels
        self.queue_ptr = (self.queue_ptr + n) % self.capacity
        self.size = min(self.size + n, self.capacity)
        return self

    def enqueue_batch(self, inputs: np.ndarray, labels: np.ndarray) -> "MemoryBank":
        """Encode raw inputs with the memory encoder and enqueue them"""
        embeddings, _ = forward(self.momentum_params, inputs)
        return self.enqueue_embeddings(embeddings, labels)

    def mine_pairs(self, anchor_embeddings: np.ndarray, anchor_labels: np.ndarray) -> Tuple[np.ndarray, PairPartition]:
        """
        Pair every anchor with every memory entry

        Args:
            anchor_embeddings: Unit-norm anchors (m, d_e)
            anchor_labels: Anchor labels (m,)

        Returns:
            (similarity matrix (m, size), partition by label equality)
        """
        if self.size == 0:
            raise MemoryNotWarmedError()
        embeddings, labels = self.get()
        sim = similarity_matrix(anchor_embeddings, embeddings)
        return sim, partition_pairs(anchor_labels, labels, exclude_self=False)


@dataclass
class DriftProbe:
    """Fixed raw inputs whose embeddings are tracked across training"""

    probe_inputs: np.ndarray
    snapshots: Dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        inputs = np.array(self.probe_inputs, dtype=np.float64, copy=True)
        if inputs.ndim != 2 or len(inputs) == 0:
            raise ValueError("probe needs a non-empty (n, d_in) input array")
        inputs.setflags(write=False)
        self.probe_inputs = inputs

    def record(self, iteration: int, params: MlpEncoderParams) -> np.ndarray:
        embeddings, _ = forward(params, self.probe_inputs)
        self.snapshots[iteration] = embeddings
        return embeddings

    def drift_between(self, iteration_a: int, iteration_b: int) -> float:
        """Drift between two recorded iterations"""
        return _mean_squared_distance(self.snapshots[iteration_a], self.snapshots[iteration_b])


def _mean_squared_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.sum((a - b) ** 2, axis=1)))


def feature_drift(probe: DriftProbe, params_t: MlpEncoderParams, params_t_minus_delta: MlpEncoderParams) -> float:
    """
    Mean squared distance between probe embeddings under two parameter snapshots

    Args:
        probe: Drift probe
        params_t: Parameters at iteration t
        params_t_minus_delta: Parameters at iteration t - delta

    Returns:
        Drift in [0, 4]
    """
    current, _ = forward(params_t, probe.probe_inputs)
    previous, _ = forward(params_t_minus_delta, probe.probe_inputs)
    return _mean_squared_distance(current, previous)


def hard_negative_count(sim: np.ndarray, partition: PairPartition, threshold: float) -> int:
    """Number of negative pairs with similarity strictly above the threshold"""
    if not -1.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [-1, 1], got {threshold}")
    return int(np.count_nonzero(partition.negative_mask & (np.asarray(sim) > threshold)))
