"""
Embeddings, pair similarities and positive/negative pair partitions
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from memory_dml.errors import DegenerateEmbeddingError


@dataclass(frozen=True)
class LabeledEmbedding:
    """A unit-norm embedding vector with its class label"""

    vector: np.ndarray
    label: int

    def __post_init__(self):
        vector = np.asarray(self.vector, dtype=np.float64)
        if vector.ndim != 1:
            raise ValueError(f"embedding must be a vector, got shape {vector.shape}")
        if abs(np.linalg.norm(vector) - 1.0) > 1e-6:
            raise ValueError("embedding is not unit-norm")
        if int(self.label) < 0:
            raise ValueError(f"label must be non-negative, got {self.label}")
        vector.setflags(write=False)
        object.__setattr__(self, "vector", vector)
        object.__setattr__(self, "label", int(self.label))


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """
    Scale a vector (or each row of a matrix) to unit Euclidean norm

    Args:
        v: Vector of shape (d,) or batch of shape (n, d)

    Returns:
        Array of the same shape with unit-norm rows

    Raises:
        DegenerateEmbeddingError: if any vector is all zeros
    """
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
        raise DegenerateEmbeddingError()
    return v / norms


def similarity_matrix(anchors: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """
    Cosine similarities between unit-norm anchors (rows) and candidates (columns)

    Args:
        anchors: Array (m_a, d) of unit vectors
        candidates: Array (m_c, d) of unit vectors

    Returns:
        Array (m_a, m_c) with entries clipped to [-1, 1]
    """
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    candidates = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if anchors.shape[1] != candidates.shape[1]:
        raise ValueError(
            f"dimension mismatch: anchors have d={anchors.shape[1]}, "
            f"candidates have d={candidates.shape[1]}"
        )
    return np.clip(anchors @ candidates.T, -1.0, 1.0)


@dataclass
class PairPartition:
    """
    Positive and negative pair masks for every anchor row

    positive_mask[i, j] is True iff j is in P_i, negative_mask[i, j] iff j is
    in N_i. self_index[i] is the excluded candidate of anchor i (or -1).
    """

    positive_mask: np.ndarray
    negative_mask: np.ndarray
    self_index: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.positive_mask.shape != self.negative_mask.shape:
            raise ValueError("positive and negative masks differ in shape")
        if np.any(self.positive_mask & self.negative_mask):
            raise ValueError("positive and negative sets overlap")

    @property
    def shape(self):
        return self.positive_mask.shape

    def positives(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.positive_mask[i])

    def negatives(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.negative_mask[i])

    def hstack(self, other: "PairPartition") -> "PairPartition":
        """Join the candidate columns of two partitions over the same anchors"""
        if self.shape[0] != other.shape[0]:
            raise ValueError("partitions cover different anchors")
        self_index = None
        if other.self_index is not None:
            self_index = np.where(other.self_index >= 0, other.self_index + self.shape[1], -1)
        elif self.self_index is not None:
            self_index = self.self_index
        return PairPartition(
            positive_mask=np.hstack([self.positive_mask, other.positive_mask]),
            negative_mask=np.hstack([self.negative_mask, other.negative_mask]),
            self_index=self_index,
        )


def partition_pairs(anchor_labels: Sequence[int],
                    candidate_labels: Sequence[int],
                    exclude_self: bool = False) -> PairPartition:
    """
    Split candidates of each anchor into positives (same label) and negatives

    Args:
        anchor_labels: Labels of the anchors
        candidate_labels: Labels of the candidates
        exclude_self: Anchor i and candidate i are the same sample; drop that pair

    Returns:
        PairPartition with one row per anchor
    """
    anchor_labels = np.asarray(anchor_labels, dtype=np.int64).reshape(-1)
    candidate_labels = np.asarray(candidate_labels, dtype=np.int64).reshape(-1)
    same = anchor_labels[:, None] == candidate_labels[None, :]
    self_index = None
    if exclude_self:
        if len(anchor_labels) != len(candidate_labels):
            raise ValueError("self exclusion needs anchors and candidates to be the same set")
        eye = np.eye(len(anchor_labels), dtype=bool)
        same = same & ~eye
        negative = ~same & ~eye
        self_index = np.arange(len(anchor_labels))
    else:
        negative = ~same
    return PairPartition(positive_mask=same, negative_mask=negative, self_index=self_index)


def histogram_edges(bins: Union[int, Sequence[float]]) -> np.ndarray:
    """
    Bin edges partitioning the similarity range [-1, 1]

    Args:
        bins: Number of uniform bins, or explicit increasing edges from -1 to 1

    Returns:
        Array of bin edges
    """
    if np.isscalar(bins):
        if int(bins) < 1:
            raise ValueError(f"need at least one bin, got {bins}")
        return np.linspace(-1.0, 1.0, int(bins) + 1)
    edges = np.asarray(bins, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")
    if edges[0] != -1.0 or edges[-1] != 1.0:
        raise ValueError("bin edges must span exactly [-1, 1]")
    return edges
