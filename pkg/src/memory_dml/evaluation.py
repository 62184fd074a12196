"""
Retrieval evaluation on a held-out, class-disjoint test set
"""

from dataclasses import dataclass
from typing import Dict, Sequence, Tuple, Union

import numpy as np

from memory_dml import config
from memory_dml.core import histogram_edges, l2_normalize, similarity_matrix
from memory_dml.encoder import MlpEncoderParams, forward


@dataclass
class RetrievalResult:
    recall_at: Dict[int, float]
    edges: np.ndarray
    pos_similarity_histogram: np.ndarray
    neg_similarity_histogram: np.ndarray

    def recall_rows(self):
        return [(k, self.recall_at[k]) for k in sorted(self.recall_at)]

    def histogram_rows(self):
        return [
            (float(lo), float(hi), int(p), int(n))
            for lo, hi, p, n in zip(self.edges[:-1], self.edges[1:],
                                    self.pos_similarity_histogram, self.neg_similarity_histogram)
        ]


def _check_labels(labels: np.ndarray):
    if len(labels) < 2:
        raise ValueError("recall needs at least 2 samples")
    values, counts = np.unique(labels, return_counts=True)
    singletons = values[counts < 2]
    if len(singletons):
        raise ValueError(f"recall is undefined for labels with a single sample: {singletons.tolist()}")


def recall_at_k(embeddings: np.ndarray, labels: Sequence[int],
                ks: Sequence[int] = config.DEFAULT_RECALL_KS) -> Dict[int, float]:
    """
    Fraction of queries with a same-label sample among their K nearest others

    Args:
        embeddings: Array (n, d); rows are l2-normalized before ranking
        labels: Labels (n,)
        ks: Cutoffs K >= 1

    Returns:
        Map K -> recall in [0, 1]
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    _check_labels(labels)
    v = l2_normalize(np.atleast_2d(embeddings))
    if len(v) != len(labels):
        raise ValueError("embeddings and labels differ in length")
    if any(int(k) < 1 for k in ks):
        raise ValueError(f"K must be positive, got {list(ks)}")

    sim = similarity_matrix(v, v)
    np.fill_diagonal(sim, -np.inf)
    # stable sort on the negated scores keeps ties in ascending candidate order
    ranking = np.argsort(-sim, axis=1, kind="stable")[:, :-1]
    matches = labels[ranking] == labels[:, None]
    first_hit = np.cumsum(matches, axis=1) > 0
    n_others = ranking.shape[1]
    return {int(k): float(np.mean(first_hit[:, min(int(k), n_others) - 1])) for k in ks}


def similarity_distributions(embeddings: np.ndarray, labels: Sequence[int],
                             bins: Union[int, Sequence[float]] = config.DEFAULT_HISTOGRAM_BINS
                             ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Histograms of positive-pair and negative-pair similarities

    Unordered pairs, self excluded.

    Returns:
        (edges, positive counts, negative counts)
    """
    edges = histogram_edges(bins)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    v = l2_normalize(np.atleast_2d(embeddings))
    sim = similarity_matrix(v, v)
    upper_i, upper_j = np.triu_indices(len(labels), k=1)
    pair_sims = sim[upper_i, upper_j]
    same = labels[upper_i] == labels[upper_j]
    positive, _ = np.histogram(pair_sims[same], bins=edges)
    negative, _ = np.histogram(pair_sims[~same], bins=edges)
    return edges, positive, negative


def evaluate_retrieval(params: MlpEncoderParams, inputs: np.ndarray, labels: Sequence[int],
                       ks: Sequence[int] = config.DEFAULT_RECALL_KS,
                       bins: Union[int, Sequence[float]] = config.DEFAULT_HISTOGRAM_BINS) -> RetrievalResult:
    """Encode a test set and compute recall@K plus similarity distributions"""
    embeddings, _ = forward(params, inputs)
    recall = recall_at_k(embeddings, labels, ks)
    edges, positive, negative = similarity_distributions(embeddings, labels, bins)
    return RetrievalResult(recall, edges, positive, negative)
