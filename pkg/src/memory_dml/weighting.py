"""
General pair weighting

Each pair-based loss is decomposed into a positive half and a negative half,
both computed directly from pair similarities. Weights are stored as
nonnegative magnitudes; polarity comes from the pair partition (the loss
gradient w.r.t. S_ij is +w_ij/m for negatives and -w_ij/m for positives).
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from memory_dml import config
from memory_dml.core import PairPartition, histogram_edges
from memory_dml.errors import SchemeError

POSITIVE_FAMILIES = ("contrastive", "binomial", "ms", "infonce", "hll")
NEGATIVE_FAMILIES = ("contrastive", "binomial", "ms", "infonce", "hll", "split")
TRUE_LOSS_FAMILIES = ("contrastive", "binomial", "ms", "infonce")

# N-pair loss is InfoNCE at temperature 1
FAMILY_ALIASES = {"npair": "infonce", "binominal": "binomial", "multi-similarity": "ms"}


def _canonical_family(family: str):
    name = family.strip().lower()
    return FAMILY_ALIASES.get(name, name), name == "npair"


def _check_lambda(lam: float):
    if not -1.0 <= lam <= 1.0:
        raise SchemeError(f"lambda must lie in [-1, 1], got {lam}")


def _check_positive(name: str, value: Optional[float]):
    if value is None or not value > 0:
        raise SchemeError(f"{name} must be > 0, got {value}")


@dataclass(frozen=True)
class PositiveHalf:
    """Positive-pair weighting: contrastive, binomial(alpha, lambda), ms(alpha, lambda), infonce(tau) or hll"""

    family: str = config.DEFAULT_POSITIVE_FAMILY
    alpha: float = config.DEFAULT_ALPHA
    lam: float = config.DEFAULT_LAMBDA
    tau: float = config.DEFAULT_TAU

    def __post_init__(self):
        family, npair = _canonical_family(self.family)
        if family not in POSITIVE_FAMILIES:
            raise SchemeError(f"unknown positive weighting '{self.family}'")
        object.__setattr__(self, "family", family)
        if npair:
            object.__setattr__(self, "tau", 1.0)
        if family in ("binomial", "ms"):
            _check_positive("alpha", self.alpha)
            _check_lambda(self.lam)
        elif family == "infonce":
            _check_positive("tau", self.tau)

    def describe(self) -> str:
        if self.family in ("binomial", "ms"):
            return f"{self.family}(alpha={self.alpha:g}, lambda={self.lam:g})"
        if self.family == "infonce":
            return f"infonce(tau={self.tau:g})"
        return self.family


@dataclass(frozen=True)
class NegativeHalf:
    """
    Negative-pair weighting

    contrastive(lambda), binomial(beta, lambda), ms(beta, lambda), infonce(tau),
    hll(a, b), or split(lambda, easy_beta, hard_beta) which weights easy
    (S < lambda) and hard negatives separately.
    """

    family: str = config.DEFAULT_NEGATIVE_FAMILY
    beta: float = config.DEFAULT_BETA
    lam: float = config.DEFAULT_LAMBDA
    tau: float = config.DEFAULT_TAU
    a: float = config.DEFAULT_HLL_A
    b: float = config.DEFAULT_HLL_B
    easy_beta: Optional[float] = None
    hard_beta: Optional[float] = None

    def __post_init__(self):
        family, npair = _canonical_family(self.family)
        if family not in NEGATIVE_FAMILIES:
            raise SchemeError(f"unknown negative weighting '{self.family}'")
        object.__setattr__(self, "family", family)
        if npair:
            object.__setattr__(self, "tau", 1.0)
        if family in ("contrastive", "binomial", "ms", "split"):
            _check_lambda(self.lam)
        if family in ("binomial", "ms"):
            _check_positive("beta", self.beta)
        elif family == "infonce":
            _check_positive("tau", self.tau)
        elif family == "hll":
            _check_lambda(self.a)
            _check_lambda(self.b)
            if self.b < self.a:
                raise SchemeError(f"hll needs b >= a, got a={self.a}, b={self.b}")
        elif family == "split":
            if self.easy_beta is not None:
                _check_positive("easy_beta", self.easy_beta)
            if self.hard_beta is not None:
                _check_positive("hard_beta", self.hard_beta)

    def describe(self) -> str:
        if self.family == "contrastive":
            return f"contrastive(lambda={self.lam:g})"
        if self.family in ("binomial", "ms"):
            return f"{self.family}(beta={self.beta:g}, lambda={self.lam:g})"
        if self.family == "infonce":
            return f"infonce(tau={self.tau:g})"
        if self.family == "hll":
            return f"hll(a={self.a:g}, b={self.b:g})"
        return f"split(lambda={self.lam:g}, easy_beta={self.easy_beta}, hard_beta={self.hard_beta})"


# ---------------------------------------------------------------------------
# Numerically stable building blocks
# ---------------------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def _masked_logsumexp(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise log(sum(exp(values))) over masked entries; -inf for empty rows"""
    masked = np.where(mask, values, -np.inf)
    peak = masked.max(axis=1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    with np.errstate(divide="ignore"):
        return peak[:, 0] + np.log(np.exp(masked - peak).sum(axis=1))


# ---------------------------------------------------------------------------
# Vectorised halves over a similarity matrix
# ---------------------------------------------------------------------------

def positive_weights(half: PositiveHalf, sim: np.ndarray, partition: PairPartition) -> np.ndarray:
    """
    Positive weight magnitudes for every pair in the matrix

    Args:
        half: Positive weighting
        sim: Similarity matrix (m_a, m_c)
        partition: Pair partition of the same shape

    Returns:
        Matrix of magnitudes, zero outside P_i
    """
    pos, neg = partition.positive_mask, partition.negative_mask
    if sim.size == 0:
        return np.zeros_like(sim)
    if half.family in ("contrastive", "hll"):
        w = np.ones_like(sim)
    elif half.family == "binomial":
        w = _sigmoid(half.alpha * (half.lam - sim))
    elif half.family == "ms":
        z = half.alpha * (half.lam - sim)
        log_denominator = np.logaddexp(0.0, _masked_logsumexp(z, pos))
        w = np.exp(np.minimum(z - log_denominator[:, None], 0.0))
    else:
        # 1 - softmax(S_ij) over {j} + N_i, written as a sigmoid
        logits = sim / half.tau
        lse_negatives = _masked_logsumexp(logits, neg)
        w = _sigmoid(lse_negatives[:, None] - logits) / half.tau
    return np.where(pos, w, 0.0)


def negative_weights(half: NegativeHalf, sim: np.ndarray, partition: PairPartition) -> np.ndarray:
    """
    Negative weight magnitudes for every pair in the matrix

    Args:
        half: Negative weighting
        sim: Similarity matrix (m_a, m_c)
        partition: Pair partition of the same shape

    Returns:
        Matrix of magnitudes, zero outside N_i
    """
    pos, neg = partition.positive_mask, partition.negative_mask
    if sim.size == 0:
        return np.zeros_like(sim)
    if half.family == "contrastive":
        w = (sim >= half.lam).astype(np.float64)
    elif half.family == "hll":
        if half.b > half.a:
            w = np.clip((sim - half.a) / (half.b - half.a), 0.0, 1.0)
        else:
            w = (sim >= half.a).astype(np.float64)
    elif half.family == "binomial":
        w = _sigmoid(half.beta * (sim - half.lam))
    elif half.family == "ms":
        z = half.beta * (sim - half.lam)
        log_denominator = np.logaddexp(0.0, _masked_logsumexp(z, neg))
        w = np.exp(np.minimum(z - log_denominator[:, None], 0.0))
    elif half.family == "infonce":
        logits = sim / half.tau
        lse_negatives = _masked_logsumexp(logits, neg)
        # log of sum over p in P_i of 1 / (e^{S_ip/tau} + sum_N e^{S_in/tau})
        per_positive = np.logaddexp(logits, lse_negatives[:, None])
        log_inverse_sum = _masked_logsumexp(-per_positive, pos)
        with np.errstate(under="ignore"):
            w = np.exp(logits + log_inverse_sum[:, None]) / half.tau
    else:
        hard = sim >= half.lam
        easy_w = _sigmoid(half.easy_beta * (sim - half.lam)) if half.easy_beta else np.zeros_like(sim)
        hard_w = _sigmoid(half.hard_beta * (sim - half.lam)) if half.hard_beta else np.ones_like(sim)
        w = np.where(hard, hard_w, easy_w)
    return np.where(neg, w, 0.0)


@dataclass(frozen=True)
class WeightScheme:
    """A positive half and a negative half, independently selectable"""

    positive: PositiveHalf = field(default_factory=PositiveHalf)
    negative: NegativeHalf = field(default_factory=NegativeHalf)

    @classmethod
    def for_loss(cls, family: str,
                 alpha: float = config.DEFAULT_ALPHA,
                 beta: float = config.DEFAULT_BETA,
                 lam: float = config.DEFAULT_LAMBDA,
                 tau: float = config.DEFAULT_TAU) -> "WeightScheme":
        """Both halves of one loss family (a diagonal entry of the mixing table)"""
        return cls(
            positive=PositiveHalf(family=family, alpha=alpha, lam=lam, tau=tau),
            negative=NegativeHalf(family=family, beta=beta, lam=lam, tau=tau),
        )

    @classmethod
    def hll(cls, a: float, b: float) -> "WeightScheme":
        return cls(positive=PositiveHalf(family="hll"), negative=NegativeHalf(family="hll", a=a, b=b))

    @classmethod
    def simple_rule(cls, threshold: float) -> "WeightScheme":
        """Positives and hard negatives weighted 1, easy negatives (S < threshold) discarded"""
        return cls.hll(threshold, threshold)

    @property
    def true_family(self) -> Optional[str]:
        family = self.positive.family
        if family == self.negative.family and family in TRUE_LOSS_FAMILIES:
            return family
        return None

    def describe(self) -> str:
        return f"pos={self.positive.describe()} neg={self.negative.describe()}"

    def weight_matrix(self, sim: np.ndarray, partition: PairPartition) -> np.ndarray:
        """Nonnegative weight magnitudes; polarity implied by the partition, zero at self-indices"""
        sim = np.atleast_2d(np.asarray(sim, dtype=np.float64))
        if sim.shape != partition.shape:
            raise ValueError(f"similarity shape {sim.shape} does not match partition {partition.shape}")
        return positive_weights(self.positive, sim, partition) + negative_weights(self.negative, sim, partition)


# ---------------------------------------------------------------------------
# Scalar evaluation against a single anchor context
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnchorContext:
    """
    Similarity row of one anchor together with its P_i and N_i

    The pair being weighted joins P_i (positive_weight) or N_i
    (negative_weight); the context describes its neighbouring pairs.
    """

    similarities: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    anchor_index: int = 0

    def __post_init__(self):
        row = np.asarray(self.similarities, dtype=np.float64).reshape(-1)
        positives = np.asarray(self.positives, dtype=np.int64).reshape(-1)
        negatives = np.asarray(self.negatives, dtype=np.int64).reshape(-1)
        for idx in (positives, negatives):
            if idx.size and (idx.min() < 0 or idx.max() >= row.size):
                raise ValueError("context index out of range")
        if np.intersect1d(positives, negatives).size:
            raise ValueError("context positives and negatives overlap")
        object.__setattr__(self, "similarities", row)
        object.__setattr__(self, "positives", positives)
        object.__setattr__(self, "negatives", negatives)

    @classmethod
    def from_values(cls, positives: Sequence[float] = (), negatives: Sequence[float] = ()) -> "AnchorContext":
        row = np.concatenate([np.asarray(positives, dtype=np.float64), np.asarray(negatives, dtype=np.float64)])
        n_pos = len(positives)
        return cls(similarities=row, positives=np.arange(n_pos), negatives=np.arange(n_pos, row.size))

    def with_pair(self, s: float, positive: bool):
        """One-row similarity matrix and partition with the evaluated pair appended last"""
        row = np.append(self.similarities, s)[None, :]
        pos = np.zeros(row.shape, dtype=bool)
        neg = np.zeros(row.shape, dtype=bool)
        pos[0, self.positives] = True
        neg[0, self.negatives] = True
        if positive:
            pos[0, -1] = True
        else:
            neg[0, -1] = True
        return row, PairPartition(positive_mask=pos, negative_mask=neg)


_EMPTY_CONTEXT = AnchorContext(similarities=np.zeros(0), positives=np.zeros(0), negatives=np.zeros(0))


def _check_similarity(s: float):
    if not -1.0 <= s <= 1.0:
        raise ValueError(f"similarity must lie in [-1, 1], got {s}")


def positive_weight(scheme: Union[WeightScheme, PositiveHalf], s: float,
                    ctx: Optional[AnchorContext] = None) -> float:
    """
    Weight magnitude of a positive pair with similarity s

    Args:
        scheme: Weight scheme (or its positive half)
        s: Pair similarity in [-1, 1]
        ctx: Neighbouring pairs of the anchor; required for ms and infonce

    Returns:
        Nonnegative weight magnitude
    """
    half = scheme.positive if isinstance(scheme, WeightScheme) else scheme
    _check_similarity(s)
    if ctx is None:
        if half.family in ("ms", "infonce"):
            raise SchemeError(f"{half.family} positive weight needs an anchor context")
        ctx = _EMPTY_CONTEXT
    row, partition = ctx.with_pair(s, positive=True)
    return float(positive_weights(half, row, partition)[0, -1])


def negative_weight(scheme: Union[WeightScheme, NegativeHalf], s: float,
                    ctx: Optional[AnchorContext] = None) -> float:
    """
    Weight magnitude of a negative pair with similarity s

    Args:
        scheme: Weight scheme (or its negative half)
        s: Pair similarity in [-1, 1]
        ctx: Neighbouring pairs of the anchor; required for ms and infonce

    Returns:
        Nonnegative weight magnitude
    """
    half = scheme.negative if isinstance(scheme, WeightScheme) else scheme
    _check_similarity(s)
    if ctx is None:
        if half.family in ("ms", "infonce"):
            raise SchemeError(f"{half.family} negative weight needs an anchor context")
        ctx = _EMPTY_CONTEXT
    row, partition = ctx.with_pair(s, positive=False)
    return float(negative_weights(half, row, partition)[0, -1])


# ---------------------------------------------------------------------------
# Losses and gradients
# ---------------------------------------------------------------------------

def signed_weights(weights: np.ndarray, partition: PairPartition) -> np.ndarray:
    """+w on negatives, -w on positives, 0 elsewhere"""
    return np.where(partition.negative_mask, weights, 0.0) - np.where(partition.positive_mask, weights, 0.0)


def _batch_size(sim: np.ndarray, batch_size: Optional[int]) -> int:
    m = sim.shape[0] if batch_size is None else int(batch_size)
    if m <= 0:
        raise ValueError(f"batch size must be positive, got {m}")
    return m


def true_loss(scheme: WeightScheme, sim: np.ndarray, partition: PairPartition,
              batch_size: Optional[int] = None) -> float:
    """
    Loss primitive whose S-derivatives are exactly the scheme's weights

    Args:
        scheme: A diagonal scheme of contrastive, binomial, ms or infonce
        sim: Similarity matrix (m_a, m_c)
        partition: Pair partition
        batch_size: m in the 1/m normalisation (defaults to the number of anchors)

    Returns:
        Mean per-anchor loss
    """
    if "hll" in (scheme.positive.family, scheme.negative.family):
        raise SchemeError("surrogate-only family")
    family = scheme.true_family
    if family is None:
        raise SchemeError(f"no loss primitive for mixed scheme {scheme.describe()}")
    sim = np.atleast_2d(np.asarray(sim, dtype=np.float64))
    pos, neg = partition.positive_mask, partition.negative_mask
    m = _batch_size(sim, batch_size)
    p, n = scheme.positive, scheme.negative

    if family == "contrastive":
        per_anchor = (np.where(pos, 1.0 - sim, 0.0).sum(axis=1)
                      + np.where(neg, np.maximum(0.0, sim - n.lam), 0.0).sum(axis=1))
    elif family == "binomial":
        per_anchor = (np.where(pos, np.logaddexp(0.0, p.alpha * (p.lam - sim)), 0.0).sum(axis=1) / p.alpha
                      + np.where(neg, np.logaddexp(0.0, n.beta * (sim - n.lam)), 0.0).sum(axis=1) / n.beta)
    elif family == "ms":
        if sim.size == 0:
            return 0.0
        per_anchor = (np.logaddexp(0.0, _masked_logsumexp(p.alpha * (p.lam - sim), pos)) / p.alpha
                      + np.logaddexp(0.0, _masked_logsumexp(n.beta * (sim - n.lam), neg)) / n.beta)
    else:
        if p.tau != n.tau:
            raise SchemeError("infonce halves use different temperatures")
        if sim.size == 0:
            return 0.0
        logits = sim / p.tau
        lse_negatives = _masked_logsumexp(logits, neg)
        per_pair = np.logaddexp(logits, lse_negatives[:, None]) - logits
        per_anchor = np.where(pos, per_pair, 0.0).sum(axis=1)
    return float(per_anchor.sum() / m)


def surrogate_loss(scheme: WeightScheme, sim: np.ndarray, partition: PairPartition,
                   batch_size: Optional[int] = None, weights: Optional[np.ndarray] = None) -> float:
    """
    GPW surrogate (1/m) sum_i [sum_N w S - sum_P w S] with detached weights

    Args:
        scheme: Weight scheme (ignored when weights are given)
        sim: Similarity matrix
        partition: Pair partition
        batch_size: m (defaults to the number of anchors)
        weights: Precomputed weight matrix, held constant

    Returns:
        Surrogate loss value
    """
    sim = np.atleast_2d(np.asarray(sim, dtype=np.float64))
    if weights is None:
        weights = scheme.weight_matrix(sim, partition)
    m = _batch_size(sim, batch_size)
    return float((signed_weights(weights, partition) * sim).sum() / m)


def grad_wrt_similarity(scheme: WeightScheme, sim: np.ndarray, partition: PairPartition,
                        batch_size: Optional[int] = None) -> np.ndarray:
    """dL/dS_ij = +w_ij/m for negatives, -w_ij/m for positives"""
    sim = np.atleast_2d(np.asarray(sim, dtype=np.float64))
    m = _batch_size(sim, batch_size)
    return signed_weights(scheme.weight_matrix(sim, partition), partition) / m


# ---------------------------------------------------------------------------
# Curves and gradient-contribution histograms
# ---------------------------------------------------------------------------

@dataclass
class WeightCurve:
    similarity: np.ndarray
    w_pos: np.ndarray
    w_neg: np.ndarray

    def rows(self):
        return zip(self.similarity.tolist(), self.w_pos.tolist(), self.w_neg.tolist())


def default_curve_grid(points: int = config.CURVE_GRID_POINTS) -> np.ndarray:
    return np.linspace(-1.0, 1.0, points)


def sample_weight_curve(scheme: WeightScheme, grid: Optional[Sequence[float]] = None,
                        fixed_ctx: Optional[AnchorContext] = None,
                        reference: float = config.CURVE_REFERENCE_SIMILARITY) -> WeightCurve:
    """
    Evaluate both halves of a scheme over a similarity grid

    Args:
        scheme: Weight scheme
        grid: Similarities in [-1, 1] (default: uniform grid)
        fixed_ctx: Context shared by every grid point
        reference: Without fixed_ctx, the positive curve sees one negative and the
            negative curve one positive at this similarity; same-polarity sets are
            singletons holding only the evaluated pair

    Returns:
        WeightCurve table
    """
    grid = default_curve_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if grid.size and (grid.min() < -1.0 or grid.max() > 1.0):
        raise ValueError("curve grid must lie within [-1, 1]")
    if fixed_ctx is None:
        pos_ctx = AnchorContext.from_values(negatives=[reference])
        neg_ctx = AnchorContext.from_values(positives=[reference])
    else:
        pos_ctx = neg_ctx = fixed_ctx
    w_pos = np.array([positive_weight(scheme, s, pos_ctx) for s in grid])
    w_neg = np.array([negative_weight(scheme, s, neg_ctx) for s in grid])
    return WeightCurve(similarity=grid, w_pos=w_pos, w_neg=w_neg)


@dataclass
class ContributionHistogram:
    """Summed weight magnitude per similarity bin, per polarity"""

    edges: np.ndarray
    positive: np.ndarray
    negative: np.ndarray

    def rows(self):
        return zip(self.edges[:-1].tolist(), self.edges[1:].tolist(),
                   self.positive.tolist(), self.negative.tolist())


def gradient_contribution_histogram(scheme: WeightScheme, sim: np.ndarray, partition: PairPartition,
                                    bins: Union[int, Sequence[float]] = config.DEFAULT_HISTOGRAM_BINS,
                                    weights: Optional[np.ndarray] = None) -> ContributionHistogram:
    """
    Distribute the weight mass of a batch of pairs over similarity bins

    Args:
        scheme: Weight scheme
        sim: Similarity matrix
        partition: Pair partition
        bins: Bin count or edges partitioning [-1, 1]
        weights: Precomputed weights (computed from the scheme otherwise)

    Returns:
        ContributionHistogram
    """
    edges = histogram_edges(bins)
    sim = np.atleast_2d(np.asarray(sim, dtype=np.float64))
    if weights is None:
        weights = scheme.weight_matrix(sim, partition)
    pos, neg = partition.positive_mask, partition.negative_mask
    positive, _ = np.histogram(sim[pos], bins=edges, weights=weights[pos])
    negative, _ = np.histogram(sim[neg], bins=edges, weights=weights[neg])
    return ContributionHistogram(edges=edges, positive=positive, negative=negative)
