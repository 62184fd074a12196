"""
Training loops for mini-batch, XBM and s-MoCo modes

Mini-batch mode mines pairs inside the batch. Memory mode mines anchor-vs-memory
pairs from a queue filled by a momentum encoder; momentum 0 is XBM.
"""

import itertools
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from tqdm import tqdm

from memory_dml import config
from memory_dml.core import partition_pairs, similarity_matrix
from memory_dml.data import VectorDataset
from memory_dml.encoder import (MlpEncoderParams, ParamGradient, backward, chain_pair_gradient,
                                forward, init_encoder)
from memory_dml.errors import ConfigError, DatasetError, MemoryDMLError, SchemeError, TrainingDivergedError
from memory_dml.evaluation import RetrievalResult, evaluate_retrieval
from memory_dml.memory import DriftProbe, MemoryBank, hard_negative_count
from memory_dml.weighting import WeightScheme, surrogate_loss

MODES = ("minibatch", "memory")
ENQUEUE_ENCODERS = ("momentum", "main")


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines a training run"""

    mode: str = "memory"
    momentum: float = config.DEFAULT_MOMENTUM
    scheme: WeightScheme = field(default_factory=WeightScheme)
    classes_per_batch: int = config.DEFAULT_CLASSES_PER_BATCH
    samples_per_class: int = config.DEFAULT_SAMPLES_PER_CLASS
    iterations: int = config.DEFAULT_ITERATIONS
    learning_rate: float = config.DEFAULT_LEARNING_RATE
    weight_decay: float = config.DEFAULT_WEIGHT_DECAY
    adam_betas: Tuple[float, float] = config.DEFAULT_ADAM_BETAS
    adam_eps: float = config.DEFAULT_ADAM_EPS
    seed: int = config.DEFAULT_SEED
    drift_interval: int = config.DEFAULT_DRIFT_INTERVAL
    hard_neg_threshold: float = config.DEFAULT_HARD_NEGATIVE_THRESHOLD
    memory_size: Optional[int] = None
    hidden_dims: Tuple[int, ...] = config.DEFAULT_HIDDEN_DIMS
    embedding_dim: int = config.DEFAULT_EMBEDDING_DIM
    probe_size: int = config.DEFAULT_PROBE_SIZE
    lr_decay: bool = False
    in_batch_pairs: bool = False
    enqueue_encoder: str = "momentum"
    eval_interval: int = 0
    recall_ks: Tuple[int, ...] = config.DEFAULT_RECALL_KS

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.enqueue_encoder not in ENQUEUE_ENCODERS:
            raise ConfigError(f"enqueue_encoder must be one of {ENQUEUE_ENCODERS}, got '{self.enqueue_encoder}'")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError(f"momentum must lie in [0, 1], got {self.momentum}")
        if self.classes_per_batch < 2:
            raise ConfigError("classes_per_batch must be at least 2")
        if self.samples_per_class < 2:
            raise ConfigError("samples_per_class must be at least 2 (each anchor needs a positive)")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be non-negative, got {self.iterations}")
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.adam_eps <= 0:
            raise ConfigError("learning_rate and adam_eps must be positive, weight_decay non-negative")
        if not all(0.0 <= b < 1.0 for b in self.adam_betas) or len(self.adam_betas) != 2:
            raise ConfigError(f"adam_betas must be two values in [0, 1), got {self.adam_betas}")
        if self.drift_interval < 1 or self.probe_size < 1:
            raise ConfigError("drift_interval and probe_size must be positive")
        if not -1.0 <= self.hard_neg_threshold <= 1.0:
            raise ConfigError("hard_neg_threshold must lie in [-1, 1]")
        if self.memory_size is not None and self.memory_size < 1:
            raise ConfigError("memory_size must be positive")
        if self.embedding_dim < 2 or any(d < 1 for d in self.hidden_dims):
            raise ConfigError("embedding_dim must be at least 2 and hidden dims positive")
        if self.eval_interval < 0 or any(k < 1 for k in self.recall_ks):
            raise ConfigError("eval_interval must be non-negative and recall ks positive")

    @property
    def batch_size(self) -> int:
        return self.classes_per_batch * self.samples_per_class

    @property
    def memory_capacity(self) -> int:
        if self.memory_size is not None:
            return self.memory_size
        return config.MEMORY_SIZE_BATCHES * self.batch_size

    def mode_label(self) -> str:
        if self.mode == "minibatch":
            return "minibatch"
        if self.momentum == 0.0:
            return "memory (XBM-equivalent)"
        return f"memory (s-MoCo, m={self.momentum:g})"

    def describe(self) -> Dict[str, str]:
        """Flat, ordered view of the resolved configuration"""
        return {
            "mode": self.mode,
            "momentum": f"{self.momentum:g}",
            "scheme": self.scheme.describe(),
            "classes_per_batch": str(self.classes_per_batch),
            "samples_per_class": str(self.samples_per_class),
            "iterations": str(self.iterations),
            "learning_rate": f"{self.learning_rate:g}",
            "weight_decay": f"{self.weight_decay:g}",
            "adam_betas": " ".join(f"{b:g}" for b in self.adam_betas),
            "adam_eps": f"{self.adam_eps:g}",
            "seed": str(self.seed),
            "drift_interval": str(self.drift_interval),
            "hard_neg_threshold": f"{self.hard_neg_threshold:g}",
            "memory_size": str(self.memory_capacity),
            "hidden_dims": " ".join(str(d) for d in self.hidden_dims),
            "embedding_dim": str(self.embedding_dim),
            "probe_size": str(self.probe_size),
            "lr_decay": str(self.lr_decay).lower(),
            "in_batch_pairs": str(self.in_batch_pairs).lower(),
            "enqueue_encoder": self.enqueue_encoder,
            "eval_interval": str(self.eval_interval),
        }


@dataclass
class RunRecord:
    """Per-iteration metrics of one run"""

    iterations: List[int] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    hard_negatives: List[int] = field(default_factory=list)
    feature_drift: Dict[int, float] = field(default_factory=dict)
    recall_history: Dict[int, Dict[int, float]] = field(default_factory=dict)
    final_recall: Dict[int, float] = field(default_factory=dict)
    final_result: Optional[RetrievalResult] = field(default=None, compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.iterations)

    def append(self, iteration: int, loss: float, hard_negatives: int):
        if self.iterations and iteration <= self.iterations[-1]:
            raise ValueError(f"iteration {iteration} does not follow {self.iterations[-1]}")
        self.iterations.append(iteration)
        self.losses.append(loss)
        self.hard_negatives.append(hard_negatives)

    @property
    def final_recall_at_1(self) -> Optional[float]:
        return self.final_recall.get(1)

    def mean_drift(self, start: int = 0) -> float:
        values = [d for t, d in self.feature_drift.items() if t >= start]
        return float(np.mean(values)) if values else 0.0

    def mean_hard_negatives(self, start: int = 0, stop: Optional[int] = None) -> float:
        values = [h for t, h in zip(self.iterations, self.hard_negatives)
                  if t >= start and (stop is None or t < stop)]
        return float(np.mean(values)) if values else 0.0

    def rows(self):
        """CSV rows: iteration, loss, hard_negatives, feature_drift, recall_at_1"""
        for t, loss, hard in zip(self.iterations, self.losses, self.hard_negatives):
            drift = self.feature_drift.get(t)
            recall = self.recall_history.get(t, {}).get(1)
            yield (t, repr(loss), hard,
                   "" if drift is None else repr(drift),
                   "" if recall is None else repr(recall))


def is_collapsed(recall_at_1: Optional[float], num_test_classes: int) -> bool:
    """Recall@1 below twice the chance level 1 / num_test_classes"""
    if recall_at_1 is None:
        return False
    return recall_at_1 < config.COLLAPSE_CHANCE_MULTIPLIER / num_test_classes


def sample_batch(dataset: VectorDataset, classes_per_batch: int, samples_per_class: int,
                 rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draw a P x K batch

    Args:
        dataset: Training dataset
        classes_per_batch: P, distinct classes drawn without replacement
        samples_per_class: K, samples per class drawn without replacement
        rng: Sampler random generator

    Returns:
        (inputs (P*K, d_in), labels (P*K,)), grouped by class
    """
    eligible = np.array([c for c in dataset.classes if len(dataset.class_index[c]) >= samples_per_class],
                        dtype=np.int64)
    if len(eligible) < classes_per_batch:
        raise DatasetError(
            f"need {classes_per_batch} classes with at least {samples_per_class} samples, "
            f"dataset has {len(eligible)}"
        )
    classes = rng.choice(eligible, size=classes_per_batch, replace=False)
    indices = np.concatenate([
        rng.choice(dataset.class_index[int(c)], size=samples_per_class, replace=False) for c in classes
    ])
    return dataset.inputs[indices], dataset.labels[indices]


@dataclass
class AdamState:
    step: int
    first_moment: List[np.ndarray]
    second_moment: List[np.ndarray]

    @classmethod
    def zeros_like(cls, params: MlpEncoderParams) -> "AdamState":
        return cls(0, [np.zeros_like(a) for a in params.arrays()], [np.zeros_like(a) for a in params.arrays()])


def adam_step(params: MlpEncoderParams, grads: ParamGradient, state: AdamState,
              lr: float = config.DEFAULT_LEARNING_RATE,
              betas: Tuple[float, float] = config.DEFAULT_ADAM_BETAS,
              eps: float = config.DEFAULT_ADAM_EPS,
              weight_decay: float = config.DEFAULT_WEIGHT_DECAY,
              iteration: Optional[int] = None) -> Tuple[MlpEncoderParams, AdamState]:
    """
    One Adam update with weight decay added to the gradient

    Args:
        params: Current parameters (not modified)
        grads: Loss gradient
        state: Moment estimates (not modified)
        lr: Learning rate
        betas: Moment decay rates
        eps: Denominator epsilon
        weight_decay: Coefficient of the added weight_decay * theta term
        iteration: Reported in the error when gradients are non-finite

    Returns:
        (new params, new state)
    """
    if not params.congruent_with(grads):
        raise ValueError(f"gradient shapes {grads.layer_dims} do not match parameters {params.layer_dims}")
    if not all(np.all(np.isfinite(g)) for g in grads.arrays()):
        raise TrainingDivergedError(iteration=iteration)
    beta1, beta2 = betas
    step = state.step + 1
    new_arrays, first, second = [], [], []
    for theta, g, m, v in zip(params.arrays(), grads.arrays(), state.first_moment, state.second_moment):
        g = g + weight_decay * theta
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** step)
        v_hat = v / (1.0 - beta2 ** step)
        new_arrays.append(theta - lr * m_hat / (np.sqrt(v_hat) + eps))
        first.append(m)
        second.append(v)
    new_params = MlpEncoderParams(new_arrays[0::2], new_arrays[1::2])
    return new_params, AdamState(step, first, second)


def learning_rate_at(train_config: TrainConfig, iteration: int) -> float:
    """Constant rate, or x0.1 steps at 50% and 80% of the run when lr_decay is on"""
    lr = train_config.learning_rate
    if not train_config.lr_decay:
        return lr
    for fraction in config.LR_DECAY_MILESTONES:
        if iteration >= int(fraction * train_config.iterations):
            lr *= config.LR_DECAY_FACTOR
    return lr


def make_probe(train_config: TrainConfig, dataset: VectorDataset) -> DriftProbe:
    """Fixed probe inputs drawn from the training data with the probe substream"""
    rng = np.random.default_rng((train_config.seed, config.PROBE_STREAM))
    replace_draw = train_config.probe_size > len(dataset)
    indices = rng.choice(len(dataset), size=train_config.probe_size, replace=replace_draw)
    return DriftProbe(dataset.inputs[indices])


def _check_finite_loss(loss: float, iteration: int):
    if not np.isfinite(loss):
        raise TrainingDivergedError(iteration=iteration)


def _minibatch_step(train_config: TrainConfig, embeddings: np.ndarray, labels: np.ndarray,
                    iteration: int) -> Tuple[np.ndarray, float, int]:
    m = train_config.batch_size
    sim = similarity_matrix(embeddings, embeddings)
    partition = partition_pairs(labels, labels, exclude_self=True)
    weights = train_config.scheme.weight_matrix(sim, partition)
    loss = surrogate_loss(train_config.scheme, sim, partition, batch_size=m, weights=weights)
    _check_finite_loss(loss, iteration)
    grad_v = chain_pair_gradient(weights, partition, embeddings, embeddings, m, candidates_are_anchors=True)
    return grad_v, loss, hard_negative_count(sim, partition, train_config.hard_neg_threshold)


def _memory_step(train_config: TrainConfig, memory: MemoryBank, embeddings: np.ndarray,
                 labels: np.ndarray, iteration: int) -> Tuple[np.ndarray, float, int]:
    m = train_config.batch_size
    sim, partition = memory.mine_pairs(embeddings, labels)
    memory_embeddings, _ = memory.get()
    if train_config.in_batch_pairs:
        batch_sim = similarity_matrix(embeddings, embeddings)
        batch_partition = partition_pairs(labels, labels, exclude_self=True)
        all_sim = np.hstack([batch_sim, sim])
        all_partition = batch_partition.hstack(partition)
        hard = hard_negative_count(all_sim, all_partition, train_config.hard_neg_threshold)
        weights = train_config.scheme.weight_matrix(all_sim, all_partition)
        loss = surrogate_loss(train_config.scheme, all_sim, all_partition, batch_size=m, weights=weights)
        _check_finite_loss(loss, iteration)
        grad_v = (chain_pair_gradient(weights[:, :m], batch_partition, embeddings, embeddings, m,
                                      candidates_are_anchors=True)
                  + chain_pair_gradient(weights[:, m:], partition, embeddings, memory_embeddings, m))
        return grad_v, loss, hard
    weights = train_config.scheme.weight_matrix(sim, partition)
    hard = hard_negative_count(sim, partition, train_config.hard_neg_threshold)
    loss = surrogate_loss(train_config.scheme, sim, partition, batch_size=m, weights=weights)
    _check_finite_loss(loss, iteration)
    grad_v = chain_pair_gradient(weights, partition, embeddings, memory_embeddings, m)
    return grad_v, loss, hard


def train(train_config: TrainConfig, dataset: VectorDataset,
          encoder: Optional[MlpEncoderParams] = None,
          test_set: Optional[VectorDataset] = None,
          probe: Optional[DriftProbe] = None,
          progress: bool = False) -> Tuple[MlpEncoderParams, RunRecord]:
    """
    Train an encoder

    Args:
        train_config: Run configuration
        dataset: Training data
        encoder: Initial parameters (initialized from the seed if None)
        test_set: Held-out classes for periodic and final recall
        probe: Drift probe (drawn from the training data if None)
        progress: Show a tqdm bar

    Returns:
        (final params, RunRecord)
    """
    if encoder is None:
        dims = [dataset.input_dim, *train_config.hidden_dims, train_config.embedding_dim]
        encoder = init_encoder(dims, seed=(train_config.seed, config.INIT_STREAM))
    elif encoder.layer_dims[0] != dataset.input_dim:
        raise ValueError(f"encoder d_in={encoder.layer_dims[0]} does not match dataset d_in={dataset.input_dim}")
    params = encoder.copy()
    record = RunRecord()
    if probe is None:
        probe = make_probe(train_config, dataset)

    memory = None
    if train_config.mode == "memory":
        memory = MemoryBank(train_config.memory_capacity, train_config.momentum, params)
    sampler = np.random.default_rng((train_config.seed, config.SAMPLER_STREAM))
    state = AdamState.zeros_like(params)
    # Snapshots stay per run when one probe is shared across runs
    run_probe = DriftProbe(probe.probe_inputs)

    logger.info(f"Training {train_config.mode_label()} with {train_config.scheme.describe()}, "
                f"{train_config.iterations} iterations, batch {train_config.batch_size}")

    progress_bar = tqdm(range(train_config.iterations), desc="Training", disable=not progress, leave=False)
    try:
        for t in progress_bar:
            inputs, labels = sample_batch(dataset, train_config.classes_per_batch,
                                          train_config.samples_per_class, sampler)

            if memory is not None:
                memory.momentum_update(params)

            if t % train_config.drift_interval == 0:
                tracked = memory.momentum_params if memory is not None else params
                run_probe.record(t, tracked)
                drift = 0.0 if t == 0 else run_probe.drift_between(t, t - train_config.drift_interval)
                record.feature_drift[t] = drift
                lag = 0.0 if memory is None else tracked.distance(params)
                logger.debug(f"iteration {t}: feature drift {drift:.6g}, memory encoder lag {lag:.4g}")

            embeddings, cache = forward(params, inputs)
            if memory is None:
                grad_v, loss, hard = _minibatch_step(train_config, embeddings, labels, t)
            else:
                if train_config.enqueue_encoder == "momentum":
                    memory.enqueue_batch(inputs, labels)
                else:
                    memory.enqueue_embeddings(embeddings, labels)
                grad_v, loss, hard = _memory_step(train_config, memory, embeddings, labels, t)

            grads = backward(params, cache, grad_v)
            params, state = adam_step(params, grads, state, lr=learning_rate_at(train_config, t),
                                      betas=train_config.adam_betas, eps=train_config.adam_eps,
                                      weight_decay=train_config.weight_decay, iteration=t)
            if not params.is_finite():
                raise TrainingDivergedError(iteration=t)
            record.append(t, loss, hard)

            if (test_set is not None and train_config.eval_interval
                    and (t + 1) % train_config.eval_interval == 0):
                recall = evaluate_retrieval(params, test_set.inputs, test_set.labels, train_config.recall_ks).recall_at
                record.recall_history[t] = recall
                logger.debug(f"iteration {t}: recall@1 {recall.get(1)}")
            progress_bar.set_postfix(loss=f"{loss:.4f}", hard=hard)
    except TrainingDivergedError as e:
        e.record = record
        raise

    if test_set is not None:
        result = evaluate_retrieval(params, test_set.inputs, test_set.labels, train_config.recall_ks)
        record.final_recall = result.recall_at
        record.final_result = result
        logger.info(f"Final recall: {result.recall_at}")
    return params, record


def warm_start(train_config: TrainConfig, dataset: VectorDataset, iterations: int) -> MlpEncoderParams:
    """Encoder after `iterations` mini-batch steps, a shared starting point for compared runs"""
    if iterations < 0:
        raise ConfigError(f"warm-up iterations must be non-negative, got {iterations}")
    logger.info(f"Warming up the encoder with {iterations} mini-batch iterations")
    params, _ = train(replace(train_config, mode="minibatch", iterations=iterations), dataset)
    return params


# ---------------------------------------------------------------------------
# Parameter grids
# ---------------------------------------------------------------------------

@dataclass
class GridRow:
    point: Dict[str, float]
    recall_at_1: Optional[float]
    collapsed: bool
    status: str


def apply_point(train_config: TrainConfig, point: Mapping[str, float]) -> TrainConfig:
    """Copy of the config with every axis of a grid point set at once"""
    positive_kwargs, negative_kwargs = {}, {}
    momentum = train_config.momentum
    for name, value in point.items():
        if name == "alpha":
            positive_kwargs["alpha"] = value
        elif name == "beta":
            negative_kwargs["beta"] = value
        elif name in ("lambda", "tau"):
            key = "lam" if name == "lambda" else name
            positive_kwargs[key] = negative_kwargs[key] = value
        elif name in ("a", "b"):
            negative_kwargs[name] = value
        elif name == "momentum":
            momentum = value
        else:
            raise ConfigError(f"unknown grid axis '{name}', expected one of {config.GRID_AXES}")
    scheme = WeightScheme(positive=replace(train_config.scheme.positive, **positive_kwargs),
                          negative=replace(train_config.scheme.negative, **negative_kwargs))
    return replace(train_config, scheme=scheme, momentum=momentum)


def grid_points(axes: Mapping[str, Sequence[float]]) -> List[Dict[str, float]]:
    unknown = [name for name in axes if name not in config.GRID_AXES]
    if unknown:
        raise ConfigError(f"unknown grid axis {unknown}, expected names from {config.GRID_AXES}")
    names = list(axes)
    for name in names:
        if not axes[name] or not all(np.isfinite(v) for v in axes[name]):
            raise ConfigError(f"axis '{name}' needs a non-empty list of finite values")
    return [dict(zip(names, values)) for values in itertools.product(*(axes[n] for n in names))]


def _run_point(base: TrainConfig, point: Dict[str, float], dataset: VectorDataset,
               test_set: Optional[VectorDataset]) -> GridRow:
    # hll halves reject a > b on construction
    try:
        point_config = apply_point(base, point)
    except (SchemeError, ConfigError) as e:
        logger.debug(f"Grid point {point} is invalid: {e}")
        return GridRow(point, None, False, "invalid")

    try:
        _, record = train(point_config, dataset, test_set=test_set)
    except TrainingDivergedError as e:
        logger.warning(f"Grid point {point} diverged: {e}")
        return GridRow(point, None, True, "diverged")
    except (MemoryDMLError, ValueError) as e:
        logger.warning(f"Grid point {point} failed: {e}")
        return GridRow(point, None, False, "failed")

    recall = record.final_recall_at_1
    collapsed = test_set is not None and is_collapsed(recall, test_set.num_classes)
    return GridRow(point, recall, collapsed, "collapsed" if collapsed else "ok")


def grid_run(base: TrainConfig, axes: Mapping[str, Sequence[float]], dataset: VectorDataset,
             test_set: Optional[VectorDataset] = None, jobs: int = 1,
             progress: bool = False) -> List[GridRow]:
    """
    Independent training runs over the Cartesian product of axis values

    Args:
        base: Configuration shared by every point (same seed everywhere)
        axes: Ordered map axis name -> values
        dataset: Training data
        test_set: Held-out classes for recall and collapse detection
        jobs: Concurrent runs
        progress: Show a tqdm bar

    Returns:
        One GridRow per point, in grid order
    """
    points = grid_points(axes)
    logger.info(f"Grid of {len(points)} points over {list(axes)} with {jobs} job(s)")
    rows: List[Optional[GridRow]] = [None] * len(points)
    with ThreadPoolExecutor(max_workers=max(1, int(jobs))) as executor:
        futures = {executor.submit(_run_point, base, point, dataset, test_set): idx
                   for idx, point in enumerate(points)}
        for future in tqdm(as_completed(futures), total=len(futures), desc="Grid", disable=not progress):
            rows[futures[future]] = future.result()
    return rows
