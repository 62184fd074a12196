"""
Labeled vector datasets: synthetic clusters, CSV ingestion, class-disjoint splits
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from loguru import logger

from memory_dml import config
from memory_dml.errors import DatasetError


@dataclass(frozen=True)
class VectorDataset:
    """Raw input vectors (not normalized) with integer class labels"""

    inputs: np.ndarray
    labels: np.ndarray
    class_index: Dict[int, np.ndarray] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        inputs = np.array(self.inputs, dtype=np.float64, copy=True)
        labels = np.array(self.labels, dtype=np.int64, copy=True).reshape(-1)
        if inputs.ndim != 2 or len(inputs) == 0:
            raise DatasetError("dataset needs a non-empty (n, d_in) input array")
        if len(inputs) != len(labels):
            raise DatasetError(f"{len(inputs)} inputs but {len(labels)} labels")
        if np.any(labels < 0):
            raise DatasetError("labels must be non-negative")
        class_index = {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}
        singletons = sorted(c for c, idx in class_index.items() if len(idx) < 2)
        if singletons:
            raise DatasetError(f"labels with a single sample: {singletons}")
        inputs.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_index", class_index)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def classes(self) -> np.ndarray:
        return np.array(sorted(self.class_index), dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return len(self.class_index)

    def subset(self, class_labels) -> "VectorDataset":
        mask = np.isin(self.labels, np.asarray(list(class_labels), dtype=np.int64))
        return VectorDataset(self.inputs[mask], self.labels[mask])


def generate_clusters(num_classes: int = config.DEFAULT_NUM_CLASSES,
                      per_class: int = config.DEFAULT_PER_CLASS,
                      input_dim: int = config.DEFAULT_INPUT_DIM,
                      center_scale: float = config.DEFAULT_CENTER_SCALE,
                      noise_sigma: float = config.DEFAULT_NOISE_SIGMA,
                      seed: int = config.DEFAULT_SEED,
                      informative_dims: Optional[int] = None,
                      nuisance_sigma: float = config.DEFAULT_NUISANCE_SIGMA) -> VectorDataset:
    """
    Gaussian clusters around random class centers

    Args:
        num_classes: Number of classes C (>= 2)
        per_class: Samples per class n (>= 2)
        input_dim: Input dimension d_in
        center_scale: Standard deviation of the zero-mean center distribution
        noise_sigma: Isotropic noise around each center
        seed: Random seed
        informative_dims: Leading dimensions that carry the class centers (all if None);
            the rest hold class-independent noise only
        nuisance_sigma: Noise sigma of the non-informative dimensions

    Returns:
        VectorDataset with C * n samples, ordered class by class
    """
    if num_classes < 2:
        raise DatasetError(f"need at least 2 classes, got {num_classes}")
    if per_class < 2:
        raise DatasetError(f"need at least 2 samples per class, got {per_class}")
    if input_dim < 1:
        raise DatasetError(f"input dimension must be positive, got {input_dim}")
    if center_scale <= 0 or noise_sigma < 0:
        raise DatasetError("center_scale must be positive and noise_sigma non-negative")
    if informative_dims is not None and not 1 <= informative_dims <= input_dim:
        raise DatasetError(f"informative_dims must lie in [1, {input_dim}], got {informative_dims}")
    if nuisance_sigma < 0:
        raise DatasetError("nuisance_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_scale, size=(num_classes, input_dim))
    labels = np.repeat(np.arange(num_classes), per_class)
    sigma = np.full(input_dim, float(noise_sigma))
    if informative_dims is not None:
        centers[:, informative_dims:] = 0.0
        sigma[informative_dims:] = nuisance_sigma
    noise = rng.normal(0.0, 1.0, size=(len(labels), input_dim)) * sigma
    return VectorDataset(centers[labels] + noise, labels)


def split_by_class(dataset: VectorDataset,
                   train_fraction: float = config.DEFAULT_TRAIN_FRACTION,
                   seed: int = config.DEFAULT_SEED) -> Tuple[VectorDataset, VectorDataset]:
    """
    Partition the classes (not the samples) into train and test

    Args:
        dataset: Dataset to split
        train_fraction: Fraction of classes assigned to train, in (0, 1)
        seed: Random seed for the class permutation

    Returns:
        (train, test) with disjoint label sets
    """
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    classes = dataset.classes
    n_train = int(round(train_fraction * len(classes)))
    if n_train < 1 or n_train >= len(classes):
        raise DatasetError(
            f"train_fraction {train_fraction} leaves an empty side with {len(classes)} classes"
        )
    permuted = np.random.default_rng(seed).permutation(classes)
    train_classes, test_classes = np.sort(permuted[:n_train]), np.sort(permuted[n_train:])
    logger.debug(f"Class split: {len(train_classes)} train / {len(test_classes)} test classes")
    return dataset.subset(train_classes), dataset.subset(test_classes)


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def load_csv(path) -> VectorDataset:
    """
    Load rows of d_in reals followed by an integer label

    A header row is detected by a non-numeric first token.

    Args:
        path: CSV file path

    Returns:
        VectorDataset
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")

    inputs, labels = [], []
    width = None
    with open(path, "r", encoding="utf-8", newline="") as f:
        for line_no, row in enumerate(csv.reader(f), start=1):
            row = [token.strip() for token in row]
            if not row or all(token == "" for token in row):
                continue
            if line_no == 1 and not _is_number(row[0]):
                continue
            if len(row) < 2:
                raise DatasetError(f"{path}:{line_no}: need at least one feature and a label")
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DatasetError(f"{path}:{line_no}: ragged row with {len(row)} fields, expected {width}")
            try:
                features = [float(token) for token in row[:-1]]
            except ValueError:
                raise DatasetError(f"{path}:{line_no}: non-numeric feature value")
            if not all(np.isfinite(features)):
                raise DatasetError(f"{path}:{line_no}: non-finite feature value")
            try:
                label = int(row[-1])
            except ValueError:
                raise DatasetError(f"{path}:{line_no}: label {row[-1]!r} is not an integer")
            inputs.append(features)
            labels.append(label)

    if not inputs:
        raise DatasetError(f"{path}: no data rows")
    logger.info(f"Loaded {len(inputs)} samples with d_in={width - 1} from {path}")
    return VectorDataset(np.array(inputs), np.array(labels))
