"""
Experiment configuration files

Flat `key = value` lines with `#` comments. Values are merged over the
defaults in config.py, then command-line overrides are applied.
"""

from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Tuple

from memory_dml import config
from memory_dml.data import VectorDataset, generate_clusters, load_csv, split_by_class
from memory_dml.errors import ConfigError, MemoryDMLError
from memory_dml.trainer import TrainConfig
from memory_dml.weighting import NegativeHalf, PositiveHalf, WeightScheme


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got '{text}'")


def _parse_optional_float(text: str) -> Optional[float]:
    return None if text.strip().lower() in ("", "none") else float(text)


def _parse_optional_int(text: str) -> Optional[int]:
    return None if text.strip().lower() in ("", "none") else int(text)


def _parse_int_tuple(text: str) -> Tuple[int, ...]:
    return tuple(int(token) for token in text.replace(",", " ").split())


def _parse_str(text: str) -> str:
    return text.strip()


# key -> (parser, default)
KEYS: Dict[str, Tuple[Callable[[str], Any], Any]] = {
    # weight scheme
    "pos": (_parse_str, config.DEFAULT_POSITIVE_FAMILY),
    "neg": (_parse_str, config.DEFAULT_NEGATIVE_FAMILY),
    "alpha": (float, config.DEFAULT_ALPHA),
    "beta": (float, config.DEFAULT_BETA),
    "lambda": (float, config.DEFAULT_LAMBDA),
    "tau": (float, config.DEFAULT_TAU),
    "a": (float, config.DEFAULT_HLL_A),
    "b": (float, config.DEFAULT_HLL_B),
    "easy_beta": (_parse_optional_float, None),
    "hard_beta": (_parse_optional_float, None),
    # training and memory
    "mode": (_parse_str, "memory"),
    "momentum": (float, config.DEFAULT_MOMENTUM),
    "memory_size": (_parse_optional_int, None),
    "classes_per_batch": (int, config.DEFAULT_CLASSES_PER_BATCH),
    "samples_per_class": (int, config.DEFAULT_SAMPLES_PER_CLASS),
    "iterations": (int, config.DEFAULT_ITERATIONS),
    "learning_rate": (float, config.DEFAULT_LEARNING_RATE),
    "weight_decay": (float, config.DEFAULT_WEIGHT_DECAY),
    "adam_beta1": (float, config.DEFAULT_ADAM_BETAS[0]),
    "adam_beta2": (float, config.DEFAULT_ADAM_BETAS[1]),
    "adam_eps": (float, config.DEFAULT_ADAM_EPS),
    "seed": (int, config.DEFAULT_SEED),
    "drift_interval": (int, config.DEFAULT_DRIFT_INTERVAL),
    "hard_neg_threshold": (float, config.DEFAULT_HARD_NEGATIVE_THRESHOLD),
    "hidden_dims": (_parse_int_tuple, config.DEFAULT_HIDDEN_DIMS),
    "embedding_dim": (int, config.DEFAULT_EMBEDDING_DIM),
    "probe_size": (int, config.DEFAULT_PROBE_SIZE),
    "drift_warmup": (int, config.DRIFT_WARMUP_ITERATIONS),
    "lr_decay": (_parse_bool, False),
    "in_batch_pairs": (_parse_bool, False),
    "enqueue_encoder": (_parse_str, "momentum"),
    "eval_interval": (int, 0),
    "recall_ks": (_parse_int_tuple, config.DEFAULT_RECALL_KS),
    # dataset
    "dataset": (_parse_str, "synthetic"),
    "num_classes": (int, config.DEFAULT_NUM_CLASSES),
    "per_class": (int, config.DEFAULT_PER_CLASS),
    "input_dim": (int, config.DEFAULT_INPUT_DIM),
    "center_scale": (float, config.DEFAULT_CENTER_SCALE),
    "noise_sigma": (float, config.DEFAULT_NOISE_SIGMA),
    "train_fraction": (float, config.DEFAULT_TRAIN_FRACTION),
    "informative_dims": (_parse_optional_int, None),
    "nuisance_sigma": (float, config.DEFAULT_NUISANCE_SIGMA),
    "data_seed": (int, config.DEFAULT_SEED),
}


class ExperimentConfig:
    """Resolved experiment settings"""

    def __init__(self, values: Optional[Mapping[str, Any]] = None, source: Optional[str] = None):
        self.values = {key: default for key, (_, default) in KEYS.items()}
        self.source = source
        for key, value in (values or {}).items():
            if key not in KEYS:
                raise ConfigError(f"unknown config key '{key}'")
            self.values[key] = value

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        """
        Parse `key = value` lines

        Args:
            text: File contents
            source: Name used in error messages

        Returns:
            ExperimentConfig
        """
        values = {}
        for line_no, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{line_no}: expected 'key = value', got '{raw.strip()}'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in KEYS:
                raise ConfigError(f"{source}:{line_no}: unknown config key '{key}'")
            if key in values:
                raise ConfigError(f"{source}:{line_no}: duplicate key '{key}'")
            parser, _ = KEYS[key]
            try:
                values[key] = parser(value)
            except ValueError as e:
                raise ConfigError(f"{source}:{line_no}: bad value for '{key}': {e}")
        return cls(values, source=source)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.parse(path.read_text(encoding="utf-8"), source=str(path))

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        """New config with every non-None override applied"""
        merged = dict(self.values)
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in KEYS:
                raise ConfigError(f"unknown config key '{key}'")
            merged[key] = value
        return ExperimentConfig(merged, source=self.source)

    def scheme(self) -> WeightScheme:
        v = self.values
        try:
            return WeightScheme(
                positive=PositiveHalf(family=v["pos"], alpha=v["alpha"], lam=v["lambda"], tau=v["tau"]),
                negative=NegativeHalf(family=v["neg"], beta=v["beta"], lam=v["lambda"], tau=v["tau"],
                                      a=v["a"], b=v["b"], easy_beta=v["easy_beta"], hard_beta=v["hard_beta"]),
            )
        except MemoryDMLError as e:
            raise ConfigError(f"invalid weight scheme: {e}")

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            mode=v["mode"],
            momentum=v["momentum"],
            scheme=self.scheme(),
            classes_per_batch=v["classes_per_batch"],
            samples_per_class=v["samples_per_class"],
            iterations=v["iterations"],
            learning_rate=v["learning_rate"],
            weight_decay=v["weight_decay"],
            adam_betas=(v["adam_beta1"], v["adam_beta2"]),
            adam_eps=v["adam_eps"],
            seed=v["seed"],
            drift_interval=v["drift_interval"],
            hard_neg_threshold=v["hard_neg_threshold"],
            memory_size=v["memory_size"],
            hidden_dims=tuple(v["hidden_dims"]),
            embedding_dim=v["embedding_dim"],
            probe_size=v["probe_size"],
            lr_decay=v["lr_decay"],
            in_batch_pairs=v["in_batch_pairs"],
            enqueue_encoder=v["enqueue_encoder"],
            eval_interval=v["eval_interval"],
            recall_ks=tuple(v["recall_ks"]),
        )

    def load_datasets(self) -> Tuple[VectorDataset, VectorDataset]:
        """(train, test) with class-disjoint labels"""
        v = self.values
        if v["dataset"] == "synthetic":
            full = generate_clusters(v["num_classes"], v["per_class"], v["input_dim"],
                                     v["center_scale"], v["noise_sigma"], v["data_seed"],
                                     informative_dims=v["informative_dims"], nuisance_sigma=v["nuisance_sigma"])
        else:
            full = load_csv(v["dataset"])
        return split_by_class(full, v["train_fraction"], v["data_seed"])

    def describe(self) -> str:
        """One-line `key=value` rendering of every resolved setting"""
        parts = []
        for key in KEYS:
            value = self.values[key]
            if isinstance(value, (tuple, list)):
                value = " ".join(str(x) for x in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            parts.append(f"{key}={value}")
        return "; ".join(parts)
