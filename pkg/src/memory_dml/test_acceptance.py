"""Desk-scale training runs on the synthetic 16-class dataset (pytest --runslow)"""

from dataclasses import replace

import pytest

from memory_dml import config
from memory_dml.experiment_config import ExperimentConfig
from memory_dml.trainer import TrainConfig, is_collapsed, make_probe, train, warm_start
from memory_dml.weighting import NegativeHalf, PositiveHalf, WeightScheme

SEEDS = (0, 1, 2)
CONTRASTIVE = WeightScheme.for_loss("contrastive", lam=0.5)

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def datasets():
    return ExperimentConfig().load_datasets()


@pytest.fixture(scope="module")
def nuisance_datasets():
    return ExperimentConfig({"informative_dims": config.COLLAPSE_INFORMATIVE_DIMS,
                             "nuisance_sigma": config.COLLAPSE_NUISANCE_SIGMA}).load_datasets()


@pytest.fixture(scope="module")
def drift_runs(datasets):
    train_set, _ = datasets
    runs = {}
    for seed in SEEDS:
        base = TrainConfig(scheme=CONTRASTIVE, iterations=2000, seed=seed)
        probe = make_probe(base, train_set)
        start = warm_start(base, train_set, config.DRIFT_WARMUP_ITERATIONS)
        for name, mode, momentum in config.DRIFT_RUNS:
            _, record = train(replace(base, mode=mode, momentum=momentum), train_set, encoder=start, probe=probe)
            runs[seed, name] = record
    return runs


class TestDriftAndHardNegatives:

    @pytest.mark.parametrize("seed", SEEDS)
    def test_momentum_encoder_drifts_less(self, drift_runs, seed):
        assert drift_runs[seed, "smoco"].mean_drift(200) < drift_runs[seed, "xbm"].mean_drift(200)

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("memory_run", ["xbm", "smoco"])
    def test_memory_yields_more_hard_negatives(self, drift_runs, seed, memory_run):
        minibatch = drift_runs[seed, "minibatch"].mean_hard_negatives()
        assert drift_runs[seed, memory_run].mean_hard_negatives() >= 2.0 * minibatch


class TestRetrieval:

    @pytest.mark.parametrize("seed", SEEDS)
    def test_memory_mode_reaches_high_recall(self, datasets, seed):
        train_set, test_set = datasets
        base = TrainConfig(scheme=CONTRASTIVE, iterations=2000, seed=seed)
        _, memory = train(replace(base, mode="memory", momentum=0.999), train_set, test_set=test_set)
        _, minibatch = train(replace(base, mode="minibatch"), train_set, test_set=test_set)
        assert memory.final_recall_at_1 >= 0.95
        assert minibatch.final_recall_at_1 <= memory.final_recall_at_1

    @pytest.mark.parametrize("seed", SEEDS)
    def test_small_negative_scale_collapses(self, nuisance_datasets, seed):
        train_set, test_set = nuisance_datasets

        def binomial(beta):
            return WeightScheme(positive=PositiveHalf(family="binomial", alpha=2.0, lam=0.5),
                                negative=NegativeHalf(family="binomial", beta=beta, lam=0.5))

        recalls = {}
        for beta in (1.0, 50.0):
            cfg = TrainConfig(mode="memory", momentum=0.999, scheme=binomial(beta), iterations=2000, seed=seed)
            _, record = train(cfg, train_set, test_set=test_set)
            recalls[beta] = record.final_recall_at_1
        assert is_collapsed(recalls[1.0], test_set.num_classes)
        assert not is_collapsed(recalls[50.0], test_set.num_classes)
