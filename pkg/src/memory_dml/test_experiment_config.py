from pathlib import Path

import numpy as np
import pytest

from memory_dml import config
from memory_dml.errors import ConfigError
from memory_dml.experiment_config import KEYS, ExperimentConfig

CONFIG_DIR = Path(__file__).resolve().parents[2] / "data" / "configs"


class TestParse:

    def test_defaults(self):
        cfg = ExperimentConfig.parse("")
        assert all(cfg[key] == default for key, (_, default) in KEYS.items())

    def test_values_and_comments(self):
        cfg = ExperimentConfig.parse(
            "# s-MoCo run\n"
            "mode = memory\n"
            "momentum = 0.99   # trailing comment\n"
            "hidden_dims = 32, 16\n"
            "lr_decay = yes\n"
            "memory_size = none\n"
        )
        assert cfg["mode"] == "memory"
        assert cfg["momentum"] == 0.99
        assert cfg["hidden_dims"] == (32, 16)
        assert cfg["lr_decay"] is True
        assert cfg["memory_size"] is None

    @pytest.mark.parametrize("text,message", [
        ("momentum 0.9", "expected 'key = value'"),
        ("gamma = 1", "unknown config key 'gamma'"),
        ("alpha = 1\nalpha = 2", "duplicate key 'alpha'"),
        ("iterations = many", "bad value for 'iterations'"),
        ("lr_decay = maybe", "bad value for 'lr_decay'"),
    ])
    def test_errors_name_source_and_line(self, text, message):
        with pytest.raises(ConfigError, match=message) as excinfo:
            ExperimentConfig.parse(text, source="run.conf")
        line = len(text.splitlines())
        assert str(excinfo.value).startswith(f"run.conf:{line}:")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="config file not found"):
            ExperimentConfig.from_file(tmp_path / "nope.conf")

    @pytest.mark.parametrize("name", sorted(p.name for p in CONFIG_DIR.glob("*.conf")))
    def test_shipped_configs_resolve(self, name):
        cfg = ExperimentConfig.from_file(CONFIG_DIR / name)
        train_config = cfg.train_config()
        assert train_config.iterations > 0
        assert cfg.source.endswith(name)


class TestOverrides:

    def test_none_is_skipped(self):
        cfg = ExperimentConfig.parse("alpha = 3").with_overrides({"alpha": None, "beta": 20.0})
        assert cfg["alpha"] == 3.0 and cfg["beta"] == 20.0

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ExperimentConfig().with_overrides({"gamma": 1.0})

    def test_original_unchanged(self):
        base = ExperimentConfig()
        base.with_overrides({"momentum": 0.0})
        assert base["momentum"] != 0.0


class TestResolution:

    def test_scheme_halves(self):
        cfg = ExperimentConfig.parse("pos = binomial\nneg = ms\nalpha = 2\nbeta = 40\nlambda = 0.6")
        scheme = cfg.scheme()
        assert scheme.positive.family == "binomial" and scheme.negative.family == "ms"
        assert scheme.negative.beta == 40.0 and scheme.positive.lam == 0.6

    def test_aliases(self):
        scheme = ExperimentConfig.parse("pos = binominal\nneg = npair").scheme()
        assert scheme.positive.family == "binomial"
        assert scheme.negative.family == "infonce" and scheme.negative.tau == 1.0

    def test_invalid_scheme_is_config_error(self):
        with pytest.raises(ConfigError, match="invalid weight scheme"):
            ExperimentConfig.parse("pos = hll\nneg = hll\na = 0.6\nb = 0.4").scheme()

    def test_train_config(self):
        cfg = ExperimentConfig.parse("mode = minibatch\nadam_beta1 = 0.8\nrecall_ks = 1 4\nseed = 9")
        train_config = cfg.train_config()
        assert train_config.mode == "minibatch"
        assert train_config.adam_betas == (0.8, KEYS["adam_beta2"][1])
        assert train_config.recall_ks == (1, 4)
        assert train_config.seed == 9

    def test_invalid_train_config(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.parse("mode = queue").train_config()

    def test_synthetic_datasets(self):
        cfg = ExperimentConfig.parse("num_classes = 6\nper_class = 4\ninput_dim = 3\ntrain_fraction = 0.5")
        train_set, test_set = cfg.load_datasets()
        assert train_set.num_classes == 3 and test_set.num_classes == 3
        assert train_set.input_dim == 3

    def test_nuisance_dimensions(self):
        cfg = ExperimentConfig.parse("num_classes = 6\nper_class = 4\ninput_dim = 5\n"
                                     "informative_dims = 2\nnuisance_sigma = 0")
        train_set, test_set = cfg.load_datasets()
        np.testing.assert_array_equal(train_set.inputs[:, 2:], 0.0)
        np.testing.assert_array_equal(test_set.inputs[:, 2:], 0.0)
        assert cfg["drift_warmup"] == config.DRIFT_WARMUP_ITERATIONS

    def test_csv_dataset(self, tmp_path):
        path = tmp_path / "vectors.csv"
        path.write_text("".join(f"{c}.0,{i}.5,{c}\n" for c in range(4) for i in range(3)))
        train_set, test_set = ExperimentConfig({"dataset": str(path)}).load_datasets()
        assert len(train_set) + len(test_set) == 12

    def test_describe_lists_every_key(self):
        text = ExperimentConfig.parse("hidden_dims = 8 4\nlr_decay = true").describe()
        assert "hidden_dims=8 4" in text and "lr_decay=true" in text
        assert text.count("=") == len(KEYS)
