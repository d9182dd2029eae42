import json

import numpy as np
import pytest

from experiment import (
    THREADS_ENV_VAR,
    ConfigError,
    SiteDefaults,
    load_config,
    load_experiment_config,
    parse_param,
    replication_int_seed,
    validate_experiment_config,
)


class TestExperimentConfig:
    def test_defaults(self):
        cfg = validate_experiment_config({})
        assert cfg["sim"]["K"] == 3
        assert cfg["lm"]["vocab_size"] == 16
        assert cfg["sweep"]["C"] is None

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            validate_experiment_config({"sim": {"lookahead": 3}})

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError):
            validate_experiment_config({"seeds": 3})

    def test_wrong_type(self):
        with pytest.raises(ConfigError):
            validate_experiment_config({"sim": {"K": "three"}})
        with pytest.raises(ConfigError):
            validate_experiment_config({"sim": {"K": 2.5}})

    def test_bad_choice(self):
        with pytest.raises(ConfigError):
            validate_experiment_config({"sim": {"backup_kind": "neural"}})

    def test_bad_values(self):
        with pytest.raises(ConfigError):
            validate_experiment_config({"replications": 0})
        with pytest.raises(ConfigError):
            validate_experiment_config({"sim": {"rounds": 0}})

    def test_load_file(self, tmp_path):
        filename = tmp_path / "cfg.json"
        filename.write_text(json.dumps({"seed": 4, "sweep": {"batch": [1, 2]}}))
        cfg = load_experiment_config(str(filename))
        assert cfg["seed"] == 4 and cfg["sweep"]["batch"] == [1, 2]

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="Could not load config file"):
            load_experiment_config(str(tmp_path / "missing.json"))


class TestSiteDefaults:
    def test_ini(self, tmp_path, monkeypatch):
        monkeypatch.delenv(THREADS_ENV_VAR, raising=False)
        filename = tmp_path / "config.ini"
        filename.write_text("[stats]\nsignificance: 0.01\n[parallel]\nthreads: 3\n")
        site = SiteDefaults(load_config(str(filename)))
        assert site.significance == 0.01
        assert site.threads == 3
        assert site.rounds == 100000

    def test_env_overrides_threads(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV_VAR, "5")
        assert SiteDefaults().threads == 5

    def test_bad_env(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV_VAR, "many")
        with pytest.raises(ConfigError):
            SiteDefaults()

    def test_missing_ini(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "none.ini"))


class TestParseParam:
    def test_bare_list(self):
        assert parse_param("C", [1.0, 0.5]) == [1.0, 0.5]

    def test_range(self):
        res = parse_param("C", {"type": "range", "range": {"minval": 0.0, "maxval": 1.0, "step": 0.25}})
        np.testing.assert_allclose(res, [0.0, 0.25, 0.5, 0.75])

    def test_logrange_int(self):
        info = {"type": "logrange", "logrange": {"minval": 1, "maxval": 8, "base": 2, "n": 4, "to_int": True}}
        assert parse_param("F", info) == [1, 2, 4, 8]

    def test_empty(self):
        with pytest.raises(ConfigError):
            parse_param("budget", [])

    def test_bad_range(self):
        with pytest.raises(ConfigError):
            parse_param("C", {"type": "range", "range": {"minval": 1.0, "maxval": 0.0, "step": 0.1}})

    def test_unknown_type(self):
        with pytest.raises(ConfigError):
            parse_param("C", {"type": "grid"})


class TestSeeds:
    def test_stable_under_more_replications(self):
        assert [replication_int_seed(7, i) for i in range(3)] == [replication_int_seed(7, i) for i in range(5)][:3]

    def test_distinct(self):
        assert len({replication_int_seed(7, i) for i in range(100)}) == 100
