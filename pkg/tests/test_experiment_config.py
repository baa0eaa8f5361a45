#!/usr/bin/env python3
"""
Tests for experiment configuration loading, validation and seeding
"""

import glob
import json
import os
import sys

import numpy as np
import pytest

# Add parent directory to path to import our modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from errors import ConfigError
from experiment_config import (
    SCHEMA_VERSION, ExperimentConfig, ExperimentConfigLoader, config_from_dict, derive_rng, derive_seed,
    load_config, validate_config_dict, with_override,
)

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'configs')


class TestValidation:
    """Test class for config validation"""

    def test_empty_config_is_valid(self):
        """Test that every key has a usable default"""
        results = validate_config_dict({})
        assert results['is_valid']
        assert results['stats']['dim'] == 16

    def test_defaults(self):
        config = config_from_dict({})
        assert config.method == 'fp'
        assert config.perturbation.sigma_f == 1e-3
        assert config.flow.n_steps == 100
        assert config.mc.k_update == 5

    def test_resolved_form_round_trips(self):
        """Test that the resolved dictionary loads back to an equal config"""
        config = config_from_dict({'seed': 3, 'mc': {'k_update': 2}})
        data = json.loads(config.to_json())
        assert data['schema_version'] == SCHEMA_VERSION
        assert config_from_dict(data) == config

    def test_int_promoted_to_float(self):
        config = config_from_dict({'perturbation': {'sigma_f': 1}})
        assert isinstance(config.perturbation.sigma_f, float)

    @pytest.mark.parametrize("data,fragment", [
        ({'colour': 'red'}, "unknown key 'colour'"),
        ({'mc': {'k_updates': 2}}, "unknown key 'mc.k_updates'"),
        ({'mc': {'k_update': 'two'}}, "'mc.k_update' expects int"),
        ({'mc': {'k_update': True}}, "'mc.k_update' expects int"),
        ({'mc': 3}, "section 'mc' must be an object"),
        ({'schema_version': '0.9'}, "schema_version '0.9'"),
        ({'method': 'hutch'}, "requires n_probes"),
        ({'method': 'metropolis'}, "method must be one of"),
        ({'mc': {'k_update': 40}}, "k_update must be in [1, 16]"),
        ({'perturbation': {'sigma_f': 0.0}}, "sigma_f must be > 0"),
        ({'perturbation': {'sigma_b': 'exact'}}, "'exact' is only available"),
        ({'perturbation': {'sigma_b': 'constant'}}, "positive sigma_b_value"),
        ({'target': {'source': 'pushforward'}}, "needs an affine or identity flow"),
        ({'target': {'source': 'file'}}, "requires target.file"),
        ({'flow': {'kind': 'affine'}}, "requires flow.affine_scale"),
        ({'flow': {'t_min': 20.0}}, "t_min < t_max"),
        ({'train': {'optimizer': 'lbfgs'}}, "optimizer must be one of"),
        ({'sweep': {'axis': 'hidden'}}, "sweep.axis must be one of"),
        ({'diagnostics': {'n_bins': 0}}, "n_bins >= 1"),
        ({'flow': {'n_steps': None}}, "may not be null"),
    ])
    def test_invalid_configs(self, data, fragment):
        """Test that each invalid document is reported with a useful message"""
        results = validate_config_dict(data)
        assert not results['is_valid']
        assert any(fragment in error for error in results['errors']), results['errors']

    def test_nullable_fields(self):
        config = config_from_dict({'mc': {'burn_in': None}, 'corruption': {'weight_concentration': None}})
        assert config.mc.burn_in is None
        assert config.corruption.weight_concentration is None

    def test_not_an_object(self):
        assert not validate_config_dict([1, 2])['is_valid']

    def test_warnings(self):
        results = validate_config_dict({'perturbation': {'sigma_f': 0.5}, 'mc': {'n_steps': 100}})
        assert results['is_valid']
        assert any('sigma_f=0.5' in w for w in results['warnings'])
        assert any('n_steps=100' in w for w in results['warnings'])

    def test_config_from_dict_raises(self):
        with pytest.raises(ConfigError):
            config_from_dict({'mc': {'k_update': 0}})

    def test_mc_and_train_views(self):
        config = config_from_dict({'method': 'hutch', 'hutchinson': {'n_probes': 10},
                                   'sigma_b': {'eps_floor': 1e-5}})
        assert config.mc_config().method_tag == 'hutch(10)'
        assert config.train_config().eps_floor == 1e-5

    @pytest.mark.parametrize("path", sorted(glob.glob(os.path.join(CONFIG_DIR, '*.json'))))
    def test_shipped_configs_are_valid(self, path):
        """Test that every config under configs/ validates"""
        assert isinstance(load_config(path), ExperimentConfig)


class TestLoading:
    """Test class for file loading and overrides"""

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(str(tmp_path / 'missing.json'))

    def test_invalid_json(self, tmp_path):
        path = tmp_path / 'bad.json'
        path.write_text('{"seed": }', encoding='utf-8')
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_loader_prints_status(self, write_json, capsys):
        """Test the loader's status line and summary"""
        path = write_json('config.json', {'seed': 4, 'perturbation': {'sigma_f': 0.5}})
        loader = ExperimentConfigLoader(path)
        config = loader.load()
        output = capsys.readouterr().out
        assert config.seed == 4
        assert '✓ Loaded config' in output
        assert '⚠️' in output
        assert loader.get_summary()['is_valid']

    def test_loader_lists_errors(self, write_json, capsys):
        path = write_json('config.json', {'mc': {'k_update': 0}})
        with pytest.raises(ConfigError):
            ExperimentConfigLoader(path).load()
        assert '✗' in capsys.readouterr().out

    def test_loader_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ExperimentConfigLoader(str(tmp_path / 'none.json'), verbose=False).load()

    def test_override_nested(self):
        config = with_override(ExperimentConfig(), 'perturbation.sigma_f', 0.01)
        assert config.perturbation.sigma_f == 0.01
        assert with_override(config, 'seed', 9).seed == 9

    @pytest.mark.parametrize("key,value", [
        ('perturbation.sigma_g', 0.1), ('nothing.sigma_f', 0.1), ('perturbation.sigma_f', -1.0),
    ])
    def test_override_rejected(self, key, value):
        with pytest.raises(ConfigError):
            with_override(ExperimentConfig(), key, value)


class TestSeeding:
    """Test class for labeled seed derivation"""

    def test_stable_and_distinct(self):
        assert derive_seed(0, 'chain-0') == derive_seed(0, 'chain-0')
        assert derive_seed(0, 'chain-0') != derive_seed(0, 'chain-1')
        assert derive_seed(0, 'chain-0') != derive_seed(1, 'chain-0')
        assert 0 <= derive_seed(7, 'oracle') < 2 ** 128

    def test_streams(self):
        """Test that a labeled stream is a reproducible Philox generator"""
        first = derive_rng(3, 'chain-0')
        assert isinstance(first.bit_generator, np.random.Philox)
        np.testing.assert_array_equal(first.random(5), derive_rng(3, 'chain-0').random(5))
        assert not np.array_equal(derive_rng(3, 'chain-0').random(5), derive_rng(3, 'chain-1').random(5))
