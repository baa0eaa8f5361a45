#!/usr/bin/env python3
"""
Tests for the Gaussian mixture target and the Gaussian prior
"""

import json
import os
import sys

import numpy as np
import pytest

# Add parent directory to path to import our modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from errors import ConfigError
from target_gmm import (
    LOG_2PI, GaussianPrior, GmmSpec, divergence_score_smoothed, energy, gmm_random, hvp_score_smoothed,
    log_density, mode_assign, oracle_mean_energy, responsibilities, sample_exact, score_smoothed,
    spec_summary,
)


def _fd_score(spec, x, sigma, h=1e-6):
    """Central differences of log p(x; sigma)."""
    smoothed = spec.smoothed(sigma)
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        grad[i] = (log_density(smoothed, x + step) - log_density(smoothed, x - step)) / (2 * h)
    return grad


class TestGmmSpec:
    """Test class for GmmSpec validation and serialization"""

    def test_valid_spec_properties(self, two_mode_gmm):
        """Test dim and k of a valid mixture"""
        assert two_mode_gmm.dim == 2
        assert two_mode_gmm.k == 2
        assert not two_mode_gmm.means.flags.writeable

    @pytest.mark.parametrize("weights,means,variances", [
        ([0.5, 0.6], [[0.0], [1.0]], [[1.0], [1.0]]),
        ([-0.5, 1.5], [[0.0], [1.0]], [[1.0], [1.0]]),
        ([1.0], [[0.0, 1.0]], [[1.0]]),
        ([1.0], [[0.0]], [[0.0]]),
        ([1.0], [[np.nan]], [[1.0]]),
        ([0.5, 0.5], [[0.0]], [[1.0]]),
    ])
    def test_invalid_spec_rejected(self, weights, means, variances):
        """Test that malformed mixtures raise ConfigError"""
        with pytest.raises(ConfigError):
            GmmSpec(weights, means, variances)

    def test_smoothed_adds_variance(self, two_mode_gmm):
        """Test that smoothing adds sigma^2 to every variance"""
        smoothed = two_mode_gmm.smoothed(0.5)
        np.testing.assert_allclose(smoothed.variances, two_mode_gmm.variances + 0.25)
        np.testing.assert_array_equal(smoothed.means, two_mode_gmm.means)

    def test_save_and_load_json(self, two_mode_gmm, tmp_path):
        """Test that a saved mixture reloads bit for bit"""
        path = str(tmp_path / 'target.json')
        two_mode_gmm.save_json(path)
        loaded = GmmSpec.load_json(path)
        np.testing.assert_array_equal(loaded.weights, two_mode_gmm.weights)
        np.testing.assert_array_equal(loaded.means, two_mode_gmm.means)
        np.testing.assert_array_equal(loaded.variances, two_mode_gmm.variances)

    def test_load_missing_file(self, tmp_path):
        """Test loading a non-existent file"""
        with pytest.raises(FileNotFoundError):
            GmmSpec.load_json(str(tmp_path / 'missing.json'))

    def test_load_invalid_json(self, tmp_path):
        """Test loading a file that is not JSON"""
        path = tmp_path / 'broken.json'
        path.write_text('{ "weights": [1.0], ', encoding='utf-8')
        with pytest.raises(ConfigError):
            GmmSpec.load_json(str(path))

    def test_from_dict_dim_mismatch(self):
        """Test that a declared dim must match the means"""
        with pytest.raises(ConfigError):
            GmmSpec.from_dict({'dim': 3, 'weights': [1.0], 'means': [[0.0, 0.0]], 'variances': [[1.0, 1.0]]})

    def test_from_dict_missing_fields(self):
        with pytest.raises(ConfigError):
            GmmSpec.from_dict({'weights': [1.0]})

    def test_summary(self, separated_gmm):
        """Test the manifest summary"""
        summary = spec_summary(separated_gmm)
        assert summary['dim'] == 3
        assert summary['k'] == 4
        assert summary['min_mean_distance'] == pytest.approx(8.0 * np.sqrt(2.0))


class TestGmmRandom:
    """Test class for random mixture generation"""

    def test_shapes_and_ranges(self, rng):
        """Test shapes, equal weights and the variance floor"""
        spec = gmm_random(16, 4, rng)
        assert spec.means.shape == (4, 16)
        np.testing.assert_allclose(spec.weights, 0.25)
        assert np.all(spec.variances >= 0.4)

    def test_deterministic_for_seed(self):
        """Test that the same seed gives the same mixture"""
        a = gmm_random(5, 3, np.random.default_rng(7))
        b = gmm_random(5, 3, np.random.default_rng(7))
        np.testing.assert_array_equal(a.means, b.means)
        np.testing.assert_array_equal(a.variances, b.variances)

    def test_single_component_edge_case(self, rng):
        """Test the D=2, k=1 mixture"""
        spec = gmm_random(2, 1, rng)
        assert spec.k == 1
        assert spec.weights[0] == 1.0

    @pytest.mark.parametrize("dim,k", [(0, 1), (2, 0), (-1, 3)])
    def test_invalid_sizes(self, rng, dim, k):
        with pytest.raises(ConfigError):
            gmm_random(dim, k, rng)


class TestEnergy:
    """Test class for the target energy"""

    def test_single_gaussian_at_mean(self):
        """Test the energy of a 1-D Gaussian at its mean"""
        spec = GmmSpec([1.0], [[2.0]], [[0.25]])
        assert energy(spec, np.array([2.0])) == pytest.approx(0.5 * (np.log(0.25) + LOG_2PI))

    def test_batch_matches_single(self, two_mode_gmm, rng):
        """Test that batched evaluation matches point-wise evaluation"""
        x = rng.standard_normal((7, 2))
        batch = two_mode_gmm.energy(x)
        assert batch.shape == (7,)
        for i in range(7):
            assert batch[i] == pytest.approx(float(two_mode_gmm.energy(x[i])), rel=1e-13)

    def test_far_point_is_finite(self, two_mode_gmm):
        """Test that the log-sum-exp keeps far-away energies finite"""
        value = energy(two_mode_gmm, np.array([1e3, -1e3]))
        assert np.isfinite(value)
        assert value > 1e5

    def test_dimension_mismatch(self, two_mode_gmm):
        with pytest.raises(ConfigError):
            energy(two_mode_gmm, np.zeros(3))

    def test_responsibilities_sum_to_one(self, two_mode_gmm, rng):
        weights = responsibilities(two_mode_gmm, rng.standard_normal((10, 2)), sigma=0.7)
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0)


class TestSymmetries:
    """Test class for component permutation and translation of the mixture"""

    @pytest.mark.parametrize("order", [[1, 0], [0, 1]])
    def test_log_density_invariant_under_permutation(self, two_mode_gmm, rng, order):
        x = 2.0 * rng.standard_normal((25, 2))
        np.testing.assert_allclose(log_density(two_mode_gmm.permuted(order), x), log_density(two_mode_gmm, x),
                                   rtol=0, atol=1e-12)

    def test_permutation_reorders_components(self, separated_gmm, rng):
        """Test that weights, responsibilities and mode labels follow the new order"""
        order = [2, 0, 3, 1]
        permuted = separated_gmm.permuted(order)
        np.testing.assert_array_equal(permuted.weights, separated_gmm.weights[order])
        x = sample_exact(separated_gmm, 200, rng)
        np.testing.assert_allclose(responsibilities(permuted, x), responsibilities(separated_gmm, x)[:, order],
                                   atol=1e-12)
        np.testing.assert_array_equal(np.array(order)[mode_assign(permuted, x)], mode_assign(separated_gmm, x))
        np.testing.assert_allclose(energy(permuted, x), energy(separated_gmm, x), atol=1e-10)

    def test_energy_translation_covariant(self, two_mode_gmm, rng):
        """Test that shifting the means and x by the same offset leaves the energy unchanged"""
        offset = np.array([3.5, -1.25])
        x = rng.standard_normal((25, 2))
        shifted = two_mode_gmm.shifted(offset)
        np.testing.assert_allclose(energy(shifted, x + offset), energy(two_mode_gmm, x), rtol=0, atol=1e-10)
        np.testing.assert_allclose(shifted.means, two_mode_gmm.means + offset)
        np.testing.assert_array_equal(shifted.variances, two_mode_gmm.variances)

    def test_score_translation_covariant(self, two_mode_gmm, rng):
        offset = np.array([-2.0, 0.75])
        x = rng.standard_normal((5, 2))
        np.testing.assert_allclose(score_smoothed(two_mode_gmm.shifted(offset), x + offset, 0.5),
                                   score_smoothed(two_mode_gmm, x, 0.5), atol=1e-10)

    def test_shift_must_match_dimension(self, two_mode_gmm):
        with pytest.raises(ConfigError):
            two_mode_gmm.shifted(np.zeros(3))

    @pytest.mark.parametrize("order", [[0, 0], [0], [1, 2]])
    def test_invalid_permutation(self, two_mode_gmm, order):
        with pytest.raises(ConfigError):
            two_mode_gmm.permuted(order)


class TestSmoothedScore:
    """Test class for the analytic score, Laplacian and Hessian-vector product"""

    @pytest.mark.parametrize("sigma", [0.0, 0.3, 2.0])
    def test_score_matches_finite_differences(self, two_mode_gmm, sigma):
        """Test the score against central differences of log p(x; sigma)"""
        x = np.array([0.2, -0.1])
        np.testing.assert_allclose(score_smoothed(two_mode_gmm, x, sigma),
                                   _fd_score(two_mode_gmm, x, sigma), atol=1e-6)

    @pytest.mark.parametrize("sigma", [0.0, 0.5])
    def test_laplacian_matches_hessian_trace(self, two_mode_gmm, sigma):
        """Test the Laplacian against the trace of a finite-difference Hessian"""
        x = np.array([0.4, 0.3])
        h = 1e-5
        trace = 0.0
        for i in range(2):
            step = np.zeros(2)
            step[i] = h
            trace += (score_smoothed(two_mode_gmm, x + step, sigma)[i]
                      - score_smoothed(two_mode_gmm, x - step, sigma)[i]) / (2 * h)
        assert float(divergence_score_smoothed(two_mode_gmm, x, sigma)) == pytest.approx(trace, abs=1e-5)

    def test_hvp_matches_directional_derivative(self, two_mode_gmm):
        """Test the HVP against a directional difference of the score"""
        x = np.array([-0.3, 0.8])
        u = np.array([0.6, -1.1])
        h = 1e-5
        expected = (score_smoothed(two_mode_gmm, x + h * u, 0.4)
                    - score_smoothed(two_mode_gmm, x - h * u, 0.4)) / (2 * h)
        np.testing.assert_allclose(hvp_score_smoothed(two_mode_gmm, x, 0.4, u), expected, atol=1e-6)

    def test_hvp_with_probe_axis(self, two_mode_gmm):
        """Test that a leading probe axis is broadcast against a single point"""
        x = np.array([0.1, 0.2])
        probes = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, -0.5]])
        stacked = hvp_score_smoothed(two_mode_gmm, x, 0.2, probes)
        assert stacked.shape == (3, 2)
        for j in range(3):
            np.testing.assert_allclose(stacked[j], hvp_score_smoothed(two_mode_gmm, x, 0.2, probes[j]),
                                       rtol=1e-12)

    def test_hvp_trace_is_laplacian(self, two_mode_gmm):
        """Test that sum_i e_i . H e_i equals the Laplacian"""
        x = np.array([0.7, -0.2])
        hessian = hvp_score_smoothed(two_mode_gmm, x, 0.1, np.eye(2))
        assert np.trace(hessian) == pytest.approx(float(divergence_score_smoothed(two_mode_gmm, x, 0.1)),
                                                  rel=1e-12)

    def test_negative_sigma_rejected(self, two_mode_gmm):
        with pytest.raises(ConfigError):
            score_smoothed(two_mode_gmm, np.zeros(2), -1.0)


class TestExactSampling:
    """Test class for the exact sampler and the oracle"""

    def test_single_gaussian_moments(self, rng):
        """Test sample mean and variance of a one-component mixture"""
        spec = GmmSpec([1.0], [[1.0, -2.0]], [[0.5, 2.0]])
        samples = sample_exact(spec, 40000, rng)
        np.testing.assert_allclose(samples.mean(axis=0), [1.0, -2.0], atol=0.04)
        np.testing.assert_allclose(samples.var(axis=0), [0.5, 2.0], rtol=0.05)

    def test_component_frequencies(self, separated_gmm, rng):
        """Test that component labels follow the weights and mode_assign recovers them"""
        samples, components = sample_exact(separated_gmm, 20000, rng, return_components=True)
        np.testing.assert_allclose(np.bincount(components, minlength=4) / 20000, separated_gmm.weights,
                                   atol=0.015)
        np.testing.assert_array_equal(mode_assign(separated_gmm, samples), components)

    def test_mode_assign_single_point(self, separated_gmm):
        assert mode_assign(separated_gmm, np.array([0.0, -8.0, 0.0])) == 3

    def test_mode_assign_tie_goes_to_lowest_index(self):
        """Test that a point equidistant from two symmetric components is assigned to 0"""
        spec = GmmSpec([0.5, 0.5], [[-1.0, 0.0], [1.0, 0.0]], [[1.0, 1.0], [1.0, 1.0]])
        assert mode_assign(spec, np.array([0.0, 3.0])) == 0
        np.testing.assert_array_equal(mode_assign(spec, np.array([[0.0, -2.0], [0.0, 0.0]])), [0, 0])
        assert mode_assign(spec.permuted([1, 0]), np.array([0.0, 3.0])) == 0

    def test_oracle_standard_normal(self, rng):
        """Test the oracle mean energy of a standard normal, D/2 (1 + log 2 pi)"""
        dim = 4
        spec = GmmSpec([1.0], [np.zeros(dim)], [np.ones(dim)])
        mean, se = oracle_mean_energy(spec, 20000, rng)
        assert abs(mean - 0.5 * dim * (1.0 + LOG_2PI)) < 5 * se

    def test_sample_count_must_be_positive(self, two_mode_gmm, rng):
        with pytest.raises(ConfigError):
            sample_exact(two_mode_gmm, 0, rng)

    @pytest.mark.parametrize("n", [0, 1])
    def test_oracle_needs_two_samples(self, two_mode_gmm, rng, n):
        """Test that the oracle refuses sample counts without a standard error"""
        with pytest.raises(ConfigError):
            oracle_mean_energy(two_mode_gmm, n, rng)


class TestGaussianPrior:
    """Test class for the isotropic prior"""

    def test_energy_without_normalization(self):
        """Test u_Z(z) = |z|^2 / (2 scale^2)"""
        prior = GaussianPrior(3, 2.0)
        assert float(prior.energy(np.array([2.0, 0.0, 0.0]))) == pytest.approx(0.5)

    def test_sample_shapes(self, rng):
        prior = GaussianPrior(5, 1.5)
        assert prior.sample(rng).shape == (5,)
        assert prior.sample(rng, 3).shape == (3, 5)
        assert prior.sample_marginal(rng, 2).shape == (2,)

    @pytest.mark.parametrize("dim,scale", [(0, 1.0), (2, 0.0), (2, -1.0)])
    def test_invalid_prior(self, dim, scale):
        with pytest.raises(ConfigError):
            GaussianPrior(dim, scale)

    def test_json_document_keys(self, two_mode_gmm):
        """Test that the serialized document carries dim and k"""
        data = json.loads(json.dumps(two_mode_gmm.to_dict()))
        assert data['dim'] == 2 and data['k'] == 2
