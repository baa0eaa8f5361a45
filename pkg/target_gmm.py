#!/usr/bin/env python3
"""
Gaussian Mixture Target

This module defines the diagonal-covariance Gaussian mixture used as the
Boltzmann target, its energy u_X(x) = -log p(x), and the analytic quantities
of the Gaussian-smoothed mixture p(x; sigma) needed by the probability-flow
ODE and the Jacobian baselines: score, Laplacian and Hessian-vector products.
It also holds the Gaussian prior used as u_Z(z) and an exact mixture sampler
used only as a verification oracle.

Every function accepts a single point of shape (D,) or a batch of shape
(..., D); reductions run over the last axis.
"""

import json
import os
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from errors import ConfigError

LOG_2PI = float(np.log(2.0 * np.pi))


class GmmSpec:
    """Immutable diagonal Gaussian mixture: weights, means and variances."""

    def __init__(self, weights: Sequence[float], means: Sequence[Sequence[float]],
                 variances: Sequence[Sequence[float]]):
        weights = np.array(weights, dtype=float)
        means = np.array(means, dtype=float)
        variances = np.array(variances, dtype=float)

        if weights.ndim != 1 or weights.size < 1:
            raise ConfigError("weights must be a non-empty 1-D sequence")
        if means.ndim != 2 or means.shape[0] != weights.size:
            raise ConfigError(f"means must have shape (k, D) with k={weights.size}, got {means.shape}")
        if variances.shape != means.shape:
            raise ConfigError(f"variances shape {variances.shape} does not match means shape {means.shape}")
        if means.shape[1] < 1:
            raise ConfigError("dimension must be at least 1")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ConfigError(f"weights must be non-negative and sum to 1 (sum={weights.sum()!r})")
        if not np.all(np.isfinite(means)):
            raise ConfigError("means must be finite")
        if not np.all(variances > 0) or not np.all(np.isfinite(variances)):
            raise ConfigError("every variance entry must be positive and finite")

        for array in (weights, means, variances):
            array.setflags(write=False)
        self.weights = weights
        self.means = means
        self.variances = variances

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    @property
    def k(self) -> int:
        return int(self.weights.size)

    def energy(self, x: np.ndarray) -> np.ndarray:
        """Target energy u_X(x) = -log p(x)."""
        return energy(self, x)

    def smoothed(self, sigma: float) -> 'GmmSpec':
        """The mixture convolved with N(0, sigma^2 I): every variance grows by sigma^2."""
        return GmmSpec(self.weights, self.means, self.variances + float(sigma) ** 2)

    def shifted(self, offset: np.ndarray) -> 'GmmSpec':
        """Every mean moved by the same offset; energies follow as u(x - offset)."""
        offset = np.asarray(offset, dtype=float)
        if offset.shape != (self.dim,):
            raise ConfigError(f"offset must have shape ({self.dim},), got {offset.shape}")
        return GmmSpec(self.weights, self.means + offset, self.variances)

    def permuted(self, order: Sequence[int]) -> 'GmmSpec':
        """Components listed in a new order; the density is unchanged."""
        order = list(order)
        if sorted(order) != list(range(self.k)):
            raise ConfigError(f"order must be a permutation of range({self.k}), got {order}")
        return GmmSpec(self.weights[order], self.means[order], self.variances[order])

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready dictionary; floats keep their shortest exact repr."""
        return {
            'dim': self.dim,
            'k': self.k,
            'weights': [float(w) for w in self.weights],
            'means': [[float(v) for v in row] for row in self.means],
            'variances': [[float(v) for v in row] for row in self.variances],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'GmmSpec':
        missing = [key for key in ('weights', 'means', 'variances') if key not in data]
        if missing:
            raise ConfigError(f"GMM document missing fields: {missing}")
        spec = cls(data['weights'], data['means'], data['variances'])
        if 'dim' in data and int(data['dim']) != spec.dim:
            raise ConfigError(f"GMM document declares dim={data['dim']} but means have D={spec.dim}")
        if 'k' in data and int(data['k']) != spec.k:
            raise ConfigError(f"GMM document declares k={data['k']} but has {spec.k} components")
        return spec

    def save_json(self, path: str) -> None:
        with open(path, 'w', encoding='utf-8') as handle:
            json.dump(self.to_dict(), handle, indent=2)
            handle.write('\n')

    @classmethod
    def load_json(cls, path: str) -> 'GmmSpec':
        if not os.path.exists(path):
            raise FileNotFoundError(f"GMM file '{path}' not found")
        with open(path, 'r', encoding='utf-8') as handle:
            try:
                data = json.load(handle)
            except json.JSONDecodeError as e:
                raise ConfigError(f"Invalid JSON in GMM file '{path}': {e}") from e
        return cls.from_dict(data)

    def __repr__(self) -> str:
        return f"GmmSpec(dim={self.dim}, k={self.k})"


class GaussianPrior:
    """Isotropic prior N(0, scale^2 I) with energy u_Z(z) = |z|^2 / (2 scale^2)."""

    def __init__(self, dim: int, scale: float = 1.0):
        if dim < 1:
            raise ConfigError(f"prior dimension must be >= 1, got {dim}")
        if not scale > 0:
            raise ConfigError(f"prior scale must be positive, got {scale}")
        self.dim = int(dim)
        self.scale = float(scale)

    def energy(self, z: np.ndarray) -> np.ndarray:
        z = _check_dim(z, self.dim)
        return 0.5 * np.sum(z * z, axis=-1) / self.scale ** 2

    def sample(self, rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
        shape = (self.dim,) if n is None else (n, self.dim)
        return self.scale * rng.standard_normal(shape)

    def sample_marginal(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Independent draws of single coordinates (the prior factorizes)."""
        return self.scale * rng.standard_normal(size)

    def __repr__(self) -> str:
        return f"GaussianPrior(dim={self.dim}, scale={self.scale})"


def _check_dim(x: np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != dim:
        raise ConfigError(f"expected vectors of length {dim}, got shape {x.shape}")
    return x


def gmm_random(dim: int, k: int, rng: np.random.Generator, mean_scale: float = 1.0) -> GmmSpec:
    """
    Draw a random mixture: standard-normal means (times mean_scale), diagonal
    variances 0.4 + |N(0.1, 0.5)| (0.5 read as a standard deviation) and
    equal weights 1/k.

    Args:
        dim: Dimension D (>= 1)
        k: Number of components (>= 1)
        rng: Caller-owned random generator
        mean_scale: Multiplier applied to the means; > 1 separates the modes

    Returns:
        A new GmmSpec
    """
    if not isinstance(dim, (int, np.integer)) or dim < 1:
        raise ConfigError(f"dim must be a positive integer, got {dim!r}")
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ConfigError(f"k must be a positive integer, got {k!r}")
    if not mean_scale > 0:
        raise ConfigError(f"mean_scale must be positive, got {mean_scale!r}")

    means = mean_scale * rng.standard_normal((k, dim))
    variances = 0.4 + np.abs(rng.normal(0.1, 0.5, size=(k, dim)))
    weights = np.full(k, 1.0 / k)
    return GmmSpec(weights, means, variances)


def _component_log_terms(spec: GmmSpec, x: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """log pi_j + log N(x | mu_j, diag(v_j)) with shape (..., k)."""
    diff = x[..., None, :] - spec.means
    quad = np.sum(diff * diff / variances, axis=-1)
    log_norm = np.sum(np.log(variances), axis=-1) + spec.dim * LOG_2PI
    with np.errstate(divide='ignore'):
        log_weights = np.log(spec.weights)
    return log_weights - 0.5 * (log_norm + quad)


def log_density(spec: GmmSpec, x: np.ndarray) -> np.ndarray:
    """log p(x) through a log-sum-exp over components."""
    x = _check_dim(x, spec.dim)
    terms = _component_log_terms(spec, x, spec.variances)
    return logsumexp(terms, axis=-1)


def energy(spec: GmmSpec, x: np.ndarray) -> np.ndarray:
    return -log_density(spec, x)


def responsibilities(spec: GmmSpec, x: np.ndarray, sigma: float = 0.0) -> np.ndarray:
    """Posterior component probabilities w_j(x) of the sigma-smoothed mixture."""
    x = _check_dim(x, spec.dim)
    terms = _component_log_terms(spec, x, spec.variances + float(sigma) ** 2)
    return softmax(terms, axis=-1)


class _ScoreTerms:
    """Responsibilities, component scores and score at x, shared by the score,
    Laplacian and Hessian-vector product."""

    __slots__ = ('weights', 'inv_var', 'component_scores', 'score')

    def __init__(self, spec: GmmSpec, x: np.ndarray, sigma: float):
        if sigma < 0:
            raise ConfigError(f"sigma must be non-negative, got {sigma}")
        variances = spec.variances + float(sigma) ** 2
        self.inv_var = 1.0 / variances
        self.weights = softmax(_component_log_terms(spec, x, variances), axis=-1)
        self.component_scores = -(x[..., None, :] - spec.means) * self.inv_var
        self.score = np.sum(self.weights[..., None] * self.component_scores, axis=-2)

    def laplacian(self) -> np.ndarray:
        per_component = -np.sum(self.inv_var, axis=-1) + np.sum(self.component_scores ** 2, axis=-1)
        return np.sum(self.weights * per_component, axis=-1) - np.sum(self.score ** 2, axis=-1)

    def hvp(self, u: np.ndarray) -> np.ndarray:
        # u may carry extra leading axes (e.g. a probe axis) in front of x's shape.
        w = self.weights[..., None]
        u_k = u[..., None, :]
        result = -np.sum(w * self.inv_var * u_k, axis=-2)
        g_dot_u = np.sum(self.component_scores * u_k, axis=-1)
        result = result + np.sum(w * self.component_scores * g_dot_u[..., None], axis=-2)
        s_dot_u = np.sum(self.score * u, axis=-1, keepdims=True)
        return result - self.score * s_dot_u


def score_terms(spec: GmmSpec, x: np.ndarray, sigma: float) -> _ScoreTerms:
    return _ScoreTerms(spec, _check_dim(x, spec.dim), sigma)


def score_smoothed(spec: GmmSpec, x: np.ndarray, sigma: float) -> np.ndarray:
    """Exact gradient of log p(x; sigma)."""
    return score_terms(spec, x, sigma).score


def divergence_score_smoothed(spec: GmmSpec, x: np.ndarray, sigma: float) -> np.ndarray:
    """Exact Laplacian of log p(x; sigma)."""
    return score_terms(spec, x, sigma).laplacian()


def hvp_score_smoothed(spec: GmmSpec, x: np.ndarray, sigma: float, u: np.ndarray) -> np.ndarray:
    """Exact Hessian of log p(x; sigma) applied to u."""
    u = _check_dim(u, spec.dim)
    return score_terms(spec, x, sigma).hvp(u)


def sample_exact(spec: GmmSpec, n: int, rng: np.random.Generator,
                 return_components: bool = False):
    """I.i.d. mixture samples: categorical component, then a Gaussian draw."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    components = rng.choice(spec.k, size=n, p=spec.weights)
    noise = rng.standard_normal((n, spec.dim))
    samples = spec.means[components] + np.sqrt(spec.variances[components]) * noise
    if return_components:
        return samples, components
    return samples


def mode_assign(spec: GmmSpec, x: np.ndarray) -> np.ndarray:
    """Index of the component with maximal responsibility (lowest index on ties)."""
    x = _check_dim(x, spec.dim)
    terms = _component_log_terms(spec, x, spec.variances)
    assigned = np.argmax(terms, axis=-1)
    if assigned.ndim == 0:
        return int(assigned)
    return assigned


def spec_summary(spec: GmmSpec) -> Dict[str, Any]:
    """Short description used in manifests and reports."""
    distances: List[float] = []
    for i in range(spec.k):
        for j in range(i + 1, spec.k):
            distances.append(float(np.linalg.norm(spec.means[i] - spec.means[j])))
    return {
        'dim': spec.dim,
        'k': spec.k,
        'min_variance': float(spec.variances.min()),
        'max_variance': float(spec.variances.max()),
        'min_mean_distance': min(distances) if distances else None,
    }


def oracle_mean_energy(spec: GmmSpec, n: int, rng: np.random.Generator) -> Tuple[float, float]:
    """Mean target energy and its standard error from n exact samples."""
    if n < 2:
        raise ConfigError(f"the oracle needs at least 2 samples for a standard error, got {n}")
    energies = energy(spec, sample_exact(spec, n, rng))
    return float(energies.mean()), float(energies.std(ddof=1) / np.sqrt(n))
