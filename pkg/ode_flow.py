#!/usr/bin/env python3
"""
Probability-Flow ODE

The base flow f: z -> x is the probability-flow ODE of the EDM schedule
(s(t) = 1, sigma(t) = t)

    dx/dt = v(x, t) = -t * grad log p(x; t)

integrated with Heun's method on the power-law time grid. Generation runs
from t_max down to t_min; the inverse runs the same grid upwards. The score
comes from an analytic "model" mixture, which may differ from the target on
purpose so that the flow is imperfect.

Besides plain integration this module carries the two Jacobian baselines:
the exact log-determinant as the time integral of the velocity divergence,
and its Hutchinson estimate with Gaussian probes.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from errors import ConfigError, NumericError
from target_gmm import GaussianPrior, GmmSpec, _check_dim, score_terms

logger = logging.getLogger(__name__)

COST_MODELS = ('fast', 'per_coordinate')


@dataclass(frozen=True)
class TimeGrid:
    t_min: float = 0.01
    t_max: float = 15.0
    n_steps: int = 100
    rho: float = 3.0

    @property
    def times(self) -> np.ndarray:
        """Increasing grid t_1 = t_min, ..., t_N = t_max."""
        inv_rho = 1.0 / self.rho
        fractions = np.arange(self.n_steps) / (self.n_steps - 1)
        base = self.t_min ** inv_rho + fractions * (self.t_max ** inv_rho - self.t_min ** inv_rho)
        grid = base ** self.rho
        # Pin the endpoints against rounding in the power transform.
        grid[0] = self.t_min
        grid[-1] = self.t_max
        return grid


def time_grid(t_min: float = 0.01, t_max: float = 15.0, n_steps: int = 100, rho: float = 3.0) -> TimeGrid:
    if not (0 < t_min < t_max) or not np.isfinite(t_max):
        raise ConfigError(f"time grid needs 0 < t_min < t_max, got t_min={t_min}, t_max={t_max}")
    if int(n_steps) != n_steps or n_steps < 2:
        raise ConfigError(f"time grid needs an integer n_steps >= 2, got {n_steps}")
    if not rho > 0:
        raise ConfigError(f"time grid needs rho > 0, got {rho}")
    return TimeGrid(float(t_min), float(t_max), int(n_steps), float(rho))


class OdeFlow:
    """Probability-flow ODE driven by the analytic score of `model`."""

    def __init__(self, model: GmmSpec, grid: Optional[TimeGrid] = None):
        self.model = model
        self.grid = grid or TimeGrid()
        self._times = self.grid.times

    @property
    def dim(self) -> int:
        return self.model.dim

    def prior(self) -> GaussianPrior:
        """EDM prior N(0, t_max^2 I)."""
        return GaussianPrior(self.dim, self.grid.t_max)

    def forward(self, z: np.ndarray) -> np.ndarray:
        return integrate_forward(self, z)

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return integrate_backward(self, x)

    def __repr__(self) -> str:
        return f"OdeFlow(dim={self.dim}, k={self.model.k}, n_steps={self.grid.n_steps})"


def velocity(flow: OdeFlow, x: np.ndarray, t: float) -> np.ndarray:
    return -t * score_terms(flow.model, x, t).score


def velocity_divergence(flow: OdeFlow, x: np.ndarray, t: float) -> np.ndarray:
    return -t * score_terms(flow.model, x, t).laplacian()


# A divergence rule maps (x, t, score terms at (x, t)) to the divergence of v.
DivergenceRule = Callable[[np.ndarray, float, object], np.ndarray]


def _exact_divergence(x, t, terms):
    return -t * terms.laplacian()


def _basis_divergence(x, t, terms):
    # One Hessian-vector product per coordinate: D passes, like building the full Jacobian.
    total = np.zeros(x.shape[:-1])
    for i in range(x.shape[-1]):
        basis = np.zeros_like(x)
        basis[..., i] = 1.0
        total = total + (-t) * terms.hvp(basis)[..., i]
    return total


def _heun(flow: OdeFlow, state: np.ndarray, times: np.ndarray,
          divergence: Optional[DivergenceRule] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Heun (explicit trapezoid) integration over `times` in the given order.
    When `divergence` is set, the divergence at both stages is accumulated with
    the same trapezoid weights, giving the log-determinant of the map.
    """
    x = np.array(state, dtype=float)
    log_det = np.zeros(x.shape[:-1])
    model = flow.model
    for i in range(len(times) - 1):
        t_cur, t_next = float(times[i]), float(times[i + 1])
        h = t_next - t_cur
        terms_cur = score_terms(model, x, t_cur)
        k1 = -t_cur * terms_cur.score
        x_pred = x + h * k1
        terms_next = score_terms(model, x_pred, t_next)
        k2 = -t_next * terms_next.score
        if divergence is not None:
            div_cur = divergence(x, t_cur, terms_cur)
            div_next = divergence(x_pred, t_next, terms_next)
            log_det = log_det + 0.5 * h * (div_cur + div_next)
        x = x + 0.5 * h * (k1 + k2)
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(log_det)):
            raise NumericError("non-finite state during ODE integration", step=i)
    return x, log_det


def integrate_forward(flow: OdeFlow, z: np.ndarray) -> np.ndarray:
    """x = f(z): integrate from t_max down to t_min."""
    z = _check_dim(z, flow.dim)
    x, _ = _heun(flow, z, flow._times[::-1])
    return x


def integrate_backward(flow: OdeFlow, x: np.ndarray) -> np.ndarray:
    """z = f^-1(x): integrate from t_min up to t_max."""
    x = _check_dim(x, flow.dim)
    z, _ = _heun(flow, x, flow._times)
    return z


def integrate_with_divergence(flow: OdeFlow, z: np.ndarray,
                              cost_model: str = 'fast') -> Tuple[np.ndarray, np.ndarray]:
    """
    Forward integration with the exact log|det df/dz| accumulated alongside.

    Args:
        flow: The ODE flow
        z: Latent point(s)
        cost_model: 'fast' uses the analytic Laplacian; 'per_coordinate' builds
            the trace from D basis-vector Hessian-vector products (same value,
            D times the cost)

    Returns:
        (x, delta_s)
    """
    z = _check_dim(z, flow.dim)
    rule = _divergence_rule(cost_model)
    return _heun(flow, z, flow._times[::-1], rule)


def integrate_backward_with_divergence(flow: OdeFlow, x: np.ndarray,
                                       cost_model: str = 'fast') -> Tuple[np.ndarray, np.ndarray]:
    """Inverse integration with log|det df^-1/dx|."""
    x = _check_dim(x, flow.dim)
    rule = _divergence_rule(cost_model)
    return _heun(flow, x, flow._times, rule)


def _divergence_rule(cost_model: str) -> DivergenceRule:
    if cost_model == 'fast':
        return _exact_divergence
    if cost_model == 'per_coordinate':
        return _basis_divergence
    raise ConfigError(f"unknown cost model '{cost_model}', expected one of {COST_MODELS}")


class _HutchinsonRule:
    """u^T (dv/dx) u averaged over Gaussian probes, dv/dx u = -t * Hess log p * u."""

    def __init__(self, n_probes: int, rng: np.random.Generator, fixed_probes: bool,
                 per_probe_calls: bool):
        self.n_probes = n_probes
        self.rng = rng
        self.fixed_probes = fixed_probes
        self.per_probe_calls = per_probe_calls
        self._probes = None

    def _fresh(self, x: np.ndarray) -> np.ndarray:
        # Gaussian directions rescaled to |u|^2 = D, so E[u u^T] = I still holds.
        probes = self.rng.standard_normal((self.n_probes,) + x.shape)
        norms = np.sqrt(np.sum(probes * probes, axis=-1, keepdims=True))
        return probes * (np.sqrt(x.shape[-1]) / norms)

    def _draw(self, x: np.ndarray) -> np.ndarray:
        if self.fixed_probes:
            if self._probes is None:
                self._probes = self._fresh(x)
            return self._probes
        return self._fresh(x)

    def __call__(self, x, t, terms):
        probes = self._draw(x)
        if self.per_probe_calls:
            estimates = [np.sum(u * (-t) * terms.hvp(u), axis=-1) for u in probes]
            return np.mean(estimates, axis=0)
        jvp = -t * terms.hvp(probes)
        return np.mean(np.sum(probes * jvp, axis=-1), axis=0)


def integrate_with_hutchinson(flow: OdeFlow, z: np.ndarray, n_probes: int, rng: np.random.Generator,
                              fixed_probes: bool = False,
                              cost_model: str = 'fast') -> Tuple[np.ndarray, np.ndarray]:
    """
    Forward integration with the Hutchinson estimate of log|det df/dz|.

    Probes are Gaussian directions rescaled to |u|^2 = D, redrawn at every
    divergence evaluation unless `fixed_probes` holds one set for the whole
    trajectory. In the 'per_coordinate' cost model each probe is its own
    Hessian-vector call.
    """
    if int(n_probes) != n_probes or n_probes < 1:
        raise ConfigError(f"n_probes must be a positive integer, got {n_probes}")
    if cost_model not in COST_MODELS:
        raise ConfigError(f"unknown cost model '{cost_model}', expected one of {COST_MODELS}")
    z = _check_dim(z, flow.dim)
    rule = _HutchinsonRule(int(n_probes), rng, fixed_probes, cost_model == 'per_coordinate')
    return _heun(flow, z, flow._times[::-1], rule)


def round_trip_error(flow, prior: GaussianPrior, rng: np.random.Generator, n_draws: int = 64) -> float:
    """RMS of f^-1(f(z)) - z over prior draws."""
    z = prior.sample(rng, n_draws)
    back = flow.inverse(flow.forward(z))
    return float(np.sqrt(np.mean((back - z) ** 2)))


def make_model_mixture(target: GmmSpec, rng: np.random.Generator,
                       weight_concentration: Optional[float] = 5.0,
                       mean_jitter: float = 0.3) -> GmmSpec:
    """
    Controlled corruption of the target used as the flow's model mixture:
    weights redrawn from Dirichlet(concentration) (kept when None) and means
    jittered by Gaussian noise of scale `mean_jitter`.
    """
    if mean_jitter < 0:
        raise ConfigError(f"mean_jitter must be non-negative, got {mean_jitter}")
    if weight_concentration is None or target.k == 1:
        weights = np.array(target.weights)
    else:
        if not weight_concentration > 0:
            raise ConfigError(f"weight_concentration must be positive, got {weight_concentration}")
        weights = rng.dirichlet(np.full(target.k, float(weight_concentration)))
        weights = weights / weights.sum()
    means = target.means + mean_jitter * rng.standard_normal(target.means.shape)
    logger.debug("model mixture: weights=%s, mean jitter=%s", np.round(weights, 4), mean_jitter)
    return GmmSpec(weights, means, target.variances)


def linear_gaussian_factor(grid: TimeGrid, variance: np.ndarray) -> np.ndarray:
    """Exact per-coordinate gain of f for a zero-mean Gaussian model: x = gain * z."""
    variance = np.asarray(variance, dtype=float)
    return np.sqrt((grid.t_min ** 2 + variance) / (grid.t_max ** 2 + variance))
