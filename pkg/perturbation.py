#!/usr/bin/env python3
"""
Flow Perturbation

Stochastic perturbation of a base flow f:

    forward:   x = f(z) + sigma_f * eps
    backward:  z = f^-1(x) + sigma_b(x) * eps_back

The entropy of a forward trajectory is the negative log ratio of the forward
and backward path probabilities,

    dS = (|eps|^2 - |eps_back|^2) / 2 + D * log(sigma_f / sigma_b(x)),

which replaces log|det df/dz| in the generalized work W = u_X(x) - u_Z(z) - dS.
Deterministic trajectories use the Jacobian entropy directly.
"""

import json
import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Protocol, Union

import numpy as np

from errors import ConfigError, DegenerateScaleError
from ode_flow import round_trip_error
from target_gmm import LOG_2PI, GaussianPrior, _check_dim

logger = logging.getLogger(__name__)

SIGMA_B_FLOOR = 1e-12


class FlowMap(Protocol):
    dim: int

    def forward(self, z: np.ndarray) -> np.ndarray: ...

    def inverse(self, x: np.ndarray) -> np.ndarray: ...


class EnergyModel(Protocol):
    def energy(self, x: np.ndarray) -> np.ndarray: ...


class PerturbedFlow:
    """
    A base flow with forward scale sigma_f and a backward scale model.

    `sigma_b` may be a positive float (constant scalar), a positive array of
    length D (per-coordinate scale, used with exact affine scales), or any
    object with an `evaluate(x)` method returning one positive scalar per point
    (the trained network).
    """

    def __init__(self, base: FlowMap, sigma_f: float, sigma_b: Union[float, np.ndarray, Any]):
        if not sigma_f > 0 or not np.isfinite(sigma_f):
            raise ConfigError(f"sigma_f must be positive and finite, got {sigma_f}")
        self.base = base
        self.sigma_f = float(sigma_f)
        if hasattr(sigma_b, 'evaluate'):
            self.sigma_b = sigma_b
            self.per_coordinate = False
        else:
            scale = np.asarray(sigma_b, dtype=float)
            if scale.ndim == 0:
                self.per_coordinate = False
            elif scale.shape == (base.dim,):
                self.per_coordinate = True
            else:
                raise ConfigError(f"sigma_b must be a scalar, a length-{base.dim} vector or a model")
            if np.any(scale <= 0):
                raise ConfigError("sigma_b must be positive")
            self.sigma_b = scale

    @property
    def dim(self) -> int:
        return self.base.dim

    def sigma_b_at(self, x: np.ndarray) -> np.ndarray:
        """
        Backward scale at x, shaped to broadcast against x: (..., 1) for scalar
        models and (D,) for per-coordinate scales.
        """
        if hasattr(self.sigma_b, 'evaluate'):
            value = np.asarray(self.sigma_b.evaluate(x), dtype=float)[..., None]
        elif self.per_coordinate:
            value = self.sigma_b
        else:
            value = np.broadcast_to(self.sigma_b, np.shape(x)[:-1] + (1,))
        if np.any(~(value > SIGMA_B_FLOOR)):
            raise DegenerateScaleError(f"sigma_b fell below the positivity floor {SIGMA_B_FLOOR}")
        return value

    def __repr__(self) -> str:
        return f"PerturbedFlow(base={self.base!r}, sigma_f={self.sigma_f})"


@dataclass
class TrajectoryRecord:
    """One trajectory z -> x. Deterministic trajectories leave eps/eps_back unset."""

    z: np.ndarray
    x: np.ndarray
    delta_s: float
    u_x: float
    u_z: float
    work: float
    eps: Optional[np.ndarray] = None
    eps_back: Optional[np.ndarray] = None

    def to_dict(self) -> Dict[str, Any]:
        def as_list(v):
            return None if v is None else [float(e) for e in v]
        return {
            'z': as_list(self.z),
            'eps': as_list(self.eps),
            'x': as_list(self.x),
            'eps_back': as_list(self.eps_back),
            'delta_s': float(self.delta_s),
            'u_x': float(self.u_x),
            'u_z': float(self.u_z),
            'work': float(self.work),
        }

    def to_json_line(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TrajectoryRecord':
        def as_array(v):
            return None if v is None else np.array(v, dtype=float)
        return cls(
            z=as_array(data['z']),
            x=as_array(data['x']),
            delta_s=float(data['delta_s']),
            u_x=float(data['u_x']),
            u_z=float(data['u_z']),
            work=float(data['work']),
            eps=as_array(data.get('eps')),
            eps_back=as_array(data.get('eps_back')),
        )


def forward_perturbed(pf: PerturbedFlow, z: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """x = f(z) + sigma_f * eps."""
    eps = _check_dim(eps, pf.dim)
    return pf.base.forward(z) + pf.sigma_f * eps


def recover_backward_noise(pf: PerturbedFlow, z: np.ndarray, x: np.ndarray,
                           z_back: Optional[np.ndarray] = None) -> np.ndarray:
    """eps_back = (z - f^-1(x)) / sigma_b(x); `z_back` reuses a computed f^-1(x)."""
    z = _check_dim(z, pf.dim)
    if z_back is None:
        z_back = pf.base.inverse(x)
    return (z - z_back) / pf.sigma_b_at(x)


def entropy_term(eps: np.ndarray, eps_back: np.ndarray, sigma_f: float,
                 sigma_b_at_x: Union[float, np.ndarray], dim: int) -> float:
    """
    Stochastic entropy (|eps|^2 - |eps_back|^2)/2 + log det(sigma_f I) / det(Sigma_b).

    A scalar sigma_b gives D * log(sigma_f / sigma_b); a per-coordinate scale
    sums log(sigma_f / sigma_b_i) over coordinates.
    """
    eps = np.asarray(eps, dtype=float)
    eps_back = np.asarray(eps_back, dtype=float)
    sigma_b_at_x = np.asarray(sigma_b_at_x, dtype=float)
    if np.any(sigma_b_at_x <= 0) or not sigma_f > 0:
        raise ConfigError("entropy_term needs positive scales")
    noise_part = 0.5 * (np.sum(eps * eps, axis=-1) - np.sum(eps_back * eps_back, axis=-1))
    log_f = np.log(sigma_f)
    if dim > 1 and sigma_b_at_x.ndim > 0 and sigma_b_at_x.shape[-1] == dim:
        scale_part = np.sum(log_f - np.log(sigma_b_at_x), axis=-1)
    else:
        if sigma_b_at_x.ndim > 0 and sigma_b_at_x.shape[-1] == 1:
            sigma_b_at_x = sigma_b_at_x[..., 0]
        scale_part = dim * (log_f - np.log(sigma_b_at_x))
    return noise_part + scale_part


def make_trajectory(pf: PerturbedFlow, target: EnergyModel, prior: EnergyModel,
                    z: np.ndarray, eps: np.ndarray) -> TrajectoryRecord:
    """
    Build a perturbed trajectory: x from the forward map, f^-1(x) from a fresh
    backward integration, eps_back, dS and W = u_X(x) - u_Z(z) - dS.
    """
    z = _check_dim(z, pf.dim)
    eps = _check_dim(eps, pf.dim)
    x = forward_perturbed(pf, z, eps)
    z_back = pf.base.inverse(x)
    sigma_b = pf.sigma_b_at(x)
    eps_back = (z - z_back) / sigma_b
    delta_s = float(entropy_term(eps, eps_back, pf.sigma_f, sigma_b, pf.dim))
    u_x = float(target.energy(x))
    u_z = float(prior.energy(z))
    return TrajectoryRecord(z=z, x=x, delta_s=delta_s, u_x=u_x, u_z=u_z,
                            work=u_x - u_z - delta_s, eps=eps, eps_back=eps_back)


def deterministic_work(flow: FlowMap, target: EnergyModel, prior: EnergyModel, z: np.ndarray,
                       delta_s_jacobian: float, x: Optional[np.ndarray] = None) -> float:
    """W = u_X(f(z)) - u_Z(z) - log|det df/dz| for an unperturbed trajectory."""
    if x is None:
        x = flow.forward(z)
    return float(target.energy(x)) - float(prior.energy(z)) - float(delta_s_jacobian)


def make_deterministic_trajectory(flow: FlowMap, target: EnergyModel, prior: EnergyModel,
                                  z: np.ndarray, x: np.ndarray, delta_s: float) -> TrajectoryRecord:
    u_x = float(target.energy(x))
    u_z = float(prior.energy(z))
    return TrajectoryRecord(z=np.asarray(z, dtype=float), x=np.asarray(x, dtype=float),
                            delta_s=float(delta_s), u_x=u_x, u_z=u_z,
                            work=u_x - u_z - float(delta_s))


def log_prob_forward(pf: PerturbedFlow, z: np.ndarray, x: np.ndarray) -> float:
    """log P_f(x | z) = log N(x; f(z), sigma_f^2 I)."""
    residual = (x - pf.base.forward(z)) / pf.sigma_f
    return float(-0.5 * np.sum(residual ** 2) - pf.dim * (np.log(pf.sigma_f) + 0.5 * LOG_2PI))


def log_prob_backward(pf: PerturbedFlow, z: np.ndarray, x: np.ndarray) -> float:
    """log P_b(z | x) = log N(z; f^-1(x), Sigma_b(x)^2)."""
    scale = np.broadcast_to(pf.sigma_b_at(x), (pf.dim,))
    residual = (z - pf.base.inverse(x)) / scale
    return float(-0.5 * np.sum(residual ** 2) - np.sum(np.log(scale)) - 0.5 * pf.dim * LOG_2PI)


def log_target_path(pf: PerturbedFlow, target: EnergyModel, z: np.ndarray, x: np.ndarray) -> float:
    """log of exp(-u_X(x)) P_b(z | x), the trajectory-space target."""
    return -float(target.energy(x)) + log_prob_backward(pf, z, x)


def log_proposal_path(pf: PerturbedFlow, prior: EnergyModel, z: np.ndarray, x: np.ndarray) -> float:
    """log of exp(-u_Z(z)) P_f(x | z), the perturbed-flow proposal."""
    return -float(prior.energy(z)) + log_prob_forward(pf, z, x)


def detailed_balance_gap(pf: PerturbedFlow, target: EnergyModel, prior: EnergyModel,
                         current: TrajectoryRecord, trial: TrajectoryRecord) -> float:
    """
    W(trial) - W(current) minus the log ratio
    log[P_target(current) P_prop(trial)] - log[P_target(trial) P_prop(current)]
    assembled from the Gaussian path densities; zero up to rounding.
    """
    lhs = trial.work - current.work
    rhs = (log_target_path(pf, target, current.z, current.x) + log_proposal_path(pf, prior, trial.z, trial.x)
           - log_target_path(pf, target, trial.z, trial.x) - log_proposal_path(pf, prior, current.z, current.x))
    return float(lhs - rhs)


def sigma_f_guard(flow: FlowMap, prior: GaussianPrior, sigma_f: float, rng: np.random.Generator,
                  n_draws: int = 64, factor: float = 10.0) -> Dict[str, Any]:
    """
    Measure the flow round-trip RMS error on prior draws and warn when sigma_f
    is within `factor` of it (the perturbation would drown in rounding and
    integration error). Never fails.
    """
    rms = round_trip_error(flow, prior, rng, n_draws)
    ok = sigma_f >= factor * rms
    if not ok:
        logger.warning("sigma_f=%g is below %gx the flow round-trip RMS error %.3e",
                       sigma_f, factor, rms)
    return {'round_trip_rms': rms, 'sigma_f': float(sigma_f), 'ok': bool(ok)}
