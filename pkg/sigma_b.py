#!/usr/bin/env python3
"""
Backward Scale Model

sigma_b(x; theta) is a small residual network with a scalar output:

    h_0     = tanh(x W_in + b_in)
    h_{l+1} = h_l + tanh(h_l W_l + b_l)          (B residual blocks)
    raw     = h_B . w_out + b_out
    sigma_b = softplus(raw) + eps_floor

It is trained on the fly from prior draws to minimize the mean of
| |eps|^2 - |eps_back|^2 |. The flow and its inverse are constants with
respect to theta, so the gradient is the closed-form derivative of the loss
in sigma_b followed by reverse accumulation through the network.
"""

import csv
import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit
from tqdm import tqdm

from errors import ConfigError, NumericError
from perturbation import PerturbedFlow
from target_gmm import GaussianPrior

logger = logging.getLogger(__name__)

OPTIMIZERS = ('adam', 'sgd')


def softplus(raw: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, raw)


def inverse_softplus(value: float) -> float:
    if not value > 0:
        raise ConfigError(f"inverse softplus needs a positive value, got {value}")
    return float(value + np.log(-np.expm1(-value)))


class SigmaBNet:
    """Scalar-output residual network with a softplus-plus-floor head."""

    def __init__(self, dim: int, hidden: int = 64, blocks: int = 4, eps_floor: float = 1e-6,
                 rng: Optional[np.random.Generator] = None, init_sigma: Optional[float] = None):
        """
        Args:
            dim: Input dimension D
            hidden: Hidden width H
            blocks: Number of residual blocks B
            eps_floor: Positive floor added after the softplus
            rng: Generator for the weight initialization (seed 0 when omitted)
            init_sigma: When set, the output bias starts so that sigma_b == init_sigma
                everywhere; otherwise the whole head is zero
        """
        if dim < 1 or hidden < 1 or blocks < 0:
            raise ConfigError(f"invalid network shape dim={dim}, hidden={hidden}, blocks={blocks}")
        if not eps_floor > 0:
            raise ConfigError(f"eps_floor must be positive, got {eps_floor}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = int(dim)
        self.hidden = int(hidden)
        self.blocks = int(blocks)
        self.eps_floor = float(eps_floor)

        self.w_in = rng.standard_normal((dim, hidden)) / np.sqrt(dim)
        self.b_in = np.zeros(hidden)
        self.w_blocks = [0.5 * rng.standard_normal((hidden, hidden)) / np.sqrt(hidden) for _ in range(blocks)]
        self.b_blocks = [np.zeros(hidden) for _ in range(blocks)]
        self.w_out = np.zeros(hidden)
        self.b_out = np.zeros(1)
        if init_sigma is not None:
            if not init_sigma > eps_floor:
                raise ConfigError(f"init_sigma must exceed eps_floor, got {init_sigma}")
            self.b_out[0] = inverse_softplus(init_sigma - eps_floor)

    def parameters(self) -> List[np.ndarray]:
        params = [self.w_in, self.b_in]
        for w, b in zip(self.w_blocks, self.b_blocks):
            params.extend([w, b])
        params.extend([self.w_out, self.b_out])
        return params

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        offset = 0
        for p in self.parameters():
            p[...] = flat[offset:offset + p.size].reshape(p.shape)
            offset += p.size
        if offset != flat.size:
            raise ConfigError(f"expected {offset} parameters, got {flat.size}")

    def _forward(self, x: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ConfigError(f"expected inputs of length {self.dim}, got shape {x.shape}")
        activations = [np.tanh(x @ self.w_in + self.b_in)]
        for w, b in zip(self.w_blocks, self.b_blocks):
            h = activations[-1]
            activations.append(h + np.tanh(h @ w + b))
        raw = activations[-1] @ self.w_out + self.b_out[0]
        return raw, activations

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """sigma_b(x) for one point (returns a float) or a batch (returns shape (...,))."""
        if not np.all(np.isfinite(self.get_flat())):
            raise NumericError("sigma_b network has non-finite parameters")
        raw, _ = self._forward(x)
        value = softplus(raw) + self.eps_floor
        if np.ndim(value) == 0:
            return float(value)
        return value

    def backward(self, x: np.ndarray, upstream: np.ndarray) -> List[np.ndarray]:
        """
        Gradients of sum_n upstream[n] * sigma_b(x[n]) with respect to every
        parameter, in `parameters()` order.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        upstream = np.atleast_1d(np.asarray(upstream, dtype=float))
        raw, activations = self._forward(x)
        g_raw = upstream * expit(raw)

        grads_blocks: List[Tuple[np.ndarray, np.ndarray]] = []
        h_last = activations[-1]
        grad_w_out = h_last.T @ g_raw
        grad_b_out = np.array([g_raw.sum()])
        g_h = np.outer(g_raw, self.w_out)

        for index in range(self.blocks - 1, -1, -1):
            h = activations[index]
            pre = np.tanh(h @ self.w_blocks[index] + self.b_blocks[index])
            g_pre = g_h * (1.0 - pre ** 2)
            grads_blocks.append((h.T @ g_pre, g_pre.sum(axis=0)))
            g_h = g_h + g_pre @ self.w_blocks[index].T

        h0 = activations[0]
        g_a0 = g_h * (1.0 - h0 ** 2)
        grads = [x.T @ g_a0, g_a0.sum(axis=0)]
        for grad_w, grad_b in reversed(grads_blocks):
            grads.extend([grad_w, grad_b])
        grads.extend([grad_w_out, grad_b_out])
        return grads

    def to_dict(self) -> Dict[str, Any]:
        return {
            'format': 'sigma_b_net',
            'dim': self.dim,
            'hidden': self.hidden,
            'blocks': self.blocks,
            'eps_floor': self.eps_floor,
            'nonlinearity': 'tanh',
            'shapes': [list(p.shape) for p in self.parameters()],
            'parameters': [float(v) for v in self.get_flat()],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SigmaBNet':
        if data.get('format') != 'sigma_b_net':
            raise ConfigError("not a sigma_b parameter document")
        net = cls(int(data['dim']), int(data['hidden']), int(data['blocks']), float(data['eps_floor']))
        expected = [list(p.shape) for p in net.parameters()]
        if data.get('shapes') != expected:
            raise ConfigError(f"parameter shapes {data.get('shapes')} do not match {expected}")
        net.set_flat(np.array(data['parameters'], dtype=float))
        return net

    def save_json(self, path: str) -> None:
        with open(path, 'w', encoding='utf-8') as handle:
            json.dump(self.to_dict(), handle)
            handle.write('\n')

    @classmethod
    def load_json(cls, path: str) -> 'SigmaBNet':
        if not os.path.exists(path):
            raise FileNotFoundError(f"sigma_b parameter file '{path}' not found")
        with open(path, 'r', encoding='utf-8') as handle:
            return cls.from_dict(json.load(handle))

    def __repr__(self) -> str:
        return f"SigmaBNet(dim={self.dim}, hidden={self.hidden}, blocks={self.blocks})"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_iterations: int = 2000
    optimizer: str = 'adam'
    eps_floor: float = 1e-6
    window: int = 100
    plateau_tol: float = 1e-3
    min_iterations: int = 500
    init_to_sigma_f: bool = True

    def validate(self) -> List[str]:
        errors = []
        if not self.learning_rate > 0:
            errors.append(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_iterations < 0:
            errors.append(f"max_iterations must be >= 0, got {self.max_iterations}")
        if self.optimizer not in OPTIMIZERS:
            errors.append(f"optimizer must be one of {OPTIMIZERS}, got '{self.optimizer}'")
        if not self.eps_floor > 0:
            errors.append(f"eps_floor must be > 0, got {self.eps_floor}")
        if self.window < 1:
            errors.append(f"window must be >= 1, got {self.window}")
        if self.plateau_tol < 0:
            errors.append(f"plateau_tol must be >= 0, got {self.plateau_tol}")
        return errors


class SgdOptimizer:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def update(self, params: List[np.ndarray], grads: List[np.ndarray]) -> None:
        for p, g in zip(params, grads):
            p -= self.learning_rate * g


class AdamOptimizer:
    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Optional[List[np.ndarray]] = None
        self.v: Optional[List[np.ndarray]] = None

    def update(self, params: List[np.ndarray], grads: List[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


def make_optimizer(name: str, learning_rate: float):
    if name == 'adam':
        return AdamOptimizer(learning_rate)
    if name == 'sgd':
        return SgdOptimizer(learning_rate)
    raise ConfigError(f"unknown optimizer '{name}', expected one of {OPTIMIZERS}")


def batch_residuals(pf, z: np.ndarray, eps: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """x = f(z) + sigma_f eps and r = z - f^-1(x); neither depends on theta."""
    x = pf.base.forward(z) + pf.sigma_f * eps
    residual = z - pf.base.inverse(x)
    return x, residual


def loss_sample(pf, z: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """| |eps|^2 - |eps_back|^2 | of the trajectory generated from (z, eps)."""
    x, residual = batch_residuals(pf, z, eps)
    eps_back = residual / pf.sigma_b_at(x)
    return np.abs(np.sum(eps * eps, axis=-1) - np.sum(eps_back * eps_back, axis=-1))


def loss_and_gradient(net: SigmaBNet, x: np.ndarray, eps: np.ndarray,
                      residual: np.ndarray) -> Tuple[float, List[np.ndarray]]:
    """
    Batch-mean loss and its gradient in theta.

    d loss / d sigma_b = sign(|eps|^2 - |eps_back|^2) * 2 |eps_back|^2 / sigma_b,
    with sign(0) = 0, then pulled back through the network.
    """
    x = np.atleast_2d(x)
    eps = np.atleast_2d(eps)
    residual = np.atleast_2d(residual)
    sigma = np.atleast_1d(net.evaluate(x))
    eps_back_sq = np.sum(residual * residual, axis=-1) / sigma ** 2
    gap = np.sum(eps * eps, axis=-1) - eps_back_sq
    n = x.shape[0]
    upstream = np.sign(gap) * 2.0 * eps_back_sq / sigma / n
    return float(np.mean(np.abs(gap))), net.backward(x, upstream)


def gradient_step(net: SigmaBNet, pf, batch: Tuple[np.ndarray, np.ndarray], eta: float,
                  optimizer=None, batch_index: Optional[int] = None) -> Tuple[SigmaBNet, float]:
    """
    One update of theta on a batch of (z, eps). Returns the net (updated in
    place) and the batch loss before the update.
    """
    z, eps = batch
    if np.size(z) == 0:
        raise ConfigError("gradient_step needs a non-empty batch")
    x, residual = batch_residuals(pf, z, eps)
    loss, grads = loss_and_gradient(net, x, eps, residual)
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NumericError("non-finite sigma_b gradient", batch=batch_index)
    (optimizer or SgdOptimizer(eta)).update(net.parameters(), grads)
    return net, loss


@dataclass
class TrainResult:
    net: SigmaBNet
    loss_history: List[float] = field(default_factory=list)
    wall_time_s: float = 0.0
    iterations: int = 0
    stopped_on_plateau: bool = False
    held_out_loss: Optional[float] = None

    def summary(self) -> Dict[str, Any]:
        return {
            'iterations': self.iterations,
            'wall_time_s': self.wall_time_s,
            'stopped_on_plateau': self.stopped_on_plateau,
            'final_loss': float(self.loss_history[-1]) if self.loss_history else None,
            'held_out_loss': self.held_out_loss,
        }


def _plateaued(history: List[float], window: int, tol: float) -> bool:
    if tol <= 0 or len(history) < 2 * window:
        return False
    recent = float(np.mean(history[-window:]))
    previous = float(np.mean(history[-2 * window:-window]))
    if previous == 0.0:
        return recent == 0.0
    return abs(recent - previous) / abs(previous) < tol


def train(net: SigmaBNet, pf, prior: GaussianPrior, config: TrainConfig, rng: np.random.Generator,
          verbose: bool = False) -> TrainResult:
    """
    Train sigma_b on trajectories drawn on the fly from the prior.

    Stops at `max_iterations`, or once past `min_iterations` when the mean loss
    of the last `window` iterations moved by less than `plateau_tol` relative
    to the window before it. Non-convergence is not an error.
    """
    errors = config.validate()
    if errors:
        raise ConfigError("; ".join(errors))
    if pf.sigma_b is not net:
        raise ConfigError("the perturbed flow must use the network being trained as its sigma_b")
    optimizer = make_optimizer(config.optimizer, config.learning_rate)
    result = TrainResult(net=net)
    start = time.perf_counter()

    iterator = tqdm(range(config.max_iterations), desc='Training sigma_b', disable=not verbose, mininterval=0.5)
    for iteration in iterator:
        z = prior.sample(rng, config.batch_size)
        eps = rng.standard_normal((config.batch_size, prior.dim))
        _, loss = gradient_step(net, pf, (z, eps), config.learning_rate, optimizer, batch_index=iteration)
        result.loss_history.append(loss)
        result.iterations = iteration + 1
        if iteration + 1 >= config.min_iterations and _plateaued(result.loss_history, config.window, config.plateau_tol):
            result.stopped_on_plateau = True
            logger.info("sigma_b training plateaued after %d iterations", iteration + 1)
            break

    result.wall_time_s = time.perf_counter() - start
    if verbose:
        final = float(np.mean(result.loss_history[-config.window:])) if result.loss_history else float('nan')
        print(f"✓ Trained sigma_b for {result.iterations} iterations in {result.wall_time_s:.1f}s (final loss {final:.4g})")
    return result


def held_out_loss(pf, prior: GaussianPrior, n: int, rng: np.random.Generator, batch_size: int = 256) -> float:
    """Mean | |eps|^2 - |eps_back|^2 | over n fresh trajectories."""
    losses = []
    remaining = n
    while remaining > 0:
        size = min(batch_size, remaining)
        z = prior.sample(rng, size)
        eps = rng.standard_normal((size, prior.dim))
        losses.append(loss_sample(pf, z, eps))
        remaining -= size
    return float(np.mean(np.concatenate(losses)))


def write_loss_history(history: List[float], path: str) -> None:
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(['iteration', 'loss'])
        for iteration, loss in enumerate(history, start=1):
            writer.writerow([iteration, repr(float(loss))])


class SigmaBTrainer:
    """Builds a sigma_b network for a base flow, trains it and measures the held-out loss."""

    def __init__(self, config: TrainConfig, hidden: int = 64, blocks: int = 4, verbose: bool = True):
        self.config = config
        self.hidden = hidden
        self.blocks = blocks
        self.verbose = verbose

    def build(self, base, sigma_f: float, rng: np.random.Generator) -> PerturbedFlow:
        init_sigma = sigma_f if self.config.init_to_sigma_f else None
        net = SigmaBNet(base.dim, self.hidden, self.blocks, self.config.eps_floor, rng=rng, init_sigma=init_sigma)
        return PerturbedFlow(base, sigma_f, net)

    def train(self, base, prior: GaussianPrior, sigma_f: float, rng: np.random.Generator,
              held_out: int = 1000) -> Tuple[PerturbedFlow, TrainResult]:
        """
        Returns:
            (perturbed flow using the trained network, training result with held-out loss)
        """
        pf = self.build(base, sigma_f, rng)
        if self.verbose:
            print(f"🔄 Training sigma_b (D={base.dim}, H={self.hidden}, B={self.blocks}, "
                  f"{self.config.optimizer}, lr={self.config.learning_rate})")
        result = train(pf.sigma_b, pf, prior, self.config, rng, verbose=self.verbose)
        if held_out > 0:
            result.held_out_loss = held_out_loss(pf, prior, held_out, rng)
            ratio = result.held_out_loss / base.dim
            if self.verbose:
                print(f"✓ Held-out loss {result.held_out_loss:.4g} ({ratio:.3g} per dimension)")
            if ratio > 0.2:
                logger.warning("sigma_b held-out loss is %.3g per dimension; the chain may mix poorly", ratio)
        return pf, result
