#!/usr/bin/env python3
"""
Trajectory Metropolis Monte Carlo

A chain state is one trajectory z -> x together with its generalized work W.
Each step resamples K coordinates of z (and of eps for the perturbed flow),
builds the trial trajectory and accepts it with probability
min(1, exp(W_current - W_trial)). The same loop drives four methods:

    fp        perturbed flow, entropy from the forward/backward noise
    bfjacob   deterministic flow, exact log-determinant
    hutch     deterministic flow, Hutchinson log-determinant with N probes
    direct    plain flow samples, no accept/reject (biased reference)
"""

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Protocol, Tuple

import numpy as np
from tqdm import tqdm

from diagnostics import integrated_autocorr_time, mean_with_se, running_mean_energy
from errors import ConfigError, DegenerateScaleError, NumericError
from ode_flow import COST_MODELS, OdeFlow, integrate_with_divergence, integrate_with_hutchinson
from perturbation import (
    PerturbedFlow, TrajectoryRecord, make_deterministic_trajectory, make_trajectory,
)
from target_gmm import GaussianPrior

logger = logging.getLogger(__name__)

METHODS = ('fp', 'bfjacob', 'hutch', 'direct')


@dataclass
class McConfig:
    k_update: int = 5
    n_steps: int = 1000
    thin: int = 1
    burn_in: Optional[int] = None
    method: str = 'fp'
    n_probes: Optional[int] = None
    fixed_probes: bool = False
    shared_indices: bool = False
    cost_model: str = 'fast'

    @property
    def burn_in_steps(self) -> int:
        """Burn-in length; defaults to 10% of n_steps."""
        return self.n_steps // 10 if self.burn_in is None else int(self.burn_in)

    @property
    def total_steps(self) -> int:
        return self.burn_in_steps + self.n_steps

    @property
    def method_tag(self) -> str:
        if self.method == 'hutch':
            return f"hutch({self.n_probes})"
        return self.method

    def validate(self, dim: int) -> List[str]:
        errors = []
        if self.method not in METHODS:
            errors.append(f"method must be one of {METHODS}, got '{self.method}'")
        if not 1 <= self.k_update <= dim:
            errors.append(f"k_update must be in [1, {dim}], got {self.k_update}")
        if self.n_steps < 0:
            errors.append(f"n_steps must be >= 0, got {self.n_steps}")
        if self.thin < 1:
            errors.append(f"thin must be >= 1, got {self.thin}")
        if self.burn_in is not None and self.burn_in < 0:
            errors.append(f"burn_in must be >= 0, got {self.burn_in}")
        if self.method == 'hutch' and (self.n_probes is None or self.n_probes < 1):
            errors.append("method 'hutch' requires n_probes >= 1")
        if self.cost_model not in COST_MODELS:
            errors.append(f"cost_model must be one of {COST_MODELS}, got '{self.cost_model}'")
        return errors


@dataclass
class ChainProblem:
    """Everything a chain reads but never mutates."""

    target: Any
    prior: GaussianPrior
    flow: Any
    pf: Optional[PerturbedFlow] = None

    @property
    def dim(self) -> int:
        return self.prior.dim


@dataclass
class ChainState:
    current: TrajectoryRecord
    rng: np.random.Generator
    method: str
    step: int = 0
    accepts: int = 0
    rejects: int = 0
    flagged: int = 0

    @property
    def acceptance_rate(self) -> float:
        decided = self.accepts + self.rejects
        return self.accepts / decided if decided else 0.0


class TraceSink(Protocol):
    def write_step(self, step: int, work: float, energy: float, accepted: bool) -> None: ...

    def write_sample(self, step: int, x: np.ndarray) -> None: ...

    def close(self) -> None: ...


def propose_partial(state: ChainState, k: int, rng: np.random.Generator, prior: GaussianPrior,
                    shared_indices: bool = False) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Resample k coordinates of z from the prior marginal and k coordinates of
    eps from N(0, 1); indices are uniform without replacement, drawn
    separately for z and eps unless `shared_indices`. Deterministic states
    (no eps) only update z.
    """
    z = state.current.z
    dim = z.shape[-1]
    if int(k) != k or not 1 <= k <= dim:
        raise ConfigError(f"k must be an integer in [1, {dim}], got {k}")
    k = int(k)

    z_new = np.array(z, dtype=float)
    z_index = rng.choice(dim, size=k, replace=False)
    z_new[z_index] = prior.sample_marginal(rng, k)

    if state.current.eps is None:
        return z_new, None
    eps_new = np.array(state.current.eps, dtype=float)
    eps_index = z_index if shared_indices else rng.choice(dim, size=k, replace=False)
    eps_new[eps_index] = rng.standard_normal(k)
    return z_new, eps_new


def accept(state_w: float, trial_w: float, rng: np.random.Generator) -> bool:
    """
    Metropolis test in log space: accept iff log u < W_current - W_trial.
    A uniform is always drawn so the stream position does not depend on the
    outcome. Non-finite trial work is a rejection.
    """
    u = rng.random()
    if not np.isfinite(trial_w):
        return False
    delta = state_w - trial_w
    if delta >= 0:
        return True
    with np.errstate(divide='ignore'):
        return bool(np.log(u) < delta)


def _decide(state: ChainState, trial: Optional[TrajectoryRecord], rng: np.random.Generator) -> bool:
    trial_w = trial.work if trial is not None else np.inf
    accepted = accept(state.current.work, trial_w, rng)
    if not np.isfinite(trial_w):
        state.flagged += 1
        logger.debug("step %d: non-finite trial work, rejected", state.step + 1)
    if accepted:
        state.current = trial
        state.accepts += 1
    else:
        state.rejects += 1
    state.step += 1
    return accepted


def step_fp(state: ChainState, pf: PerturbedFlow, target, prior: GaussianPrior, config: McConfig,
            rng: Optional[np.random.Generator] = None) -> bool:
    """One perturbed-flow step. Updates `state` in place and returns whether the trial was accepted."""
    rng = rng if rng is not None else state.rng
    z_new, eps_new = propose_partial(state, config.k_update, rng, prior, config.shared_indices)
    try:
        with np.errstate(over='ignore', invalid='ignore'):
            trial = make_trajectory(pf, target, prior, z_new, eps_new)
    except (NumericError, DegenerateScaleError, FloatingPointError) as e:
        logger.debug("step %d: trial trajectory failed: %s", state.step + 1, e)
        trial = None
    return _decide(state, trial, rng)


def deterministic_trajectory(flow, target, prior: GaussianPrior, z: np.ndarray, config: McConfig,
                             rng: np.random.Generator) -> TrajectoryRecord:
    """x = f(z) with the Jacobian entropy from the method's log-determinant rule."""
    if isinstance(flow, OdeFlow):
        if config.method == 'hutch':
            x, delta_s = integrate_with_hutchinson(flow, z, config.n_probes, rng,
                                                   config.fixed_probes, config.cost_model)
        else:
            x, delta_s = integrate_with_divergence(flow, z, config.cost_model)
    else:
        x = flow.forward(z)
        delta_s = flow.log_det()
    return make_deterministic_trajectory(flow, target, prior, z, x, float(delta_s))


def step_deterministic(state: ChainState, flow, target, prior: GaussianPrior, config: McConfig,
                       rng: Optional[np.random.Generator] = None) -> bool:
    """One BFJacob or Hutch-N step: only z is updated."""
    rng = rng if rng is not None else state.rng
    z_new, _ = propose_partial(state, config.k_update, rng, prior, config.shared_indices)
    try:
        with np.errstate(over='ignore', invalid='ignore'):
            trial = deterministic_trajectory(flow, target, prior, z_new, config, rng)
    except (NumericError, FloatingPointError) as e:
        logger.debug("step %d: trial trajectory failed: %s", state.step + 1, e)
        trial = None
    return _decide(state, trial, rng)


def direct_trajectory(flow, target, prior: GaussianPrior, z: np.ndarray) -> TrajectoryRecord:
    """Plain flow sample; the work is not defined and stored as NaN."""
    x = flow.forward(z)
    return TrajectoryRecord(z=np.asarray(z, dtype=float), x=x, delta_s=float('nan'),
                            u_x=float(target.energy(x)), u_z=float(prior.energy(z)), work=float('nan'))


def step_direct(state: ChainState, flow, target, prior: GaussianPrior, config: McConfig,
                rng: Optional[np.random.Generator] = None) -> bool:
    """Fresh z from the prior pushed through the flow; always replaces the state."""
    rng = rng if rng is not None else state.rng
    state.current = direct_trajectory(flow, target, prior, prior.sample(rng))
    state.step += 1
    return True


def initial_state(problem: ChainProblem, config: McConfig, rng: np.random.Generator) -> ChainState:
    """z from the prior, eps standard normal (fp only), trajectory built once."""
    z = problem.prior.sample(rng)
    if config.method == 'fp':
        if problem.pf is None:
            raise ConfigError("method 'fp' needs a perturbed flow")
        eps = rng.standard_normal(problem.dim)
        current = make_trajectory(problem.pf, problem.target, problem.prior, z, eps)
    elif config.method == 'direct':
        current = direct_trajectory(problem.flow, problem.target, problem.prior, z)
    else:
        current = deterministic_trajectory(problem.flow, problem.target, problem.prior, z, config, rng)
    return ChainState(current=current, rng=rng, method=config.method_tag)


def trajectory_from_target_sample(pf: PerturbedFlow, target, prior: GaussianPrior, x: np.ndarray,
                                  rng: np.random.Generator) -> TrajectoryRecord:
    """
    Reconstruct a trajectory ending near a given x: draw eps_back, set
    z = f^-1(x) + sigma_b(x) eps_back, then eps = (x - f(z)) / sigma_f.
    """
    eps_back = rng.standard_normal(pf.dim)
    z = pf.base.inverse(x) + pf.sigma_b_at(x) * eps_back
    eps = (x - pf.base.forward(z)) / pf.sigma_f
    return make_trajectory(pf, target, prior, z, eps)


def make_stepper(problem: ChainProblem, config: McConfig) -> Callable[[ChainState], bool]:
    if config.method == 'fp':
        if problem.pf is None:
            raise ConfigError("method 'fp' needs a perturbed flow")
        return lambda state: step_fp(state, problem.pf, problem.target, problem.prior, config)
    if config.method == 'direct':
        return lambda state: step_direct(state, problem.flow, problem.target, problem.prior, config)
    if config.method in ('bfjacob', 'hutch'):
        return lambda state: step_deterministic(state, problem.flow, problem.target, problem.prior, config)
    raise ConfigError(f"unknown method '{config.method}', expected one of {METHODS}")


def recompute_work(state: ChainState, problem: ChainProblem, config: McConfig) -> Optional[float]:
    """W of the stored trajectory rebuilt from its (z, eps); None where W is stochastic or undefined."""
    current = state.current
    if config.method == 'fp':
        return make_trajectory(problem.pf, problem.target, problem.prior, current.z, current.eps).work
    if config.method == 'bfjacob':
        return deterministic_trajectory(problem.flow, problem.target, problem.prior, current.z, config, state.rng).work
    return None


def check_state(state: ChainState, problem: ChainProblem, config: McConfig, tol: float = 1e-9) -> None:
    """Raise NumericError when the stored W no longer matches its trajectory."""
    work = recompute_work(state, problem, config)
    if work is not None and abs(work - state.current.work) > tol * max(1.0, abs(work)):
        raise NumericError(f"stored work {state.current.work!r} differs from recomputed {work!r}",
                           step=state.step)


@dataclass
class ChainTrace:
    method: str
    burn_in: int
    steps: List[int] = field(default_factory=list)
    works: List[float] = field(default_factory=list)
    energies: List[float] = field(default_factory=list)
    accepted: List[bool] = field(default_factory=list)
    samples: List[Tuple[int, np.ndarray]] = field(default_factory=list)
    acceptance_rate: Optional[float] = None
    flagged: int = 0
    wall_time_s: float = 0.0
    final_state: Optional[ChainState] = None

    def production_energies(self) -> np.ndarray:
        """Energies recorded at or after the burn-in step."""
        steps = np.asarray(self.steps)
        return np.asarray(self.energies, dtype=float)[steps >= self.burn_in]

    def production_works(self) -> np.ndarray:
        steps = np.asarray(self.steps)
        return np.asarray(self.works, dtype=float)[steps >= self.burn_in]

    def sample_array(self) -> np.ndarray:
        return np.array([x for _, x in self.samples])

    def running_mean(self) -> np.ndarray:
        return running_mean_energy(self.production_energies())

    def autocorr_time(self) -> Optional[float]:
        energies = self.production_energies()
        return integrated_autocorr_time(energies) if energies.size >= 10 else None

    def summary(self) -> Dict[str, Any]:
        energies = self.production_energies()
        mean, se = mean_with_se(energies) if energies.size >= 10 else (float(np.mean(energies)), None)
        n_steps = max(len(self.steps) - 1, 0)
        return {
            'method': self.method,
            'steps': n_steps,
            'burn_in': self.burn_in,
            'mean_energy': mean,
            'mean_energy_se': se,
            'acceptance_rate': self.acceptance_rate,
            'flagged': self.flagged,
            'autocorr_time': self.autocorr_time(),
            'wall_time_s': self.wall_time_s,
            'seconds_per_step': self.wall_time_s / n_steps if n_steps else None,
        }


def _record(trace: ChainTrace, state: ChainState, accepted: bool, thin: int, sink: Optional[TraceSink]) -> None:
    current = state.current
    trace.steps.append(state.step)
    trace.works.append(current.work)
    trace.energies.append(current.u_x)
    trace.accepted.append(accepted)
    if sink is not None:
        sink.write_step(state.step, current.work, current.u_x, accepted)
    if state.step >= trace.burn_in and state.step % thin == 0:
        trace.samples.append((state.step, np.array(current.x)))
        if sink is not None:
            sink.write_sample(state.step, current.x)


def run_chain(config: McConfig, problem: ChainProblem, rng: Optional[np.random.Generator] = None,
              sink: Optional[TraceSink] = None, state: Optional[ChainState] = None,
              progress: bool = False) -> ChainTrace:
    """
    Run burn-in plus n_steps Metropolis steps.

    A fresh chain records its initial trajectory as step 0. Passing `state`
    (e.g. from a checkpoint) resumes it up to the configured total without
    re-recording the resumed step. The sink, when given, is closed on both
    success and failure so partial traces reach disk.

    Returns:
        ChainTrace with every step's (W, energy, accepted), thinned samples
        and the final chain state
    """
    errors = config.validate(problem.dim)
    if errors:
        raise ConfigError("; ".join(errors))
    if state is None and rng is None:
        raise ConfigError("run_chain needs either an rng or a state to resume")

    trace = ChainTrace(method=config.method_tag, burn_in=config.burn_in_steps)
    start = time.perf_counter()
    try:
        if state is None:
            state = initial_state(problem, config, rng)
            _record(trace, state, True, config.thin, sink)
        stepper = make_stepper(problem, config)
        remaining = max(config.total_steps - state.step, 0)
        for _ in tqdm(range(remaining), desc=f"Chain {config.method_tag}", disable=not progress, mininterval=0.5):
            accepted = stepper(state)
            _record(trace, state, accepted, config.thin, sink)
    finally:
        trace.wall_time_s = time.perf_counter() - start
        if sink is not None:
            sink.close()

    trace.final_state = state
    trace.flagged = state.flagged
    if config.method != 'direct':
        trace.acceptance_rate = state.acceptance_rate
    logger.info("chain %s finished %d steps, acceptance %s", trace.method, state.step, trace.acceptance_rate)
    return trace


def run_chains(config: McConfig, problem: ChainProblem, rngs: List[np.random.Generator],
               threads: int = 1, sinks: Optional[List[Optional[TraceSink]]] = None,
               progress: bool = False) -> List[ChainTrace]:
    """Independent chains, one per generator, run on up to `threads` workers; results in chain order."""
    if not rngs:
        raise ConfigError("run_chains needs at least one generator")
    sinks = sinks or [None] * len(rngs)
    if len(sinks) != len(rngs):
        raise ConfigError("one sink per chain is required")
    workers = max(1, min(int(threads), len(rngs)))
    if workers == 1:
        return [run_chain(config, problem, rng, sink, progress=progress) for rng, sink in zip(rngs, sinks)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_chain, config, problem, rng, sink) for rng, sink in zip(rngs, sinks)]
        return [future.result() for future in futures]


def _encode_state(value):
    if isinstance(value, np.ndarray):
        return {'__ndarray__': [int(v) for v in value.ravel()], 'dtype': str(value.dtype), 'shape': list(value.shape)}
    if isinstance(value, dict):
        return {key: _encode_state(item) for key, item in value.items()}
    if isinstance(value, np.integer):
        return int(value)
    return value


def _decode_state(value):
    if isinstance(value, dict):
        if '__ndarray__' in value:
            return np.array(value['__ndarray__'], dtype=value['dtype']).reshape(value['shape'])
        return {key: _decode_state(item) for key, item in value.items()}
    return value


def save_checkpoint(state: ChainState, path: str) -> None:
    """JSON checkpoint: trajectory, counters and the exact bit-generator state."""
    document = {
        'method': state.method,
        'step': state.step,
        'trajectory': state.current.to_dict(),
        'W': float(state.current.work),
        'counters': {'accepts': state.accepts, 'rejects': state.rejects, 'flagged': state.flagged},
        'rng_state': _encode_state(state.rng.bit_generator.state),
    }
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(document, handle)
        handle.write('\n')


def load_checkpoint(path: str) -> ChainState:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint '{path}' not found")
    with open(path, 'r', encoding='utf-8') as handle:
        try:
            document = json.load(handle)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Invalid JSON in checkpoint '{path}': {e}") from e
    rng_state = _decode_state(document['rng_state'])
    bit_generator_cls = getattr(np.random, rng_state['bit_generator'], None)
    if bit_generator_cls is None:
        raise ConfigError(f"unknown bit generator '{rng_state['bit_generator']}' in checkpoint")
    bit_generator = bit_generator_cls()
    bit_generator.state = rng_state
    counters = document['counters']
    return ChainState(
        current=TrajectoryRecord.from_dict(document['trajectory']),
        rng=np.random.Generator(bit_generator),
        method=document['method'],
        step=int(document['step']),
        accepts=int(counters['accepts']),
        rejects=int(counters['rejects']),
        flagged=int(counters['flagged']),
    )
