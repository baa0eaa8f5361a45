#!/usr/bin/env python3
"""
Chain Diagnostics

Post-processing of chain traces and sample sets: running mean energy, energy
histograms, effective sample size, standard errors, work statistics, mode
occupancy, convergence detection and per-step cost benchmarks. Everything
here is pure except the benchmark, which times real chain steps.
"""

import logging
import time
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from errors import ConfigError
from target_gmm import GmmSpec, mode_assign

logger = logging.getLogger(__name__)


def running_mean_energy(energies: Sequence[float]) -> np.ndarray:
    """Cumulative mean: entry n-1 is the mean of the first n energies."""
    energies = np.asarray(energies, dtype=float)
    if energies.size == 0:
        raise ConfigError("running mean needs at least one energy")
    return np.cumsum(energies) / np.arange(1, energies.size + 1)


@dataclass
class EnergyHistogram:
    edges: np.ndarray
    counts: np.ndarray
    underflow: int = 0
    overflow: int = 0
    normalized: bool = False

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.underflow + self.overflow

    def density(self) -> np.ndarray:
        """Counts as a probability density over the in-range values."""
        in_range = self.counts.sum()
        if in_range == 0:
            return np.zeros_like(self.counts, dtype=float)
        return self.counts / (in_range * np.diff(self.edges))

    def to_rows(self) -> List[Tuple[float, float, Any]]:
        values = self.density() if self.normalized else self.counts
        return [(float(lo), float(hi), value.item()) for lo, hi, value in zip(self.edges[:-1], self.edges[1:], values)]


def histogram(energies: Sequence[float], n_bins: int, value_range: Optional[Tuple[float, float]] = None,
              normalized: bool = False) -> EnergyHistogram:
    """
    Fixed-width binning. Values below the range count as underflow, values
    above it (and non-finite values) as overflow. Without a range the finite
    data extent is used.
    """
    energies = np.asarray(energies, dtype=float).ravel()
    if int(n_bins) != n_bins or n_bins < 1:
        raise ConfigError(f"n_bins must be a positive integer, got {n_bins}")
    finite = energies[np.isfinite(energies)]
    if value_range is None:
        if finite.size == 0:
            lo, hi = 0.0, 1.0
        else:
            lo, hi = float(finite.min()), float(finite.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
    else:
        lo, hi = (float(v) for v in value_range)
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo >= hi:
            raise ConfigError(f"histogram range must be finite with lo < hi, got ({lo}, {hi})")

    counts, edges = np.histogram(finite[(finite >= lo) & (finite <= hi)], bins=int(n_bins), range=(lo, hi))
    underflow = int(np.sum(finite < lo))
    overflow = int(np.sum(finite > hi)) + int(energies.size - finite.size)
    return EnergyHistogram(edges=edges, counts=counts, underflow=underflow, overflow=overflow, normalized=normalized)


def _autocorrelation(series: np.ndarray) -> np.ndarray:
    n = series.size
    centered = series - series.mean()
    spectrum = np.fft.rfft(centered, n=2 * n)
    acov = np.fft.irfft(spectrum * np.conj(spectrum), n=2 * n)[:n]
    return acov / acov[0]


def ess(series: Sequence[float]) -> float:
    """
    Effective sample size n / tau, with tau from Geyer's initial monotone
    sequence over pairs of autocorrelations. Clipped to [1, n].
    """
    series = np.asarray(series, dtype=float)
    n = series.size
    if n < 10:
        raise ConfigError(f"ESS needs at least 10 values, got {n}")
    if not np.all(np.isfinite(series)):
        raise ConfigError("ESS needs a finite series")
    if np.var(series) == 0.0:
        return 1.0

    rho = _autocorrelation(series)
    n_pairs = n // 2
    pairs = rho[0:2 * n_pairs:2] + rho[1:2 * n_pairs:2]
    non_positive = np.flatnonzero(pairs <= 0)
    if non_positive.size:
        pairs = pairs[:non_positive[0]]
    pairs = np.minimum.accumulate(pairs)
    tau = -1.0 + 2.0 * float(np.sum(pairs))
    if tau <= 0:
        return float(n)
    return float(np.clip(n / tau, 1.0, n))


def integrated_autocorr_time(series: Sequence[float]) -> float:
    series = np.asarray(series, dtype=float)
    return float(series.size / ess(series))


def mean_with_se(series: Sequence[float]) -> Tuple[float, float]:
    """Mean and its autocorrelation-aware standard error std / sqrt(ESS)."""
    series = np.asarray(series, dtype=float)
    mean = float(series.mean())
    if series.size < 10:
        raise ConfigError(f"standard error needs at least 10 values, got {series.size}")
    return mean, float(series.std(ddof=1) / np.sqrt(ess(series)))


def work_statistics(works: Sequence[float]) -> Dict[str, Any]:
    """
    Summary of generalized works and the importance-weight efficiency
    (sum e^-W)^2 / (n sum e^-2W), computed in log space.
    """
    works = np.asarray(works, dtype=float)
    finite = works[np.isfinite(works)]
    stats: Dict[str, Any] = {'n': int(works.size), 'n_nonfinite': int(works.size - finite.size)}
    if finite.size == 0:
        stats.update({'mean': None, 'std': None, 'min': None, 'max': None, 'weight_efficiency': None})
        return stats
    log_efficiency = 2.0 * logsumexp(-finite) - np.log(finite.size) - logsumexp(-2.0 * finite)
    stats.update({
        'mean': float(finite.mean()),
        'std': float(finite.std(ddof=1)) if finite.size > 1 else 0.0,
        'min': float(finite.min()),
        'max': float(finite.max()),
        'weight_efficiency': float(np.exp(log_efficiency)),
    })
    return stats


def mode_occupancy(spec: GmmSpec, samples: np.ndarray) -> np.ndarray:
    """Fraction of samples assigned to each component by maximal responsibility."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] == 0:
        raise ConfigError("mode occupancy needs at least one sample")
    assigned = np.atleast_1d(mode_assign(spec, samples))
    return np.bincount(assigned, minlength=spec.k) / assigned.size


def convergence_step(running_mean: Sequence[float], oracle_mean: float, half_width: float,
                     window: int = 500) -> Optional[int]:
    """
    First index from which the running mean stays inside
    oracle_mean +/- half_width for `window` consecutive entries, or None.
    """
    running_mean = np.asarray(running_mean, dtype=float)
    if window < 1 or not half_width > 0:
        raise ConfigError("convergence_step needs window >= 1 and a positive half_width")
    inside = np.abs(running_mean - oracle_mean) <= half_width
    run = np.zeros(running_mean.size, dtype=int)
    count = 0
    for i in range(running_mean.size - 1, -1, -1):
        count = count + 1 if inside[i] else 0
        run[i] = count
    hits = np.flatnonzero(run >= window)
    return int(hits[0]) if hits.size else None


def parse_method(name: str) -> Tuple[str, Optional[int]]:
    """'fp', 'bfjacob', 'direct', or 'hutchN' (e.g. 'hutch10') -> (method, n_probes)."""
    if name.startswith('hutch'):
        suffix = name[len('hutch'):].strip('()')
        if not suffix.isdigit() or int(suffix) < 1:
            raise ConfigError(f"Hutchinson method needs a probe count, e.g. 'hutch1', got '{name}'")
        return 'hutch', int(suffix)
    if name in ('fp', 'bfjacob', 'direct'):
        return name, None
    raise ConfigError(f"unknown method '{name}'")


def benchmark_step_cost(methods: Sequence[str], dims: Sequence[int], reps: int = 5, warmup: int = 1,
                        cost_model: str = 'per_coordinate', k_components: int = 4, k_update: int = 4,
                        sigma_f: float = 1e-3, n_grid: int = 100, seed: int = 0,
                        training_time_s: Optional[Dict[int, float]] = None) -> List[Dict[str, Any]]:
    """
    Median wall-clock seconds per MC step for every (method, dim), warm-up
    steps excluded, with the ratio to the FP step at the same dim.

    Args:
        methods: Method names as accepted by parse_method
        dims: Dimensions to time
        reps: Timed steps per cell
        warmup: Untimed steps per cell
        cost_model: 'per_coordinate' reproduces D-pass Jacobian cost; 'fast' is vectorized
        training_time_s: Optional sigma_b training time per dim, reported in the FP row

    Returns:
        Rows with method, dim, median_s, ratio_vs_fp (and training_time_s for fp)
    """
    # sampler_mc imports this module for its trace statistics.
    from ode_flow import OdeFlow, make_model_mixture, time_grid
    from perturbation import PerturbedFlow
    from sampler_mc import ChainProblem, McConfig, initial_state, make_stepper
    from sigma_b import SigmaBNet
    from target_gmm import gmm_random

    if reps < 1 or warmup < 0:
        raise ConfigError("benchmark needs reps >= 1 and warmup >= 0")
    parsed = [(name, *parse_method(name)) for name in methods]
    rows: List[Dict[str, Any]] = []
    for dim in dims:
        rng = np.random.default_rng(seed)
        target = gmm_random(int(dim), k_components, rng)
        flow = OdeFlow(make_model_mixture(target, rng), time_grid(n_steps=n_grid))
        prior = flow.prior()
        net = SigmaBNet(int(dim), rng=rng, init_sigma=sigma_f)
        problem = ChainProblem(target=target, prior=prior, flow=flow, pf=PerturbedFlow(flow, sigma_f, net))

        medians: Dict[str, float] = {}
        for name, method, n_probes in parsed:
            config = McConfig(k_update=min(k_update, int(dim)), n_steps=reps, burn_in=0, method=method,
                              n_probes=n_probes, cost_model=cost_model)
            state = initial_state(problem, config, np.random.default_rng(seed + 1))
            stepper = make_stepper(problem, config)
            for _ in range(warmup):
                stepper(state)
            timings = []
            for _ in range(reps):
                start = time.perf_counter()
                stepper(state)
                timings.append(time.perf_counter() - start)
            medians[name] = float(np.median(timings))
            logger.info("benchmark %s at D=%d: %.4fs per step", name, dim, medians[name])

        fp_time = medians.get('fp')
        for name, method, _ in parsed:
            row = {
                'method': name,
                'dim': int(dim),
                'median_s': medians[name],
                'ratio_vs_fp': medians[name] / fp_time if fp_time else None,
            }
            if method == 'fp' and training_time_s and dim in training_time_s:
                row['training_time_s'] = float(training_time_s[dim])
            rows.append(row)
    return rows
