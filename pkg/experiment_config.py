#!/usr/bin/env python3
"""
Experiment Configuration

Loads, validates and resolves the JSON experiment configuration. A config
file holds a `schema_version` and nested sections; every missing key takes
its default, every unknown key is an error. The resolved form (defaults
filled in) is what each run directory stores, so a run can be repeated from
its own output.

Random streams are derived from one master seed by hashing a label, so that
e.g. the chain streams do not change when the target generator draws more
numbers.
"""

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Dict, List, Optional

import numpy as np

from errors import ConfigError
from ode_flow import COST_MODELS, time_grid
from sampler_mc import McConfig
from sigma_b import TrainConfig

SCHEMA_VERSION = "1.0"
TARGET_SOURCES = ('random', 'file', 'pushforward')
FLOW_KINDS = ('ode', 'affine', 'identity')
SIGMA_B_KINDS = ('net', 'exact', 'constant')
SWEEP_AXES = ('sigma_f', 'k_update')


@dataclass
class TargetSection:
    source: str = 'random'
    file: Optional[str] = None
    dim: int = 16
    k: int = 4
    mean_scale: float = 1.0


@dataclass
class CorruptionSection:
    model_file: Optional[str] = None
    weight_concentration: Optional[float] = 5.0
    mean_jitter: float = 0.3


@dataclass
class FlowSection:
    kind: str = 'ode'
    t_min: float = 0.01
    t_max: float = 15.0
    n_steps: int = 100
    rho: float = 3.0
    affine_scale: Optional[List[float]] = None
    affine_shift: Optional[List[float]] = None
    prior_scale: float = 1.0


@dataclass
class PerturbationSection:
    sigma_f: float = 1e-3
    sigma_b: str = 'net'
    sigma_b_value: Optional[float] = None


@dataclass
class SigmaBSection:
    hidden: int = 64
    blocks: int = 4
    eps_floor: float = 1e-6
    params_file: Optional[str] = None


@dataclass
class TrainSection:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_iterations: int = 2000
    optimizer: str = 'adam'
    window: int = 100
    plateau_tol: float = 1e-3
    min_iterations: int = 500
    init_to_sigma_f: bool = True
    held_out: int = 1000


@dataclass
class McSection:
    k_update: int = 5
    n_steps: int = 10000
    thin: int = 10
    burn_in: Optional[int] = None
    cost_model: str = 'fast'


@dataclass
class HutchinsonSection:
    n_probes: Optional[int] = None
    fixed_probes: bool = False


@dataclass
class ProposalSection:
    shared_indices: bool = False


@dataclass
class BenchmarkSection:
    methods: List[str] = field(default_factory=lambda: ['fp', 'bfjacob', 'hutch1', 'hutch10'])
    dims: List[int] = field(default_factory=lambda: [16, 64, 256])
    reps: int = 5
    warmup: int = 1
    k_components: int = 4
    cost_model: str = 'per_coordinate'
    include_training: bool = False


@dataclass
class SweepSection:
    axis: Optional[str] = None
    values: List[float] = field(default_factory=list)


@dataclass
class DiagnosticsSection:
    n_bins: int = 50
    oracle_samples: int = 100000
    convergence_window: int = 500
    band_se: float = 3.0


@dataclass
class ExperimentConfig:
    target: TargetSection = field(default_factory=TargetSection)
    corruption: CorruptionSection = field(default_factory=CorruptionSection)
    flow: FlowSection = field(default_factory=FlowSection)
    perturbation: PerturbationSection = field(default_factory=PerturbationSection)
    sigma_b: SigmaBSection = field(default_factory=SigmaBSection)
    train: TrainSection = field(default_factory=TrainSection)
    mc: McSection = field(default_factory=McSection)
    hutchinson: HutchinsonSection = field(default_factory=HutchinsonSection)
    proposal: ProposalSection = field(default_factory=ProposalSection)
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    diagnostics: DiagnosticsSection = field(default_factory=DiagnosticsSection)
    method: str = 'fp'
    seed: int = 0
    n_chains: int = 1
    output_dir: str = 'runs'

    def to_dict(self) -> Dict[str, Any]:
        """Fully resolved, JSON-ready form (defaults included)."""
        data = {'schema_version': SCHEMA_VERSION}
        data.update(dataclasses.asdict(self))
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @property
    def dim(self) -> Optional[int]:
        """Dimension when it is known without reading files."""
        if self.flow.kind == 'affine' and self.flow.affine_scale is not None:
            return len(self.flow.affine_scale)
        if self.flow.kind == 'identity' or self.target.source == 'random':
            return self.target.dim
        return None

    def mc_config(self) -> McConfig:
        return McConfig(
            k_update=self.mc.k_update,
            n_steps=self.mc.n_steps,
            thin=self.mc.thin,
            burn_in=self.mc.burn_in,
            method=self.method,
            n_probes=self.hutchinson.n_probes,
            fixed_probes=self.hutchinson.fixed_probes,
            shared_indices=self.proposal.shared_indices,
            cost_model=self.mc.cost_model,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.train.learning_rate,
            batch_size=self.train.batch_size,
            max_iterations=self.train.max_iterations,
            optimizer=self.train.optimizer,
            eps_floor=self.sigma_b.eps_floor,
            window=self.train.window,
            plateau_tol=self.train.plateau_tol,
            min_iterations=self.train.min_iterations,
            init_to_sigma_f=self.train.init_to_sigma_f,
        )


_SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(ExperimentConfig)
             if f.default_factory is not dataclasses.MISSING}


_OPTIONAL_TYPES = {
    'target.file': str,
    'corruption.model_file': str,
    'corruption.weight_concentration': float,
    'flow.affine_scale': list,
    'flow.affine_shift': list,
    'perturbation.sigma_b_value': float,
    'sigma_b.params_file': str,
    'mc.burn_in': int,
    'hutchinson.n_probes': int,
    'sweep.axis': str,
}


def _type_error(path: str, value: Any, default: Any) -> Optional[str]:
    if value is None:
        return None if default is None or path in _OPTIONAL_TYPES else f"'{path}' may not be null"
    if default is None:
        expected = _OPTIONAL_TYPES.get(path)
        if expected is None:
            return None
        default = expected()
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if ok:
        return None
    return f"'{path}' expects {type(default).__name__}, got {type(value).__name__} ({value!r})"


def _build(cls, data: Any, prefix: str, errors: List[str]):
    instance = cls()
    if not isinstance(data, dict):
        errors.append(f"section '{prefix}' must be an object")
        return instance
    known = {f.name for f in dataclasses.fields(cls)}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in known:
            errors.append(f"unknown key '{path}'")
            continue
        if key in _SECTIONS and cls is ExperimentConfig:
            setattr(instance, key, _build(_SECTIONS[key], value, path, errors))
            continue
        problem = _type_error(path, value, getattr(instance, key))
        if problem:
            errors.append(problem)
            continue
        if isinstance(getattr(instance, key), float) and isinstance(value, int):
            value = float(value)
        setattr(instance, key, copy.deepcopy(value))
    return instance


def _semantic_errors(config: ExperimentConfig) -> List[str]:
    errors = []
    if config.seed < 0:
        errors.append(f"seed must be >= 0, got {config.seed}")
    if config.n_chains < 1:
        errors.append(f"n_chains must be >= 1, got {config.n_chains}")

    target = config.target
    if target.source not in TARGET_SOURCES:
        errors.append(f"target.source must be one of {TARGET_SOURCES}, got '{target.source}'")
    if target.source == 'file' and not target.file:
        errors.append("target.source 'file' requires target.file")
    if target.source == 'random' and (target.dim < 1 or target.k < 1):
        errors.append(f"random target needs dim >= 1 and k >= 1, got dim={target.dim}, k={target.k}")
    if not target.mean_scale > 0:
        errors.append(f"target.mean_scale must be > 0, got {target.mean_scale}")

    corruption = config.corruption
    if corruption.weight_concentration is not None and not (
            isinstance(corruption.weight_concentration, (int, float)) and corruption.weight_concentration > 0):
        errors.append("corruption.weight_concentration must be a positive number or null")
    if corruption.mean_jitter < 0:
        errors.append(f"corruption.mean_jitter must be >= 0, got {corruption.mean_jitter}")

    flow = config.flow
    if flow.kind not in FLOW_KINDS:
        errors.append(f"flow.kind must be one of {FLOW_KINDS}, got '{flow.kind}'")
    if flow.kind == 'ode':
        try:
            time_grid(flow.t_min, flow.t_max, flow.n_steps, flow.rho)
        except ConfigError as e:
            errors.append(f"flow: {e}")
    if flow.kind == 'affine' and not flow.affine_scale:
        errors.append("flow.kind 'affine' requires flow.affine_scale")
    if target.source == 'pushforward' and flow.kind == 'ode':
        errors.append("target.source 'pushforward' needs an affine or identity flow")
    if not flow.prior_scale > 0:
        errors.append(f"flow.prior_scale must be > 0, got {flow.prior_scale}")

    pert = config.perturbation
    if not pert.sigma_f > 0:
        errors.append(f"perturbation.sigma_f must be > 0, got {pert.sigma_f}")
    if pert.sigma_b not in SIGMA_B_KINDS:
        errors.append(f"perturbation.sigma_b must be one of {SIGMA_B_KINDS}, got '{pert.sigma_b}'")
    if pert.sigma_b == 'exact' and flow.kind == 'ode':
        errors.append("perturbation.sigma_b 'exact' is only available for affine and identity flows")
    if pert.sigma_b == 'constant' and not (isinstance(pert.sigma_b_value, (int, float)) and pert.sigma_b_value > 0):
        errors.append("perturbation.sigma_b 'constant' requires a positive sigma_b_value")

    if config.sigma_b.hidden < 1 or config.sigma_b.blocks < 0:
        errors.append("sigma_b.hidden must be >= 1 and sigma_b.blocks >= 0")
    errors.extend(f"train: {e}" for e in config.train_config().validate())
    if config.train.held_out < 1:
        errors.append(f"train.held_out must be >= 1, got {config.train.held_out}")

    # Without a known dimension only the lower bound of k_update can be checked here.
    dim = config.dim if config.dim is not None else max(config.mc.k_update, 1)
    errors.extend(f"mc: {e}" for e in config.mc_config().validate(dim))

    bench = config.benchmark
    if bench.cost_model not in COST_MODELS:
        errors.append(f"benchmark.cost_model must be one of {COST_MODELS}, got '{bench.cost_model}'")
    if bench.reps < 1 or bench.warmup < 0:
        errors.append("benchmark needs reps >= 1 and warmup >= 0")

    sweep = config.sweep
    if sweep.axis is not None and sweep.axis not in SWEEP_AXES:
        errors.append(f"sweep.axis must be one of {SWEEP_AXES}, got '{sweep.axis}'")

    diag = config.diagnostics
    if diag.n_bins < 1 or diag.oracle_samples < 2 or diag.convergence_window < 1 or not diag.band_se > 0:
        errors.append("diagnostics needs n_bins >= 1, oracle_samples >= 2, convergence_window >= 1 and band_se > 0")
    return errors


def _warnings(config: ExperimentConfig) -> List[str]:
    warnings = []
    if config.perturbation.sigma_f > 0.1:
        warnings.append(f"sigma_f={config.perturbation.sigma_f} is large; the chain may converge to a biased distribution")
    if config.method == 'fp' and config.perturbation.sigma_b == 'net' and not config.sigma_b.params_file:
        warnings.append("method 'fp' with a network sigma_b but no sigma_b.params_file: it will be trained inline")
    if config.mc.n_steps and config.mc.n_steps < 1000:
        warnings.append(f"mc.n_steps={config.mc.n_steps} is short for stable averages")
    return warnings


def validate_config_dict(data: Any) -> Dict[str, Any]:
    """
    Validate a raw config document.

    Returns:
        {'is_valid', 'errors', 'warnings', 'stats'}
    """
    results = {'is_valid': False, 'errors': [], 'warnings': [], 'stats': {}}
    if not isinstance(data, dict):
        results['errors'].append("config must be a JSON object")
        return results
    body = dict(data)
    version = body.pop('schema_version', SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        results['errors'].append(f"schema_version '{version}' is not supported (expected '{SCHEMA_VERSION}')")
    errors: List[str] = []
    config = _build(ExperimentConfig, body, '', errors)
    if not errors:
        errors.extend(_semantic_errors(config))
    results['errors'].extend(errors)
    results['warnings'] = _warnings(config) if not errors else []
    results['stats'] = {
        'method': config.method,
        'dim': config.dim,
        'sections_given': sorted(k for k in body if k in _SECTIONS),
    }
    results['is_valid'] = not results['errors']
    return results


def config_from_dict(data: Any) -> ExperimentConfig:
    results = validate_config_dict(data)
    if not results['is_valid']:
        raise ConfigError("invalid configuration: " + "; ".join(results['errors']))
    body = dict(data)
    body.pop('schema_version', None)
    return _build(ExperimentConfig, body, '', [])


def load_config(path: str) -> ExperimentConfig:
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file '{path}' not found")
    with open(path, 'r', encoding='utf-8') as handle:
        try:
            data = json.load(handle)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Invalid JSON in config file '{path}': {e}") from e
    return config_from_dict(data)


def with_override(config: ExperimentConfig, dotted_key: str, value: Any) -> ExperimentConfig:
    """A validated copy of `config` with one (possibly nested) key replaced."""
    data = config.to_dict()
    node = data
    parts = dotted_key.split('.')
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config section '{part}' in '{dotted_key}'")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key '{dotted_key}'")
    node[parts[-1]] = value
    return config_from_dict(data)


def derive_seed(master_seed: int, label: str) -> int:
    """128-bit seed from SHA-256 of '<master>:<label>'."""
    digest = hashlib.sha256(f"{int(master_seed)}:{label}".encode('utf-8')).digest()
    return int.from_bytes(digest[:16], 'big')


def derive_rng(master_seed: int, label: str) -> np.random.Generator:
    """Independent Philox stream for a labeled component (e.g. 'chain-0')."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(derive_seed(master_seed, label))))


class ExperimentConfigLoader:
    """Loads a config file with status output, keeping the validation report."""

    def __init__(self, config_path: str, verbose: bool = True):
        self.config_path = config_path
        self.verbose = verbose
        self.config: Optional[ExperimentConfig] = None
        self.validation: Dict[str, Any] = {}
        self.last_loaded: Optional[datetime] = None

    def load(self) -> ExperimentConfig:
        if not os.path.exists(self.config_path):
            if self.verbose:
                print(f"✗ Config file '{self.config_path}' not found")
            raise FileNotFoundError(f"config file '{self.config_path}' not found")
        with open(self.config_path, 'r', encoding='utf-8') as handle:
            try:
                data = json.load(handle)
            except json.JSONDecodeError as e:
                if self.verbose:
                    print(f"✗ Error parsing JSON in config file '{self.config_path}': {e}")
                raise ConfigError(f"Invalid JSON in config file '{self.config_path}': {e}") from e

        self.validation = validate_config_dict(data)
        if not self.validation['is_valid']:
            if self.verbose:
                print(f"✗ Config '{self.config_path}' has {len(self.validation['errors'])} error(s):")
                for error in self.validation['errors']:
                    print(f"  - {error}")
            raise ConfigError("invalid configuration: " + "; ".join(self.validation['errors']))

        self.config = config_from_dict(data)
        self.last_loaded = datetime.now()
        if self.verbose:
            print(f"✓ Loaded config '{self.config_path}' (method={self.config.method}, seed={self.config.seed})")
            for warning in self.validation['warnings']:
                print(f"⚠️  {warning}")
        return self.config

    def get_summary(self) -> Dict[str, Any]:
        return {
            'config_file': self.config_path,
            'last_loaded': self.last_loaded.isoformat() if self.last_loaded else None,
            'is_valid': self.validation.get('is_valid', False),
            'warnings': self.validation.get('warnings', []),
            'method': self.config.method if self.config else None,
        }
