#!/usr/bin/env python3
"""
Experiment Driver

Command-line entry point for generating targets, training sigma_b, running
chains, sweeping sigma_f or K, computing diagnostics and timing MC steps.
Every command writes into one run directory: the resolved config, a manifest
with seed and package versions, and its CSV/JSONL/markdown outputs.

Usage:
    python cli.py gen-target --dim 16 --k 4 --seed 1 --out runs/target
    python cli.py train-sigb --config configs/gmm_d16.json
    python cli.py sample --config configs/gmm_d16.json --threads 4
    python cli.py sweep --config configs/gmm_d16.json --axis sigma_f --values 1e-4,1e-3,1e-2,0.5
    python cli.py diag runs/sample-seed0
    python cli.py bench --config configs/bench.json
"""

import argparse
import csv
import glob
import json
import logging
import os
import sys
import time
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from diagnostics import (
    benchmark_step_cost, convergence_step, ess, histogram, mean_with_se, mode_occupancy,
    running_mean_energy, work_statistics,
)
from errors import ConfigError, NumericError
from experiment_config import (
    ExperimentConfig, ExperimentConfigLoader, config_from_dict, derive_rng, with_override,
)
from ode_flow import OdeFlow, make_model_mixture, time_grid
from perturbation import PerturbedFlow, sigma_f_guard
from reference_flows import AffineFlow, identity_flow
from report_generator import ReportGenerator
from run_writer import RunWriter
from sampler_mc import ChainProblem, run_chains, save_checkpoint
from sigma_b import SigmaBNet, SigmaBTrainer, TrainResult, write_loss_history
from target_gmm import GaussianPrior, GmmSpec, gmm_random, oracle_mean_energy

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def build_problem(config: ExperimentConfig) -> ChainProblem:
    """Target, prior and base flow described by the config; fp's sigma_b is attached separately."""
    flow_cfg = config.flow
    target: Optional[GmmSpec] = None
    if config.target.source == 'file':
        target = GmmSpec.load_json(config.target.file)
    elif config.target.source == 'random':
        target = gmm_random(config.target.dim, config.target.k, derive_rng(config.seed, 'target-gen'),
                            config.target.mean_scale)

    if flow_cfg.kind == 'ode':
        if config.corruption.model_file:
            model = GmmSpec.load_json(config.corruption.model_file)
        else:
            model = make_model_mixture(target, derive_rng(config.seed, 'corruption'),
                                       config.corruption.weight_concentration, config.corruption.mean_jitter)
        if model.dim != target.dim:
            raise ConfigError(f"model mixture has D={model.dim} but the target has D={target.dim}")
        flow = OdeFlow(model, time_grid(flow_cfg.t_min, flow_cfg.t_max, flow_cfg.n_steps, flow_cfg.rho))
        prior = flow.prior()
    else:
        if flow_cfg.kind == 'affine':
            flow = AffineFlow(flow_cfg.affine_scale, flow_cfg.affine_shift)
        else:
            flow = identity_flow(config.target.dim)
        prior = GaussianPrior(flow.dim, flow_cfg.prior_scale)
        if config.target.source == 'pushforward':
            target = flow.pushforward(prior)
        if target.dim != flow.dim:
            raise ConfigError(f"target has D={target.dim} but the flow has D={flow.dim}")

    if not config.mc.k_update <= prior.dim:
        raise ConfigError(f"mc.k_update={config.mc.k_update} exceeds the dimension {prior.dim}")
    return ChainProblem(target=target, prior=prior, flow=flow)


def attach_sigma_b(config: ExperimentConfig, problem: ChainProblem,
                   verbose: bool = False) -> Tuple[ChainProblem, Optional[TrainResult]]:
    """Add the perturbed flow: exact, constant, loaded or freshly trained sigma_b."""
    pert = config.perturbation
    training = None
    if pert.sigma_b == 'exact':
        pf = PerturbedFlow(problem.flow, pert.sigma_f, problem.flow.sigma_b_exact(pert.sigma_f))
    elif pert.sigma_b == 'constant':
        pf = PerturbedFlow(problem.flow, pert.sigma_f, pert.sigma_b_value)
    elif config.sigma_b.params_file:
        net = SigmaBNet.load_json(config.sigma_b.params_file)
        if net.dim != problem.dim:
            raise ConfigError(f"sigma_b parameters have D={net.dim} but the problem has D={problem.dim}")
        pf = PerturbedFlow(problem.flow, pert.sigma_f, net)
    else:
        trainer = SigmaBTrainer(config.train_config(), config.sigma_b.hidden, config.sigma_b.blocks, verbose=verbose)
        pf, training = trainer.train(problem.flow, problem.prior, pert.sigma_f,
                                     derive_rng(config.seed, 'sigma_b-train'), config.train.held_out)
    problem.pf = pf
    return problem, training


def oracle_for(config: ExperimentConfig, target: GmmSpec) -> Dict[str, Any]:
    n = config.diagnostics.oracle_samples
    mean, se = oracle_mean_energy(target, n, derive_rng(config.seed, 'oracle'))
    return {'mean_energy': mean, 'se': se, 'n': n}


def _default_out(config: ExperimentConfig, command: str) -> str:
    return os.path.join(config.output_dir, f"{command}-seed{config.seed}")


def cmd_gen_target(dim: int, k: int, seed: int, out: str, mean_scale: float = 1.0,
                   weight_concentration: Optional[float] = 5.0, mean_jitter: float = 0.3,
                   verbose: bool = False) -> Dict[str, str]:
    """Write target.json and the corrupted model.json used by the flow."""
    target = gmm_random(dim, k, derive_rng(seed, 'target-gen'), mean_scale)
    model = make_model_mixture(target, derive_rng(seed, 'corruption'), weight_concentration, mean_jitter)
    os.makedirs(out, exist_ok=True)
    paths = {'target': os.path.join(out, 'target.json'), 'model': os.path.join(out, 'model.json')}
    target.save_json(paths['target'])
    model.save_json(paths['model'])
    if verbose:
        print(f"✓ Generated target (D={dim}, k={k}) and model mixture in '{out}'")
    return paths


def cmd_train_sigb(config: ExperimentConfig, out: Optional[str] = None, verbose: bool = False) -> Dict[str, Any]:
    """Train sigma_b; write its parameters, the loss CSV and a manifest with the wall time."""
    out = out or _default_out(config, 'train-sigb')
    problem = build_problem(config)
    trainer = SigmaBTrainer(config.train_config(), config.sigma_b.hidden, config.sigma_b.blocks, verbose=verbose)
    pf, result = trainer.train(problem.flow, problem.prior, config.perturbation.sigma_f,
                               derive_rng(config.seed, 'sigma_b-train'), config.train.held_out)

    writer = RunWriter(out, verbose=verbose)
    writer.write_resolved_config(config.to_dict())
    pf.sigma_b.save_json(writer.path('sigma_b.json'))
    write_loss_history(result.loss_history, writer.path('loss.csv'))
    writer.register('sigma_b.json', 'loss.csv')
    writer.write_manifest('train-sigb', config.seed, extra={'training': result.summary()})
    return {'out': out, 'training': result.summary()}


def _chain_summary(trace) -> Dict[str, Any]:
    summary = trace.summary()
    energies = trace.production_energies()
    summary['ess'] = ess(energies) if energies.size >= 10 else None
    return summary


def cmd_sample(config: ExperimentConfig, out: Optional[str] = None, threads: int = 1,
               verbose: bool = False) -> Dict[str, Any]:
    """
    Run `n_chains` chains of the configured method and write per-chain traces,
    samples, running means and checkpoints, plus the pooled histogram and a
    manifest.
    """
    out = out or _default_out(config, 'sample')
    mc = config.mc_config()
    problem = build_problem(config)
    training = None
    guard = None
    if mc.method == 'fp':
        problem, training = attach_sigma_b(config, problem, verbose=verbose)
        guard = sigma_f_guard(problem.flow, problem.prior, config.perturbation.sigma_f, derive_rng(config.seed, 'guard'))

    writer = RunWriter(out, verbose=False)
    writer.write_resolved_config(config.to_dict())
    sinks = [writer.chain_output(i, direct=mc.method == 'direct') for i in range(config.n_chains)]
    rngs = [derive_rng(config.seed, f"chain-{i}") for i in range(config.n_chains)]
    if verbose:
        print(f"🔄 Running {config.n_chains} chain(s) of {mc.method_tag} for {mc.total_steps} steps")
    start = time.perf_counter()
    traces = run_chains(mc, problem, rngs, threads=threads, sinks=sinks, progress=verbose)
    wall_time = time.perf_counter() - start

    summaries = []
    for i, trace in enumerate(traces):
        writer.write_running_mean(f"chain_{i}/running_mean.csv", trace.running_mean())
        save_checkpoint(trace.final_state, writer.path(f"chain_{i}", 'checkpoint.json'))
        writer.register(f"chain_{i}/trace.csv", f"chain_{i}/samples.jsonl", f"chain_{i}/checkpoint.json")
        summaries.append(_chain_summary(trace))

    pooled = np.concatenate([trace.production_energies() for trace in traces])
    writer.write_histogram('histogram.csv', histogram(pooled, config.diagnostics.n_bins))
    samples = [trace.sample_array() for trace in traces if trace.samples]
    occupancy = mode_occupancy(problem.target, np.concatenate(samples)) if samples else None

    extra = {
        'method': mc.method_tag,
        'wall_time_s': wall_time,
        'chains': summaries,
        'mode_occupancy': occupancy.tolist() if occupancy is not None else None,
        'sigma_f_guard': guard,
        'training': training.summary() if training else None,
    }
    if mc.method != 'direct':
        extra['work_statistics'] = work_statistics(np.concatenate([t.production_works() for t in traces]))
    writer.write_manifest('sample', config.seed, extra=extra)
    if verbose:
        for i, summary in enumerate(summaries):
            print(f"✓ Chain {i}: <E>={summary['mean_energy']:.6g}, acceptance={summary['acceptance_rate']}")
    return {'out': out, 'chains': summaries, 'traces': traces, 'mode_occupancy': extra['mode_occupancy'],
            'training': extra['training'], 'wall_time_s': wall_time}


def _parse_sweep_values(axis: str, values: Sequence[Any]) -> List[Any]:
    if not values:
        raise ConfigError("sweep needs at least one value")
    if axis == 'sigma_f':
        return [float(v) for v in values]
    if axis == 'k_update':
        parsed = [float(v) for v in values]
        if any(v != int(v) for v in parsed):
            raise ConfigError(f"k_update sweep values must be integers, got {values}")
        return [int(v) for v in parsed]
    raise ConfigError(f"sweep axis must be 'sigma_f' or 'k_update', got '{axis}'")


def cmd_sweep(config: ExperimentConfig, axis: str, values: Sequence[Any], out: Optional[str] = None,
              threads: int = 1, verbose: bool = False) -> Dict[str, Any]:
    """
    One cmd_sample run per value with the same base seed. A failing cell is
    recorded with its error and the sweep moves on.
    """
    values = _parse_sweep_values(axis, values)
    out = out or _default_out(config, f"sweep-{axis}")
    key = 'perturbation.sigma_f' if axis == 'sigma_f' else 'mc.k_update'
    problem = build_problem(config)
    oracle = oracle_for(config, problem.target)
    band = config.diagnostics.band_se

    cells = []
    for value in values:
        cell: Dict[str, Any] = {'value': value}
        try:
            cell_config = with_override(config, key, value)
            result = cmd_sample(cell_config, os.path.join(out, f"{axis}_{value}"), threads=threads, verbose=False)
            means = [c['mean_energy'] for c in result['chains']]
            ses = [c['mean_energy_se'] or 0.0 for c in result['chains']]
            mean = float(np.mean(means))
            se = float(np.sqrt(np.sum(np.square(ses)))) / len(ses)
            rates = [c['acceptance_rate'] for c in result['chains'] if c['acceptance_rate'] is not None]
            cell.update({
                'status': 'ok',
                'mean_energy': mean,
                'mean_energy_se': se,
                'acceptance_rate': float(np.mean(rates)) if rates else None,
                'within_band': bool(abs(mean - oracle['mean_energy']) <= band * np.hypot(se, oracle['se'])),
            })
            if verbose:
                print(f"✓ {axis}={value}: <E>={mean:.6g} ± {se:.2g}, acceptance={cell['acceptance_rate']}")
        except (ConfigError, NumericError, ArithmeticError, ValueError) as e:
            cell.update({'status': 'failed', 'error': str(e), 'mean_energy': None, 'mean_energy_se': None,
                         'acceptance_rate': None, 'within_band': None})
            logger.warning("sweep cell %s=%s failed: %s", axis, value, e)
            if verbose:
                print(f"✗ {axis}={value}: {e}")
        cells.append(cell)

    writer = RunWriter(out, verbose=verbose)
    writer.write_resolved_config(config.to_dict())
    writer.write_csv('sweep_summary.csv', [axis, 'status', 'mean_energy', 'mean_energy_se', 'acceptance_rate', 'within_band'],
                     ([c['value'], c['status'], c['mean_energy'], c['mean_energy_se'], c['acceptance_rate'], c['within_band']]
                      for c in cells))
    report = ReportGenerator().generate_sweep_report(f"Sweep over {axis}", axis, cells, oracle)
    writer.write_text('report.md', report)
    writer.write_manifest('sweep', config.seed, extra={'axis': axis, 'values': values, 'oracle': oracle, 'cells': cells})
    return {'out': out, 'cells': cells, 'oracle': oracle}


def _read_trace(path: str) -> Dict[str, np.ndarray]:
    with open(path, 'r', newline='', encoding='utf-8') as handle:
        rows = list(csv.DictReader(handle))
    columns = rows[0].keys() if rows else []
    return {column: np.array([float(row[column]) for row in rows]) for column in columns}


def _read_samples(path: str) -> np.ndarray:
    with open(path, 'r', encoding='utf-8') as handle:
        return np.array([json.loads(line)['x'] for line in handle if line.strip()])


def _read_flagged(path: str) -> Optional[int]:
    """Non-finite trial count from a chain checkpoint; None when the chain has none."""
    if not os.path.exists(path):
        return None
    with open(path, 'r', encoding='utf-8') as handle:
        try:
            return int(json.load(handle)['counters']['flagged'])
        except (json.JSONDecodeError, KeyError) as e:
            raise ConfigError(f"Invalid checkpoint '{path}': {e}") from e


def cmd_diag(run_dir: str, verbose: bool = False) -> Dict[str, Any]:
    """Recompute diagnostics from a sample run directory and render its report."""
    config_path = os.path.join(run_dir, 'resolved_config.json')
    if not os.path.exists(config_path):
        raise FileNotFoundError(f"'{run_dir}' has no resolved_config.json")
    with open(config_path, 'r', encoding='utf-8') as handle:
        config = config_from_dict(json.load(handle))
    problem = build_problem(config)
    oracle = oracle_for(config, problem.target)
    burn_in = config.mc_config().burn_in_steps

    chain_dirs = sorted(glob.glob(os.path.join(run_dir, 'chain_*')), key=lambda p: int(p.rsplit('_', 1)[-1]))
    if not chain_dirs:
        raise FileNotFoundError(f"'{run_dir}' has no chain outputs")
    writer = RunWriter(run_dir, verbose=verbose)
    chains, pooled, works, samples = [], [], [], []
    for index, chain_dir in enumerate(chain_dirs):
        trace = _read_trace(os.path.join(chain_dir, 'trace.csv'))
        production = trace['step'] >= burn_in
        energies = trace['energy'][production]
        pooled.append(energies)
        if 'W' in trace:
            works.append(trace['W'][production])
        chain_samples = _read_samples(os.path.join(chain_dir, 'samples.jsonl'))
        if chain_samples.size:
            samples.append(chain_samples)

        running = running_mean_energy(energies)
        writer.write_running_mean(f"chain_{index}/running_mean.csv", running)
        mean, se = mean_with_se(energies) if energies.size >= 10 else (float(energies.mean()), None)
        half_width = 2.0 * np.hypot(se or 0.0, oracle['se'])
        accepted = trace.get('accepted')
        chains.append({
            'steps': int(trace['step'][-1]),
            'burn_in': burn_in,
            'mean_energy': mean,
            'mean_energy_se': se,
            'acceptance_rate': float(accepted[1:].mean()) if accepted is not None and accepted.size > 1 else None,
            'ess': ess(energies) if energies.size >= 10 else None,
            'autocorr_time': energies.size / ess(energies) if energies.size >= 10 else None,
            'flagged': _read_flagged(os.path.join(chain_dir, 'checkpoint.json')),
            'seconds_per_step': None,
            'convergence_step': convergence_step(running, oracle['mean_energy'], half_width,
                                                 config.diagnostics.convergence_window) if half_width > 0 else None,
        })

    energies = np.concatenate(pooled)
    hist = histogram(energies, config.diagnostics.n_bins)
    writer.write_histogram('histogram.csv', hist)
    occupancy = mode_occupancy(problem.target, np.concatenate(samples)).tolist() if samples else None
    work_stats = work_statistics(np.concatenate(works)) if works else None
    diagnostics = {'oracle': oracle, 'chains': chains, 'mode_occupancy': occupancy, 'work_statistics': work_stats}
    writer.write_json('diagnostics.json', diagnostics)
    report = ReportGenerator(verbose=verbose).generate_run_report(
        f"Sampling run {os.path.basename(os.path.normpath(run_dir))}", config.mc_config().method_tag, chains,
        oracle=oracle, histogram_rows=hist.to_rows(), mode_occupancy=occupancy, work_stats=work_stats)
    writer.write_text('report.md', report)
    return diagnostics


def _bench_config(config: ExperimentConfig, dim: int) -> ExperimentConfig:
    """The random ODE problem the benchmark times at dimension `dim`."""
    data = config.to_dict()
    data['target'].update({'source': 'random', 'file': None, 'dim': dim, 'k': config.benchmark.k_components})
    data['flow']['kind'] = 'ode'
    data['perturbation']['sigma_b'] = 'net'
    data['corruption']['model_file'] = None
    data['mc']['k_update'] = min(config.mc.k_update, dim)
    return config_from_dict(data)


def cmd_bench(config: ExperimentConfig, out: Optional[str] = None, verbose: bool = False) -> Dict[str, Any]:
    """Per-step cost table for the configured methods and dimensions."""
    out = out or _default_out(config, 'bench')
    bench = config.benchmark
    training_time = None
    if bench.include_training:
        training_time = {}
        for dim in bench.dims:
            dim_config = _bench_config(config, int(dim))
            problem = build_problem(dim_config)
            trainer = SigmaBTrainer(dim_config.train_config(), config.sigma_b.hidden, config.sigma_b.blocks, verbose=False)
            _, result = trainer.train(problem.flow, problem.prior, config.perturbation.sigma_f,
                                      derive_rng(config.seed, f"sigma_b-train-{dim}"), held_out=0)
            training_time[int(dim)] = result.wall_time_s
    if verbose:
        print(f"🔄 Timing {', '.join(bench.methods)} at D in {bench.dims} ({bench.cost_model} cost model)")
    rows = benchmark_step_cost(bench.methods, bench.dims, reps=bench.reps, warmup=bench.warmup,
                               cost_model=bench.cost_model, k_components=bench.k_components,
                               k_update=config.mc.k_update, sigma_f=config.perturbation.sigma_f,
                               n_grid=config.flow.n_steps, seed=config.seed, training_time_s=training_time)
    writer = RunWriter(out, verbose=verbose)
    writer.write_resolved_config(config.to_dict())
    writer.write_cost_table('cost_table.csv', rows)
    writer.write_text('report.md', ReportGenerator().generate_bench_report("MC step cost", rows, bench.cost_model))
    writer.write_manifest('bench', config.seed, extra={'rows': rows})
    return {'out': out, 'rows': rows}


def _load(args) -> ExperimentConfig:
    if args.config:
        config = ExperimentConfigLoader(args.config, verbose=not args.quiet).load()
    else:
        config = ExperimentConfig()
    if args.seed is not None:
        config = with_override(config, 'seed', args.seed)
    return config


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="Path to the experiment config JSON")
    common.add_argument("--seed", type=int, help="Override the master seed")
    common.add_argument("--out", "-o", help="Run directory (default: <output_dir>/<command>-seed<seed>)")
    common.add_argument("--threads", type=int, default=1, help="Maximum number of chains run concurrently")
    common.add_argument("--quiet", "-q", action="store_true", help="Suppress progress messages")

    parser = argparse.ArgumentParser(description="Unbiased Boltzmann sampling with perturbed flows")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-target", parents=[common], help="Generate a random GMM target and its model mixture")
    gen.add_argument("--dim", type=int, required=True, help="Dimension D")
    gen.add_argument("--k", type=int, required=True, help="Number of mixture components")
    gen.add_argument("--mean-scale", type=float, default=1.0, help="Multiplier for the component means")

    sub.add_parser("train-sigb", parents=[common], help="Train the sigma_b network")
    sub.add_parser("sample", parents=[common], help="Run Monte Carlo chains")

    sweep = sub.add_parser("sweep", parents=[common], help="Repeat sampling over sigma_f or K values")
    sweep.add_argument("--axis", choices=["sigma_f", "k_update"], help="Swept parameter (default: config sweep.axis)")
    sweep.add_argument("--values", help="Comma-separated values (default: config sweep.values)")

    diag = sub.add_parser("diag", parents=[common], help="Diagnostics and report for a sample run directory")
    diag.add_argument("run_dir", help="Run directory written by 'sample'")

    sub.add_parser("bench", parents=[common], help="Median wall time per MC step by method and dimension")
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format='%(levelname)s %(name)s: %(message)s')
    verbose = not args.quiet
    try:
        if args.command == "gen-target":
            seed = args.seed if args.seed is not None else 0
            cmd_gen_target(args.dim, args.k, seed, args.out or f"target-d{args.dim}-k{args.k}-seed{seed}",
                           args.mean_scale, verbose=verbose)
        elif args.command == "diag":
            cmd_diag(args.run_dir, verbose=verbose)
        else:
            config = _load(args)
            if args.command == "train-sigb":
                cmd_train_sigb(config, args.out, verbose=verbose)
            elif args.command == "sample":
                cmd_sample(config, args.out, threads=args.threads, verbose=verbose)
            elif args.command == "sweep":
                axis = args.axis or config.sweep.axis
                if axis is None:
                    raise ConfigError("sweep needs --axis or sweep.axis in the config")
                values = args.values.split(',') if args.values else config.sweep.values
                cmd_sweep(config, axis, values, args.out, threads=args.threads, verbose=verbose)
            elif args.command == "bench":
                cmd_bench(config, args.out, verbose=verbose)
    except (ConfigError, FileNotFoundError) as e:
        print(f"✗ Configuration error: {e}")
        return EXIT_CONFIG
    except NumericError as e:
        print(f"✗ Numeric failure: {e}")
        return EXIT_NUMERIC
    except Exception as e:
        print(f"✗ Error: {e}")
        return EXIT_FAILURE
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
