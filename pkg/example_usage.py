#!/usr/bin/env python3
"""
Example usage of the flow perturbation sampler as a library
"""

import numpy as np

from experiment_config import derive_rng
from ode_flow import OdeFlow, make_model_mixture, time_grid
from perturbation import PerturbedFlow
from sampler_mc import ChainProblem, McConfig, run_chain
from sigma_b import SigmaBTrainer, TrainConfig
from target_gmm import gmm_random, oracle_mean_energy


def main():
    # Example 1: A random target and a deliberately imperfect flow
    print("=== Example 1: Target and Flow ===")
    target = gmm_random(4, 3, derive_rng(0, 'target-gen'))
    model = make_model_mixture(target, derive_rng(0, 'corruption'))
    flow = OdeFlow(model, time_grid(n_steps=30))
    prior = flow.prior()
    print(f"Target: {target}")
    print(f"Flow:   {flow}")

    print("\n" + "=" * 60)
    print("=== Example 2: Training sigma_b ===")
    trainer = SigmaBTrainer(TrainConfig(learning_rate=0.02, batch_size=64, max_iterations=200),
                            hidden=16, blocks=2)
    pf, training = trainer.train(flow, prior, 1e-3, derive_rng(0, 'sigma_b-train'), held_out=200)
    print(f"Final loss {training.loss_history[-1]:.4g} after {training.iterations} iterations")

    print("\n" + "=" * 60)
    print("=== Example 3: Corrected vs Uncorrected Sampling ===")
    oracle, oracle_se = oracle_mean_energy(target, 20000, derive_rng(0, 'oracle'))
    print(f"Exact <E> = {oracle:.4f} ± {oracle_se:.4f}")
    problem = ChainProblem(target=target, prior=prior, flow=flow, pf=pf)
    for method in ('fp', 'direct'):
        trace = run_chain(McConfig(k_update=2, n_steps=2000, method=method), problem, derive_rng(0, method))
        summary = trace.summary()
        acceptance = summary['acceptance_rate']
        print(f"  {method:>6}: <E> = {summary['mean_energy']:.4f} ± {summary['mean_energy_se']:.4f}"
              + (f", acceptance {acceptance:.3f}" if acceptance is not None else ""))


if __name__ == "__main__":
    main()
