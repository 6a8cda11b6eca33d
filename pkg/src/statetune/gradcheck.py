"""Finite-difference suites for the base and lifted recurrences."""

from __future__ import annotations

import numpy as np

from .core import FrozenWeights, ModelDims
from .gradients import finite_diff_check
from .kernel import KernelConfig, KernelLift
from .tuning import StateModel


def rollout_loss_problem(model: StateModel, T: int, seed: int, fault: bool = False):
    """Random tokens/targets; returns (loss_fn, analytic_grad_fn, S0)."""
    rng = np.random.default_rng([seed, 3])
    V = model.weights.dims.vocab_size
    inputs = rng.integers(V, size=(1, T))
    targets = rng.integers(V, size=(1, T))
    mask = np.ones((1, T))
    D = model.state_dim
    S0 = 0.1 * rng.standard_normal((model.weights.dims.num_heads, D, D))

    def loss_fn(S):
        return model.loss_and_grad(S, inputs, targets, mask)[0]

    def grad_fn(S):
        g = model.loss_and_grad(S, inputs, targets, mask)[1]
        if fault:
            g = g.copy()
            g[0, 0] = -g[0, 0]  # deliberate sign error in one adjoint row
        return g

    return loss_fn, grad_fn, S0


def run_gradcheck(N=6, T=10, M=12, gamma=0.5, tol=1e-5, step=1e-5, seed=0, heads=2,
                  vocab=16, fault=False):
    dims = ModelDims(vocab, N * heads, heads)
    weights = FrozenWeights.generate(dims, seed)
    cases = {"base": StateModel(weights)}
    lift = KernelLift.build(KernelConfig(M=M, gamma=gamma, seed=seed), weights)
    cases["lifted"] = StateModel(weights, "kernel", lift)
    report = {"N": N, "T": T, "M": M, "gamma": gamma, "tol": tol, "step": step,
              "seed": seed, "cases": {}}
    ok = True
    for name, model in cases.items():
        loss_fn, grad_fn, S0 = rollout_loss_problem(model, T, seed, fault)
        res = finite_diff_check(loss_fn, S0, grad_fn(S0), step)
        passed = res.max_rel_error < tol
        ok &= passed
        report["cases"][name] = {"max_rel_error": res.max_rel_error,
                                 "worst_index": list(res.worst_index),
                                 "analytic": float(res.analytic[res.worst_index]),
                                 "numeric": float(res.numeric[res.worst_index]),
                                 "passed": bool(passed)}
    report["passed"] = bool(ok)
    return report
