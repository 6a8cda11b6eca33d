"""Micro-benchmarks of the per-step operations and of the scan backends."""

from __future__ import annotations

import os
import platform
import time

import numpy as np

from . import _backend
from .core import FrozenWeights, ModelDims, derive_sequence, state_step
from .decorrelation import DecorrelationMatrix, update_R
from .kernel import KernelConfig, KernelLift, LiftedBundle, lift, lifted_state_step
from .testtime import TeacherStep, TestTimeConfig, tune_state_step


def fingerprint():
    return {"machine": platform.machine(), "processor": platform.processor(),
            "system": platform.system(), "python": platform.python_version(),
            "numpy": np.__version__, "cpus": os.cpu_count(),
            "backend": _backend.BACKEND, "backends": _backend.available()}


def _time(fn, iters, warmup=5):
    for _ in range(warmup):
        fn()
    t0 = time.perf_counter_ns()
    for _ in range(iters):
        fn()
    return (time.perf_counter_ns() - t0) / iters


def _bundle_stack(rng, H, D, lifted=False):
    if lifted:
        w, k, a, v = (rng.uniform(0.01, 0.2, (H, D)) for _ in range(4))
        return w, k, a, v
    w = rng.uniform(0.5, 0.99, (H, D))
    k = rng.standard_normal((H, D))
    k /= np.linalg.norm(k, axis=-1, keepdims=True)
    return w, k, rng.uniform(0, 1, (H, D)), rng.standard_normal((H, D))


def run_bench(Ns=(8, 16, 32), Ms=(32, 64, 128), iters=200, heads=4, seq_len=16, batch=8, seed=0):
    rng = np.random.default_rng(seed)
    ops = []

    def record(op, size, ns, n_iter):
        ops.append({"op": op, "size": size, "ns_per_op": ns, "iterations": n_iter})

    for N in Ns:
        w, k, a, v = _bundle_stack(rng, heads, N)
        S = 0.1 * rng.standard_normal((heads, N, N))
        record("state_step", N, _time(lambda: state_step(S, w, k, a, v), iters), iters)
        dims = ModelDims(64, N * heads, heads)
        weights = FrozenWeights.generate(dims, seed)
        r = rng.standard_normal((heads, N))
        step = TeacherStep(5, np.eye(64)[5] * 10.0, 1)
        cfg = TestTimeConfig()
        record("tune_state_step", N,
               _time(lambda: tune_state_step(weights, S, r, step, cfg), iters), iters)
    base_N = Ns[0]
    weights = FrozenWeights.generate(ModelDims(64, base_N * heads, heads), seed)
    bundle = derive_sequence(weights, [7])
    for M in Ms:
        kl = KernelLift.build(KernelConfig(M=M, gamma=0.5), weights)
        record("lift", M, _time(lambda: lift(bundle, kl.supports, kl.gamma), iters), iters)
        S = 0.01 * rng.standard_normal((1, heads, M, M))[0]
        w, k, a, v = _bundle_stack(rng, heads, M, lifted=True)
        lb = LiftedBundle(w, k, a, v, w)
        record("lifted_state_step", M, _time(lambda: lifted_state_step(S, lb), iters), iters)
        dm = DecorrelationMatrix(M, lr=1e-4)
        X = rng.standard_normal((4 * heads * seq_len, M))
        record("update_R", M, _time(lambda: update_R(dm, X), iters), iters)

    backends = []
    for name in _backend.available():
        K = _backend.get(name)
        for D in sorted(set(Ns) | {Ms[0]}):
            w, k, a, v = (np.broadcast_to(x, (batch, seq_len) + x.shape).copy()
                          for x in _bundle_stack(rng, heads, D))
            r = rng.standard_normal((batch, seq_len, heads, D))
            S0 = np.zeros((batch, heads, D, D))
            n_it = max(3, iters // 20)
            fwd = _time(lambda: K.scan_forward(S0, w, k, a, v, r, 1e12), n_it, 1)
            _, _, _, trans = K.scan_forward(S0, w, k, a, v, r, 1e12, True)
            dY = rng.standard_normal(r.shape)
            bwd = _time(lambda: K.scan_backward_wka(w, k, a, r, dY), n_it, 1)
            bwd_dense = _time(lambda: K.scan_backward(trans, r, dY), n_it, 1)
            backends.append({"backend": name, "D": D, "batch": batch, "T": seq_len,
                             "heads": heads, "forward_ns": fwd, "backward_ns": bwd,
                             "backward_dense_ns": bwd_dense, "iterations": n_it})
    return {"fingerprint": fingerprint(), "ops": ops, "scan_backends": backends}


def format_report(report) -> str:
    lines = [f"backend in use: {report['fingerprint']['backend']}"]
    for op in report["ops"]:
        lines.append(f"{op['op']:>18s}  size={op['size']:<4d} {op['ns_per_op'] / 1e3:10.2f} us/op")
    for b in report["scan_backends"]:
        lines.append(f"scan[{b['backend']:>6s}] D={b['D']:<4d} fwd {b['forward_ns'] / 1e6:8.3f} ms"
                     f"  bwd {b['backward_ns'] / 1e6:8.3f} ms"
                     f"  bwd(dense) {b['backward_dense_ns'] / 1e6:8.3f} ms")
    return "\n".join(lines)
