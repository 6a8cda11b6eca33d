"""Reverse-mode derivatives of the recurrence with respect to the state only.

For ``S_t = S_{t-1} T_t + O_t`` and ``y_t = S_t r_t`` the adjoint runs
backward as ``A_{t-1} = A_t T_t^T + outer(dL/dy_{t-1}, r_{t-1})`` and the
gradient with respect to the initial state is ``A_1 T_1^T``.  The same code
path serves the base (N) and lifted (M) recurrences.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import _backend
from .core import StateTrace
from .errors import NumericalError, ShapeError


def backprop_state(trace: StateTrace, output_grads) -> np.ndarray:
    """dL/dS_0 for one sequence given dL/dy_t for every step, shaped (T, H, D)."""
    g = np.asarray(output_grads, dtype=np.float64)
    if g.shape != trace.receptances.shape:
        raise ShapeError(
            f"output gradients {g.shape} do not match trace receptances {trace.receptances.shape}")
    return _backend.kernels.scan_backward(
        trace.transitions[None], trace.receptances[None], g[None])[0]


def grad_wrt_current_state(S, r, dL_dy) -> np.ndarray:
    """Gradient of a loss on ``y = S r`` with respect to ``S``: outer(dL/dy, r)."""
    S = np.asarray(S)
    r = np.asarray(r, dtype=np.float64)
    g = np.asarray(dL_dy, dtype=np.float64)
    if r.shape != g.shape or S.shape != g.shape + (r.shape[-1],):
        raise ShapeError(f"shapes S={S.shape}, r={r.shape}, dL/dy={g.shape} do not agree")
    return g[..., :, None] * r[..., None, :]


class GradCheck(NamedTuple):
    max_rel_error: float
    worst_index: tuple
    analytic: np.ndarray
    numeric: np.ndarray


def numeric_gradient(loss_fn, point, step=1e-5):
    point = np.array(point, dtype=np.float64)
    grad = np.zeros_like(point)
    flat = point.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = loss_fn(point)
        flat[i] = orig - step
        fm = loss_fn(point)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            idx = np.unravel_index(i, point.shape)
            raise NumericalError(f"non-finite loss when perturbing entry {idx}", index=idx)
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def finite_diff_check(loss_fn, point, analytic, step=1e-5) -> GradCheck:
    """Compare an analytic gradient with central differences entrywise.

    Relative error per entry uses ``max(|analytic|, |numeric|, 1e-12)`` as
    the denominator.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = numeric_gradient(loss_fn, point, step)
    if numeric.shape != analytic.shape:
        raise ShapeError(f"analytic gradient {analytic.shape} vs point {numeric.shape}")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    rel = np.abs(analytic - numeric) / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape)
    return GradCheck(float(rel[worst]), tuple(int(i) for i in worst), analytic, numeric)
