"""Pure-numpy implementation of the recurrence scan and its adjoint.

Shapes: ``S0`` is (B, H, D, D); the per-step vectors are (B, T, H, D).
Everything is float64 and batched over (B, H) with one python-level loop
over time.  Transitions are diag(w) - outer(k, a*k), so one step costs
O(D^2): S diag(w) - outer(S k, a*k) + outer(v, k).
"""

import numpy as np

from .errors import NumericalError, StateOverflowError

BACKEND = "python"


def transition(w, k, a):
    """diag(w) - outer(k, a*k), batched over leading axes."""
    trans = -(k[..., :, None] * (a * k)[..., None, :])
    d = w.shape[-1]
    idx = np.arange(d)
    trans[..., idx, idx] += w
    return trans


def _check(S, t, ceiling):
    norms = np.sqrt(np.einsum("...ij,...ij->...", S, S))
    worst = norms.max()
    if not np.isfinite(worst):
        raise NumericalError(f"non-finite state at timestep {t}", index=t)
    if worst > ceiling:
        raise StateOverflowError(
            f"state norm {worst:.6g} exceeds ceiling {ceiling:.6g} at timestep {t}",
            timestep=t, norm=float(worst))


def scan_forward(S0, W, K, A, V, R, ceiling, record=False):
    B, T, H, D = W.shape
    S = np.array(S0, dtype=np.float64, copy=True)
    Y = np.empty((B, T, H, D))
    states = np.empty((B, T, H, D, D)) if record else None
    trans = np.empty((B, T, H, D, D)) if record else None
    for t in range(T):
        w, k, a, v = W[:, t], K[:, t], A[:, t], V[:, t]
        Sk = np.einsum("bhij,bhj->bhi", S, k)
        S = S * w[:, :, None, :] - Sk[..., :, None] * (a * k)[..., None, :] \
            + v[..., :, None] * k[..., None, :]
        _check(S, t, ceiling)
        Y[:, t] = np.einsum("bhij,bhj->bhi", S, R[:, t])
        if record:
            states[:, t] = S
            trans[:, t] = transition(w, k, a)
    return Y, S, states, trans


def scan_backward(trans, R, dY):
    """dL/dS0 from explicit transitions: A <- A T^T + outer(dY, r), backward in t."""
    B, T, H, D = dY.shape
    adj = dY[:, T - 1, :, :, None] * R[:, T - 1, :, None, :]
    for t in range(T - 1, 0, -1):
        adj = adj @ np.swapaxes(trans[:, t], -1, -2)
        adj += dY[:, t - 1, :, :, None] * R[:, t - 1, :, None, :]
    return adj @ np.swapaxes(trans[:, 0], -1, -2)


def scan_backward_wka(W, K, A, R, dY):
    """Same as scan_backward with T_t^T applied as diag(w) - outer(a*k, k)."""
    B, T, H, D = dY.shape
    adj = dY[:, T - 1, :, :, None] * R[:, T - 1, :, None, :]
    for t in range(T - 1, -1, -1):
        w, k, a = W[:, t], K[:, t], A[:, t]
        adk = np.einsum("bhij,bhj->bhi", adj, a * k)
        adj = adj * w[:, :, None, :] - adk[..., :, None] * k[..., None, :]
        if t > 0:
            adj += dY[:, t - 1, :, :, None] * R[:, t - 1, :, None, :]
    return adj
