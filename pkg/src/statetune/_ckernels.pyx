# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled recurrence scan and adjoint; same contract as _pykernels.

The state update exploits the diagonal-plus-rank-one transition, so each
head costs O(D^2) per step.
"""

import numpy as np
from libc.math cimport sqrt, isfinite

from ._pykernels import transition  # noqa: F401  (shared, not a hot path)
from .errors import NumericalError, StateOverflowError

BACKEND = "cython"


def scan_forward(S0, W, K, A, V, R, double ceiling, bint record=False):
    cdef const double[:, :, :, :] w = np.ascontiguousarray(W, dtype=np.float64)
    cdef const double[:, :, :, :] k = np.ascontiguousarray(K, dtype=np.float64)
    cdef const double[:, :, :, :] a = np.ascontiguousarray(A, dtype=np.float64)
    cdef const double[:, :, :, :] v = np.ascontiguousarray(V, dtype=np.float64)
    cdef const double[:, :, :, :] r = np.ascontiguousarray(R, dtype=np.float64)
    cdef Py_ssize_t B = w.shape[0], T = w.shape[1], H = w.shape[2], D = w.shape[3]
    S_np = np.array(S0, dtype=np.float64, order="C", copy=True)
    cdef double[:, :, :, ::1] S = S_np
    Y_np = np.empty((B, T, H, D))
    cdef double[:, :, :, ::1] Y = Y_np
    sk_np = np.empty(D)
    cdef double[::1] sk = sk_np
    ak_np = np.empty(D)
    cdef double[::1] ak = ak_np
    cdef double[:, :, :, :, ::1] st
    states = trans = None
    if record:
        states = np.empty((B, T, H, D, D))
        st = states
    cdef Py_ssize_t b, t, h, i, j
    cdef double acc, nrm, worst, x
    for t in range(T):
        worst = 0.0
        for b in range(B):
            for h in range(H):
                for j in range(D):
                    ak[j] = a[b, t, h, j] * k[b, t, h, j]
                for i in range(D):
                    acc = 0.0
                    for j in range(D):
                        acc = acc + S[b, h, i, j] * k[b, t, h, j]
                    sk[i] = acc
                nrm = 0.0
                for i in range(D):
                    acc = 0.0
                    for j in range(D):
                        x = S[b, h, i, j] * w[b, t, h, j] - sk[i] * ak[j] \
                            + v[b, t, h, i] * k[b, t, h, j]
                        S[b, h, i, j] = x
                        nrm = nrm + x * x
                        acc = acc + x * r[b, t, h, j]
                    Y[b, t, h, i] = acc
                nrm = sqrt(nrm)
                if not isfinite(nrm):
                    raise NumericalError(f"non-finite state at timestep {t}", index=t)
                if nrm > worst:
                    worst = nrm
                if record:
                    for i in range(D):
                        for j in range(D):
                            st[b, t, h, i, j] = S[b, h, i, j]
        if worst > ceiling:
            raise StateOverflowError(
                f"state norm {worst:.6g} exceeds ceiling {ceiling:.6g} at timestep {t}",
                timestep=t, norm=float(worst))
    if record:
        trans = transition(np.asarray(w), np.asarray(k), np.asarray(a))
    return Y_np, S_np, states, trans


def scan_backward(trans, R, dY):
    """Generic adjoint from explicit transitions (O(D^3) per step)."""
    cdef const double[:, :, :, :, :] tr = np.ascontiguousarray(trans, dtype=np.float64)
    cdef const double[:, :, :, :] r = np.ascontiguousarray(R, dtype=np.float64)
    cdef const double[:, :, :, :] g = np.ascontiguousarray(dY, dtype=np.float64)
    cdef Py_ssize_t B = g.shape[0], T = g.shape[1], H = g.shape[2], D = g.shape[3]
    out_np = np.empty((B, H, D, D))
    cdef double[:, :, :, ::1] out = out_np
    adj_np = np.empty((D, D))
    cdef double[:, ::1] adj = adj_np
    nw_np = np.empty((D, D))
    cdef double[:, ::1] nw = nw_np
    cdef Py_ssize_t b, h, t, i, j, l
    cdef double acc
    for b in range(B):
        for h in range(H):
            for i in range(D):
                for j in range(D):
                    adj[i, j] = g[b, T - 1, h, i] * r[b, T - 1, h, j]
            for t in range(T - 1, -1, -1):
                for i in range(D):
                    for j in range(D):
                        acc = 0.0
                        for l in range(D):
                            acc = acc + adj[i, l] * tr[b, t, h, j, l]
                        nw[i, j] = acc
                for i in range(D):
                    for j in range(D):
                        if t > 0:
                            adj[i, j] = nw[i, j] + g[b, t - 1, h, i] * r[b, t - 1, h, j]
                        else:
                            adj[i, j] = nw[i, j]
            out[b, h, :, :] = adj
    return out_np


def scan_backward_wka(W, K, A, R, dY):
    """Adjoint using T_t^T = diag(w) - outer(a*k, k) (O(D^2) per step)."""
    cdef const double[:, :, :, :] w = np.ascontiguousarray(W, dtype=np.float64)
    cdef const double[:, :, :, :] k = np.ascontiguousarray(K, dtype=np.float64)
    cdef const double[:, :, :, :] a = np.ascontiguousarray(A, dtype=np.float64)
    cdef const double[:, :, :, :] r = np.ascontiguousarray(R, dtype=np.float64)
    cdef const double[:, :, :, :] g = np.ascontiguousarray(dY, dtype=np.float64)
    cdef Py_ssize_t B = g.shape[0], T = g.shape[1], H = g.shape[2], D = g.shape[3]
    out_np = np.empty((B, H, D, D))
    cdef double[:, :, :, ::1] adj = out_np
    tmp_np = np.empty(D)
    cdef double[::1] adk = tmp_np
    cdef Py_ssize_t b, h, t, i, j
    cdef double acc
    for b in range(B):
        for h in range(H):
            for i in range(D):
                for j in range(D):
                    adj[b, h, i, j] = g[b, T - 1, h, i] * r[b, T - 1, h, j]
            for t in range(T - 1, -1, -1):
                for i in range(D):
                    acc = 0.0
                    for j in range(D):
                        acc = acc + adj[b, h, i, j] * (a[b, t, h, j] * k[b, t, h, j])
                    adk[i] = acc
                for i in range(D):
                    for j in range(D):
                        adj[b, h, i, j] = adj[b, h, i, j] * w[b, t, h, j] - adk[i] * k[b, t, h, j]
                        if t > 0:
                            adj[b, h, i, j] = adj[b, h, i, j] + g[b, t - 1, h, i] * r[b, t - 1, h, j]
    return out_np
