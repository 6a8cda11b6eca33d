"""Gaussian-kernel lifting of the recurrence into an M-dimensional state.

Every per-step vector x in R^N becomes phi(x)_i = exp(-gamma * |x - u_i|^2)
against fixed support vectors u_1..u_M.  The lifted vectors are substituted
into the recurrence unchanged (no renormalisation), so the lifted
transition can be expansive; the state norm ceiling is what catches that.
Readouts are contracted exactly as in the base model and then projected
back to N dimensions by a fixed random matrix Q.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (DEFAULT_NORM_CEILING, FrozenWeights, ProjectionBundle, array_digest,
                   check_state, derive_sequence, readout, state_step)
from .errors import DigestError, InputError, ShapeError

SELECTIONS = ("random-gaussian", "data-centroids")
LLOYD_ITERATIONS = 25


@dataclass(frozen=True)
class KernelConfig:
    M: int = 32
    gamma: float | None = None  # None means 1 / (2N)
    support_selection: str = "random-gaussian"
    seed: int = 0

    def __post_init__(self):
        if self.M < 1:
            raise InputError("M must be >= 1")
        if self.gamma is not None and not self.gamma > 0:
            raise InputError(f"gamma must be > 0, got {self.gamma}")
        if self.support_selection not in SELECTIONS:
            raise InputError(f"support_selection must be one of {SELECTIONS}")

    def resolved_gamma(self, N: int) -> float:
        return 1.0 / (2 * N) if self.gamma is None else float(self.gamma)

    def to_dict(self):
        return {"M": self.M, "gamma": self.gamma,
                "support_selection": self.support_selection, "seed": self.seed}


# Larger-run setting: 512-dimensional lift with gamma = 0.1.
LARGE_PRESET = KernelConfig(M=512, gamma=0.1)


def gaussian_kernel(u, v, gamma: float) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ShapeError(f"kernel arguments differ in shape: {u.shape} vs {v.shape}")
    if not gamma > 0:
        raise InputError("gamma must be positive")
    d = u - v
    return float(np.exp(-gamma * np.dot(d, d)))


def _readonly(arr):
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


class SupportSet:
    """Immutable (M, N) array of support vectors."""

    def __init__(self, vectors):
        vectors = _readonly(vectors)
        if vectors.ndim != 2:
            raise ShapeError("support vectors must form an (M, N) array")
        if not np.all(np.isfinite(vectors)):
            raise InputError("support vectors must be finite")
        self.vectors = vectors
        self.digest = array_digest(vectors)

    @property
    def M(self):
        return self.vectors.shape[0]

    @property
    def N(self):
        return self.vectors.shape[1]


def _lloyd(sample, M, rng):
    n = sample.shape[0]
    centers = [int(rng.integers(n))]
    d2 = np.sum((sample - sample[centers[0]]) ** 2, axis=1)
    for _ in range(1, M):
        nxt = int(np.argmax(d2))
        centers.append(nxt)
        d2 = np.minimum(d2, np.sum((sample - sample[nxt]) ** 2, axis=1))
    C = sample[centers].copy()
    for _ in range(LLOYD_ITERATIONS):
        dist = np.sum((sample[:, None, :] - C[None]) ** 2, axis=2)
        assign = dist.argmin(axis=1)
        own = dist[np.arange(n), assign]
        for j in range(M):
            members = assign == j
            if members.any():
                C[j] = sample[members].mean(axis=0)
            else:
                far = int(np.argmax(own))
                C[j] = sample[far]
                own[far] = -1.0
    return C


def select_supports(method: str, M: int, N: int, seed: int = 0, data_sample=None) -> SupportSet:
    if method == "random-gaussian":
        rng = np.random.default_rng(seed)
        return SupportSet(rng.standard_normal((M, N)) / np.sqrt(N))
    if method == "data-centroids":
        if data_sample is None:
            raise InputError("data-centroids selection needs a sample of k vectors")
        sample = np.asarray(data_sample, dtype=np.float64).reshape(-1, N)
        if sample.shape[0] < M:
            raise InputError(f"data-centroids needs at least M={M} sample vectors, got {sample.shape[0]}")
        return SupportSet(_lloyd(sample, M, np.random.default_rng(seed)))
    raise InputError(f"unknown support selection {method!r}")


def make_projection(N: int, M: int, seed: int = 0) -> np.ndarray:
    """Fixed (N, M) down-projection with std 1/sqrt(M)."""
    rng = np.random.default_rng([seed, 7])
    return _readonly(rng.standard_normal((N, M)) / np.sqrt(M))


def lift_vectors(x, supports: SupportSet, gamma: float) -> np.ndarray:
    """phi applied along the last axis: (..., N) -> (..., M)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != supports.N:
        raise ShapeError(f"vectors of length {x.shape[-1]} vs supports of length {supports.N}")
    d = x[..., None, :] - supports.vectors
    return np.exp(-gamma * np.einsum("...mn,...mn->...m", d, d))


@dataclass(frozen=True)
class LiftedBundle:
    w: np.ndarray
    k: np.ndarray
    a: np.ndarray
    v: np.ndarray
    r: np.ndarray

    def as_tuple(self):
        return self.w, self.k, self.a, self.v, self.r


def lift(bundle: ProjectionBundle, supports: SupportSet, gamma: float) -> LiftedBundle:
    return LiftedBundle(*(lift_vectors(x, supports, gamma) for x in bundle.as_tuple()))


def lifted_state_step(S_prev, lb: LiftedBundle, ceiling=DEFAULT_NORM_CEILING):
    return state_step(S_prev, lb.w, lb.k, lb.a, lb.v, ceiling=ceiling)


def lifted_readout(S, phi_r, Q):
    Q = np.asarray(Q)
    y = readout(S, phi_r)
    if Q.shape[-1] != y.shape[-1]:
        raise ShapeError(f"Q shape {Q.shape} cannot project readout of length {y.shape[-1]}")
    return y @ Q.T


class KernelLift:
    """Supports, bandwidth and Q for one experiment; all fixed once built."""

    def __init__(self, cfg: KernelConfig, supports: SupportSet, Q):
        Q = _readonly(Q)
        if Q.shape != (supports.N, supports.M):
            raise ShapeError(f"Q shape {Q.shape} != {(supports.N, supports.M)}")
        if supports.M != cfg.M:
            raise ShapeError(f"{supports.M} supports for M={cfg.M}")
        self.cfg = cfg
        self.supports = supports
        self.Q = Q
        self.gamma = cfg.resolved_gamma(supports.N)
        self.q_digest = array_digest(Q)
        self.supports_digest = supports.digest

    @classmethod
    def build(cls, cfg: KernelConfig, weights: FrozenWeights, data_tokens=None):
        N = weights.dims.head_dim
        if not cfg.M > N:
            raise InputError(f"M={cfg.M} must exceed N={N}")
        sample = None
        if cfg.support_selection == "data-centroids":
            toks = np.arange(weights.dims.vocab_size) if data_tokens is None else np.asarray(data_tokens)
            sample = derive_sequence(weights, toks.reshape(-1)).k.reshape(-1, N)
        supports = select_supports(cfg.support_selection, cfg.M, N, cfg.seed, sample)
        return cls(cfg, supports, make_projection(N, cfg.M, cfg.seed))

    def verify(self):
        if array_digest(self.supports.vectors) != self.supports_digest:
            raise DigestError("support vectors changed")
        if array_digest(self.Q) != self.q_digest:
            raise DigestError("projection matrix Q changed")
        return True

    def table(self, base_table) -> np.ndarray:
        """Lift a (vocab, 5, H, N) bundle table to (vocab, 5, H, M)."""
        return lift_vectors(base_table, self.supports, self.gamma)

    def describe(self):
        return {**self.cfg.to_dict(), "gamma_resolved": self.gamma,
                "supports_digest": self.supports_digest, "q_digest": self.q_digest}
