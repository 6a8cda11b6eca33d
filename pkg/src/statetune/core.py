"""Matrix-valued state recurrence with a frozen synthetic projection stack.

Conventions used everywhere in the package: vectors are rows,
``outer(v, k)[i, j] = v[i] * k[j]`` and the readout contracts the state
over its second index, ``y[i] = sum_j S[i, j] * r[j]``.  One step is

    S_t = S_{t-1} @ (diag(w) - outer(k, a * k)) + outer(v, k)

Heads are independent; a model state is an (H, N, N) array.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _backend
from .errors import InputError, NumericalError, ShapeError, StateOverflowError

DEFAULT_NORM_CEILING = 1e4


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int = 64
    embed_dim: int = 32
    num_heads: int = 4

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "num_heads"):
            if int(getattr(self, name)) < 1:
                raise InputError(f"{name} must be >= 1")
        if self.embed_dim % self.num_heads:
            raise InputError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def to_dict(self):
        return {"vocab_size": self.vocab_size, "embed_dim": self.embed_dim,
                "num_heads": self.num_heads}


def array_digest(*arrays) -> str:
    h = hashlib.sha256()
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def _frozen(arr):
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


class FrozenWeights:
    """Seeded stand-in for a pre-trained projection stack.

    Embedding rows are standard normal; the five projections and the output
    head have std ``1/sqrt(embed_dim)``.  ``decay_bias`` is added before the
    logistic squash of ``w`` so the decay sits near one, giving the
    recurrence a memory that spans a typical task sequence.
    """

    NAMES = ("w", "k", "a", "v", "r")

    def __init__(self, dims: ModelDims, embedding, projections, head,
                 seed: int | None = None, decay_bias: float = 0.0):
        C = dims.embed_dim
        if np.shape(embedding) != (dims.vocab_size, C):
            raise ShapeError(f"embedding shape {np.shape(embedding)} != {(dims.vocab_size, C)}")
        if set(projections) != set(self.NAMES):
            raise ShapeError(f"projections must be exactly {self.NAMES}")
        for name, mat in projections.items():
            if np.shape(mat) != (C, C):
                raise ShapeError(f"projection {name} shape {np.shape(mat)} != {(C, C)}")
        if np.shape(head) != (C, dims.vocab_size):
            raise ShapeError(f"output head shape {np.shape(head)} != {(C, dims.vocab_size)}")
        self.dims = dims
        self.seed = seed
        self.decay_bias = float(decay_bias)
        self.embedding = _frozen(embedding)
        self.projections = {name: _frozen(projections[name]) for name in self.NAMES}
        self.head = _frozen(head)
        self.digest = self._compute_digest()

    @classmethod
    def generate(cls, dims: ModelDims, seed: int = 0, decay_bias: float = 4.0):
        rng = np.random.default_rng(seed)
        C = dims.embed_dim
        scale = 1.0 / np.sqrt(C)
        embedding = rng.standard_normal((dims.vocab_size, C))
        projections = {name: rng.standard_normal((C, C)) * scale for name in cls.NAMES}
        head = rng.standard_normal((C, dims.vocab_size)) * scale
        return cls(dims, embedding, projections, head, seed=seed, decay_bias=decay_bias)

    def _compute_digest(self):
        meta = np.frombuffer(
            repr((self.dims.to_dict(), self.decay_bias)).encode(), dtype=np.uint8)
        return array_digest(meta, self.embedding,
                            *(self.projections[n] for n in self.NAMES), self.head)

    def verify(self):
        """Recompute the content digest; raise if anything changed."""
        from .errors import DigestError
        if self._compute_digest() != self.digest:
            raise DigestError("frozen weights were modified")
        return True

    def describe(self):
        return {"dims": self.dims.to_dict(), "seed": self.seed,
                "decay_bias": self.decay_bias, "digest": self.digest}


@dataclass(frozen=True)
class ProjectionBundle:
    """Per-step vectors, each shaped (..., H, N) for the heads of one token."""

    w: np.ndarray
    k: np.ndarray
    a: np.ndarray
    v: np.ndarray
    r: np.ndarray

    def as_tuple(self):
        return self.w, self.k, self.a, self.v, self.r


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _normalize(x):
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    return x / np.maximum(norm, 1e-12)


def derive_sequence(weights: FrozenWeights, tokens) -> ProjectionBundle:
    """Projection bundles for a token sequence, each field shaped (T, H, N)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    V = weights.dims.vocab_size
    if tokens.size and (tokens.min() < 0 or tokens.max() >= V):
        bad = tokens[(tokens < 0) | (tokens >= V)][0]
        raise InputError(f"token {int(bad)} out of range for vocab_size {V}")
    H, N = weights.dims.num_heads, weights.dims.head_dim
    x = weights.embedding[tokens]
    shape = tokens.shape + (H, N)
    raw = {name: (x @ weights.projections[name].T).reshape(shape)
           for name in FrozenWeights.NAMES}
    return ProjectionBundle(
        w=_sigmoid(raw["w"] + weights.decay_bias),
        k=_normalize(raw["k"]),
        a=_sigmoid(raw["a"]),
        v=raw["v"],
        r=raw["r"],
    )


def derive_projections(weights: FrozenWeights, token: int) -> ProjectionBundle:
    """Bundle for a single token, fields shaped (H, N)."""
    if not 0 <= int(token) < weights.dims.vocab_size:
        raise InputError(f"token {token} out of range for vocab_size {weights.dims.vocab_size}")
    bundle = derive_sequence(weights, [int(token)])
    return ProjectionBundle(*(f[0] for f in bundle.as_tuple()))


def token_table(weights: FrozenWeights) -> np.ndarray:
    """All bundles stacked as (vocab, 5, H, N) in w, k, a, v, r order."""
    b = derive_sequence(weights, np.arange(weights.dims.vocab_size))
    return np.stack(b.as_tuple(), axis=1)


def check_state(S, ceiling=DEFAULT_NORM_CEILING, timestep=None):
    S = np.asarray(S)
    if not np.all(np.isfinite(S)):
        raise NumericalError(f"non-finite state entries at timestep {timestep}", index=timestep)
    norm = float(np.sqrt(np.sum(S * S)))
    if norm > ceiling:
        raise StateOverflowError(
            f"state norm {norm:.6g} exceeds ceiling {ceiling:.6g} at timestep {timestep}",
            timestep=timestep, norm=norm)
    return S


def transition_matrix(w, k, a):
    w, k, a = (np.asarray(x, dtype=np.float64) for x in (w, k, a))
    if not (w.shape == k.shape == a.shape):
        raise ShapeError(f"mismatched vector shapes {w.shape}, {k.shape}, {a.shape}")
    return _backend.kernels.transition(w, k, a)


def state_step(S_prev, w, k, a, v, ceiling=DEFAULT_NORM_CEILING):
    """One recurrence step; works for a single (D, D) state or stacked heads."""
    S_prev = np.asarray(S_prev, dtype=np.float64)
    w, k, a, v = (np.asarray(x, dtype=np.float64) for x in (w, k, a, v))
    D = w.shape[-1]
    if S_prev.shape[-2:] != (D, D) or S_prev.shape[:-2] != w.shape[:-1]:
        raise ShapeError(f"state shape {S_prev.shape} incompatible with vectors of shape {w.shape}")
    if not (w.shape == k.shape == a.shape == v.shape):
        raise ShapeError("w, k, a, v must share one shape")
    S = S_prev @ transition_matrix(w, k, a) + v[..., :, None] * k[..., None, :]
    return check_state(S, ceiling)


def readout(S, r):
    S = np.asarray(S, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if S.shape[-1] != r.shape[-1] or S.shape[:-2] != r.shape[:-1]:
        raise ShapeError(f"state shape {S.shape} incompatible with receptance shape {r.shape}")
    return (S @ r[..., None])[..., 0]


@dataclass
class StateTrace:
    """What the backward pass needs: transitions, receptances and post-step states."""

    transitions: np.ndarray  # (T, H, D, D)
    receptances: np.ndarray  # (T, H, D)
    states: np.ndarray       # (T, H, D, D)

    def __len__(self):
        return self.transitions.shape[0]


class RolloutResult(NamedTuple):
    logits: np.ndarray
    final_state: np.ndarray
    trace: StateTrace | None
    readouts: np.ndarray


def initial_state(dims: ModelDims, size: int | None = None):
    D = dims.head_dim if size is None else size
    return np.zeros((dims.num_heads, D, D))


def rollout(weights: FrozenWeights, S0, tokens, record_trace=False,
            ceiling=DEFAULT_NORM_CEILING) -> RolloutResult:
    """Run the recurrence over ``tokens`` and map readouts through the output head."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise InputError("rollout needs a nonempty 1-D token sequence")
    dims = weights.dims
    S0 = np.asarray(S0, dtype=np.float64)
    if S0.shape != (dims.num_heads, dims.head_dim, dims.head_dim):
        raise ShapeError(f"S0 shape {S0.shape} does not match model dims")
    b = derive_sequence(weights, tokens)
    Y, S, states, trans = _backend.kernels.scan_forward(
        S0[None], b.w[None], b.k[None], b.a[None], b.v[None], b.r[None],
        ceiling, record_trace)
    Y = Y[0]
    logits = Y.reshape(len(tokens), dims.embed_dim) @ weights.head
    trace = StateTrace(trans[0], b.r.copy(), states[0]) if record_trace else None
    return RolloutResult(logits, S[0], trace, Y)
