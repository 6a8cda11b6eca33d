import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from statetune.core import (FrozenWeights, ModelDims, derive_projections, derive_sequence,
                            initial_state, readout, rollout, state_step, transition_matrix)
from statetune.errors import DigestError, InputError, ShapeError, StateOverflowError

from conftest import random_bundle


def step_oracle(S, w, k, a, v):
    N = len(w)
    T = [[(w[l] if l == j else 0.0) - k[l] * a[j] * k[j] for j in range(N)] for l in range(N)]
    out = np.zeros((N, N))
    for i in range(N):
        for j in range(N):
            acc = 0.0
            for l in range(N):
                acc += S[i, l] * T[l][j]
            out[i, j] = acc + v[i] * k[j]
    return out


def readout_oracle(S, r):
    return np.array([sum(S[i, j] * r[j] for j in range(len(r))) for i in range(S.shape[0])])


def power_iteration_radius(T, iters=400, seed=0):
    # T is similar to a symmetric matrix (scale by sqrt(a)), so its spectrum
    # is real and the iteration settles on the dominant magnitude
    x = np.random.default_rng(seed).standard_normal(T.shape[0])
    est = 0.0
    for _ in range(iters):
        y = T @ x
        n = np.linalg.norm(y)
        if n == 0:
            return 0.0
        est = n / np.linalg.norm(x)
        x = y / n
    return est


def test_model_dims_invariants():
    assert ModelDims(64, 32, 4).head_dim == 8
    with pytest.raises(InputError):
        ModelDims(64, 30, 4)
    with pytest.raises(InputError):
        ModelDims(0, 32, 4)


def test_projection_ranges_and_norms():
    for seed in range(5):
        w8 = FrozenWeights.generate(ModelDims(64, 32, 4), seed)
        for tok in (0, 7, 63):
            b = derive_projections(w8, tok)
            assert np.all((b.w > 0) & (b.w < 1))
            assert np.all((b.a >= 0) & (b.a <= 1))
            assert np.allclose(np.linalg.norm(b.k, axis=-1), 1.0, atol=1e-6)


def test_projection_matches_dense_rederivation():
    weights = FrozenWeights.generate(ModelDims(64, 32, 4), seed=42)
    b = derive_projections(weights, 7)
    x = weights.embedding[7]
    C, H, N = 32, 4, 8

    def matvec(M):
        return np.array([sum(M[i, j] * x[j] for j in range(C)) for i in range(C)]).reshape(H, N)

    def sig(z):
        return 1.0 / (1.0 + np.exp(-z))

    raw = {n: matvec(weights.projections[n]) for n in "wkavr"}
    np.testing.assert_allclose(b.w, sig(raw["w"] + weights.decay_bias), rtol=0, atol=1e-12)
    np.testing.assert_allclose(b.a, sig(raw["a"]), rtol=0, atol=1e-12)
    np.testing.assert_allclose(
        b.k, raw["k"] / np.linalg.norm(raw["k"], axis=-1, keepdims=True), atol=1e-12)
    np.testing.assert_allclose(b.v, raw["v"], atol=1e-12)
    np.testing.assert_allclose(b.r, raw["r"], atol=1e-12)


def test_token_out_of_range(weights):
    with pytest.raises(InputError):
        derive_projections(weights, 64)
    with pytest.raises(InputError):
        derive_sequence(weights, [1, -1])


def test_frozen_weights_are_immutable(weights):
    with pytest.raises(ValueError):
        weights.embedding[0, 0] = 1.0
    assert weights.verify()
    object.__setattr__(weights, "head", weights.head * 2)
    with pytest.raises(DigestError):
        weights.verify()


def test_weights_deterministic():
    d = ModelDims(64, 32, 4)
    assert FrozenWeights.generate(d, 3).digest == FrozenWeights.generate(d, 3).digest
    assert FrozenWeights.generate(d, 3).digest != FrozenWeights.generate(d, 4).digest


def test_state_step_from_zero_is_outer_product(rng):
    w, k, a, v, _ = random_bundle(rng, 5)
    S = state_step(np.zeros((5, 5)), w, k, a, v)
    assert np.array_equal(S, np.outer(v, k))


def test_state_step_pure_decay(rng):
    _, k, _, v, _ = random_bundle(rng, 4)
    S_prev = rng.standard_normal((4, 4))
    S = state_step(S_prev, np.full(4, 0.5), k, np.zeros(4), v)
    np.testing.assert_allclose(S, 0.5 * S_prev + np.outer(v, k), atol=1e-15)


def test_state_step_hand_example(rng):
    w = np.array([0.9, 0.5, 0.2])
    k = np.array([1.0, 2.0, 2.0]) / 3.0
    a = np.array([0.1, 0.6, 1.0])
    v = np.array([1.0, -2.0, 0.5])
    S_prev = rng.standard_normal((3, 3))
    np.testing.assert_allclose(state_step(S_prev, w, k, a, v),
                               step_oracle(S_prev, w, k, a, v), rtol=0, atol=1e-12)


def test_state_step_shape_and_overflow_errors(rng):
    w, k, a, v, _ = random_bundle(rng, 4)
    with pytest.raises(ShapeError):
        state_step(np.zeros((3, 3)), w, k, a, v)
    with pytest.raises(ShapeError):
        state_step(np.zeros((4, 4)), w, k[:3], a, v)
    with pytest.raises(StateOverflowError):
        state_step(np.full((4, 4), 1e4), w, k, a, v)


def test_readout_examples(rng):
    r = rng.standard_normal(6)
    np.testing.assert_array_equal(readout(np.eye(6), r), r)
    np.testing.assert_array_equal(readout(np.zeros((6, 6)), r), np.zeros(6))
    S = rng.standard_normal((4, 4))
    r4 = rng.standard_normal(4)
    np.testing.assert_allclose(readout(S, r4), readout_oracle(S, r4), atol=1e-12)
    with pytest.raises(ShapeError):
        readout(S, r)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 16), st.integers(0, 2**31))
def test_transition_spectral_radius_at_most_one(N, seed):
    rng = np.random.default_rng(seed)
    w, k, a, _, _ = random_bundle(rng, N)
    T = transition_matrix(w, k, a)
    assert power_iteration_radius(T) <= 1 + 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_state_step_is_affine(N, alpha, beta, seed):
    rng = np.random.default_rng(seed)
    w, k, a, v, _ = random_bundle(rng, N)
    S1, S2 = rng.standard_normal((2, N, N))
    lhs = state_step(alpha * S1 + beta * S2, w, k, a, v)
    rhs = (alpha * state_step(S1, w, k, a, v) + beta * state_step(S2, w, k, a, v)
           - (alpha + beta - 1) * np.outer(v, k))
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.floats(-3, 3), st.integers(0, 2**31))
def test_readout_is_bilinear(N, c, seed):
    rng = np.random.default_rng(seed)
    S1, S2 = rng.standard_normal((2, N, N))
    r1, r2 = rng.standard_normal((2, N))
    np.testing.assert_allclose(readout(S1 + c * S2, r1),
                               readout(S1, r1) + c * readout(S2, r1), atol=1e-10)
    np.testing.assert_allclose(readout(S1, r1 + c * r2),
                               readout(S1, r1) + c * readout(S1, r2), atol=1e-10)


def test_rollout_single_token_from_zero(weights):
    res = rollout(weights, initial_state(weights.dims), [9])
    b = derive_projections(weights, 9)
    S = b.v[..., :, None] * b.k[..., None, :]
    y = (S @ b.r[..., None])[..., 0].reshape(-1)
    np.testing.assert_allclose(res.logits[0], y @ weights.head, atol=1e-12)


def test_rollout_final_state_is_fold(weights, rng):
    toks = rng.integers(64, size=12)
    S0 = 0.1 * rng.standard_normal((4, 8, 8))
    res = rollout(weights, S0, toks)
    S = S0
    for t in toks:
        b = derive_projections(weights, t)
        S = state_step(S, b.w, b.k, b.a, b.v)
    np.testing.assert_allclose(res.final_state, S, atol=1e-12)


def test_rollout_trace_does_not_change_logits(weights, rng):
    toks = rng.integers(64, size=16)
    S0 = 0.1 * rng.standard_normal((4, 8, 8))
    plain = rollout(weights, S0, toks)
    traced = rollout(weights, S0, toks, record_trace=True)
    assert np.array_equal(plain.logits, traced.logits)
    assert len(traced.trace) == 16
    again = rollout(weights, S0, toks, record_trace=True)
    assert np.array_equal(again.trace.states, traced.trace.states)
    assert np.array_equal(again.trace.transitions, traced.trace.transitions)


def test_rollout_overflow_names_timestep(weights):
    S0 = np.zeros((4, 8, 8))
    with pytest.raises(StateOverflowError) as exc:
        rollout(weights, S0, [3, 4, 5, 6], ceiling=1e-9)
    assert exc.value.timestep == 0
    assert "timestep 0" in str(exc.value)


def test_rollout_rejects_bad_input(weights):
    with pytest.raises(InputError):
        rollout(weights, np.zeros((4, 8, 8)), [])
    with pytest.raises(ShapeError):
        rollout(weights, np.zeros((4, 7, 7)), [1])
