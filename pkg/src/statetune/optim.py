"""Adam with bias correction, operating on one array in place."""

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError


@dataclass
class AdaptiveMomentState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param, **kw):
        return cls(np.zeros_like(param, dtype=np.float64),
                   np.zeros_like(param, dtype=np.float64), **kw)


def adaptive_moment_step(param, grad, state: AdaptiveMomentState, lr: float):
    """Return the updated parameter; ``state`` is advanced in place."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient passed to the optimizer")
    if grad.shape != state.m.shape:
        raise ValueError(f"gradient shape {grad.shape} != moment shape {state.m.shape}")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grad * grad)
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return param - lr * m_hat / (np.sqrt(v_hat) + state.eps)
