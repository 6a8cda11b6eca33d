"""Decorrelated backpropagation for lifted bundles.

A matrix R (identity at start) maps each lifted vector x -> R x.  R follows
the local rule

    R <- R - eps * < (1 - kappa) C + kappa V > R

with C = x x^T - diag(x^2) and V = diag(x^2 - 1), averaged over a seeded
subsample of the batch.  The accompanying loss is only reported; it never
feeds a gradient into the tuned state.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericalError, ShapeError
from .kernel import LiftedBundle

CONDITION_ALARM = 1e6


class DecorrelationMatrix:
    def __init__(self, M: int, lr: float = 1e-4, kappa: float = 0.5,
                 subsample_frac: float = 0.1, seed: int = 0, R=None):
        if not 0.0 <= kappa <= 1.0:
            raise InputError(f"kappa must lie in [0, 1], got {kappa}")
        if not 0.0 < subsample_frac <= 1.0:
            raise InputError(f"subsample_frac must lie in (0, 1], got {subsample_frac}")
        if lr < 0:
            raise InputError("lr must be non-negative")
        self.R = np.eye(M) if R is None else np.array(R, dtype=np.float64)
        if self.R.shape != (M, M):
            raise ShapeError(f"R shape {self.R.shape} != {(M, M)}")
        self.lr = float(lr)
        self.kappa = float(kappa)
        self.subsample_frac = float(subsample_frac)
        self.seed = int(seed)
        self.step = 0
        self.alarm = False

    @property
    def M(self):
        return self.R.shape[0]

    def condition_number(self) -> float:
        return float(np.linalg.cond(self.R))

    def check(self):
        if not np.all(np.isfinite(self.R)):
            raise NumericalError("decorrelation matrix has non-finite entries")
        cond = self.condition_number()
        if cond > CONDITION_ALARM:
            self.alarm = True
            warnings.warn(f"decorrelation matrix condition number {cond:.3g} exceeds "
                          f"{CONDITION_ALARM:.0g}", RuntimeWarning, stacklevel=2)
        return cond

    def settings(self):
        return {"lr_R": self.lr, "kappa": self.kappa, "subsample_frac": self.subsample_frac,
                "subsample_seed": self.seed}


def decorrelate(R, lb: LiftedBundle) -> LiftedBundle:
    R = R.R if isinstance(R, DecorrelationMatrix) else np.asarray(R)
    for x in lb.as_tuple():
        if x.shape[-1] != R.shape[1]:
            raise ShapeError(f"R shape {R.shape} cannot act on vectors of length {x.shape[-1]}")
    return LiftedBundle(*(x @ R.T for x in lb.as_tuple()))


def decorr_loss(x, kappa: float):
    """Loss per vector along the last axis (a float for a single vector)."""
    x = np.asarray(x, dtype=np.float64)
    sq = x * x
    s = sq.sum(axis=-1)
    cross = s * s - (sq * sq).sum(axis=-1)  # sum over i != j of (x_i x_j)^2
    var = ((sq - 1.0) ** 2).sum(axis=-1)
    out = (1.0 - kappa) * 0.5 * cross + kappa * 0.25 * var
    return float(out) if out.ndim == 0 else out


def decorr_loss_grad(x, kappa: float):
    """Gradient of decorr_loss: 2 (1 - kappa) C x + kappa V x."""
    x = np.asarray(x, dtype=np.float64)
    sq = x * x
    Cx = x * (sq.sum(axis=-1, keepdims=True) - sq)
    Vx = (sq - 1.0) * x
    return 2.0 * (1.0 - kappa) * Cx + kappa * Vx


@dataclass
class DecorrStats:
    corr: np.ndarray
    var: np.ndarray
    count: int


def decorr_stats(x) -> DecorrStats:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if not np.all(np.isfinite(x)):
        raise NumericalError("decorrelation statistics need finite inputs")
    n = x.shape[0]
    sq_mean = (x * x).mean(axis=0)
    corr = x.T @ x / n
    np.fill_diagonal(corr, 0.0)
    return DecorrStats(corr, np.diag(sq_mean - 1.0), n)


def subsample_indices(n: int, frac: float, seed: int, step: int):
    size = max(1, math.ceil(frac * n - 1e-9))
    rng = np.random.default_rng([seed, step])
    return np.sort(rng.choice(n, size=min(size, n), replace=False))


def update_R(dm: DecorrelationMatrix, batch) -> DecorrelationMatrix:
    """Apply one subsampled update in place and return ``dm``."""
    batch = np.asarray(batch, dtype=np.float64).reshape(-1, dm.M)
    if batch.shape[0] == 0:
        raise InputError("update_R needs a nonempty batch")
    idx = subsample_indices(batch.shape[0], dm.subsample_frac, dm.seed, dm.step)
    stats = decorr_stats(batch[idx])
    avg = (1.0 - dm.kappa) * stats.corr + dm.kappa * stats.var
    dm.R = dm.R - dm.lr * (avg @ dm.R)
    dm.step += 1
    return dm
