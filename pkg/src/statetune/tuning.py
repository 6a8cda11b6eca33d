"""Offline state tuning: standard, kernel-lifted and DBP-enhanced regimes.

Only the initial state S_0 (one D x D block per head) is trained; for the
DBP regime the decorrelation matrix R additionally follows its local rule.
Every regime shares one forward/backward path: a per-token vector table
(base, lifted, or lifted-then-decorrelated) feeds the compiled scan.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import _backend
from .core import DEFAULT_NORM_CEILING, FrozenWeights, token_table
from .decorrelation import DecorrelationMatrix, decorr_loss, update_R
from .errors import (ConfigurationError, DivergenceError, InputError, NumericalError,
                     ShapeError)
from .kernel import KernelConfig, KernelLift
from .optim import AdaptiveMomentState, adaptive_moment_step

log = logging.getLogger(__name__)

REGIMES = ("standard", "kernel", "dbp")
DEFAULT_LR = {"standard": 1e-3, "kernel": 5e-4, "dbp": 3e-4}


@dataclass(frozen=True)
class TuneConfig:
    regime: str = "standard"
    epochs: int = 5
    lr: float | None = None
    lr_R: float = 1e-4
    kappa: float = 0.5
    lam: float = 0.1
    batch_size: int = 1
    seed: int = 0
    patience: int = 3
    subsample_frac: float = 0.1
    ceiling: float = DEFAULT_NORM_CEILING

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigurationError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.lr is not None and self.lr < 0:
            raise ConfigurationError("learning rate must be non-negative")
        if self.lr_R < 0:
            raise ConfigurationError("lr_R must be non-negative")
        if not 0.0 <= self.kappa <= 1.0:
            raise ConfigurationError("kappa must lie in [0, 1]")
        if self.lam < 0:
            raise ConfigurationError("lambda must be non-negative")
        if self.batch_size < 1 and self.batch_size != -1:
            raise ConfigurationError("batch_size must be >= 1 (or -1 for full batch)")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")

    @property
    def state_lr(self) -> float:
        return DEFAULT_LR[self.regime] if self.lr is None else float(self.lr)

    def to_dict(self):
        d = asdict(self)
        d["lr"] = self.state_lr
        return d


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def task_loss(logits, targets):
    """Mean token cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        raise InputError("task_loss needs at least one target")
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} vs targets {targets.shape}")
    logp = _log_softmax(logits)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    n = targets.size
    grad = np.exp(logp)
    np.put_along_axis(grad, targets[..., None],
                      np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
    return float(-picked.sum() / n), grad / n


class StateModel:
    """Frozen weights plus the (optional) lift and decorrelation of one regime."""

    def __init__(self, weights: FrozenWeights, regime: str = "standard",
                 lift: KernelLift | None = None, decor: DecorrelationMatrix | None = None,
                 ceiling: float = DEFAULT_NORM_CEILING):
        if regime not in REGIMES:
            raise ConfigurationError(f"unknown regime {regime!r}")
        if regime != "standard" and lift is None:
            raise ConfigurationError(f"regime {regime!r} needs a kernel lift")
        if regime == "dbp" and decor is None:
            raise ConfigurationError("dbp regime needs a decorrelation matrix")
        self.weights = weights
        self.regime = regime
        self.lift = lift if regime != "standard" else None
        self.decor = decor if regime == "dbp" else None
        self.ceiling = ceiling
        base = token_table(weights)
        self._table = self.lift.table(base) if self.lift is not None else base

    @property
    def state_dim(self) -> int:
        return self._table.shape[-1]

    def initial_state(self):
        return np.zeros((self.weights.dims.num_heads, self.state_dim, self.state_dim))

    def table(self):
        """Per-token vectors (vocab, 5, H, D) as fed to the recurrence."""
        if self.decor is not None:
            return self._table @ self.decor.R.T
        return self._table

    def trainable_parameters(self, S0):
        params = {"S0": S0}
        if self.decor is not None:
            params["R"] = self.decor.R
        return params

    def _vectors(self, tokens, table=None):
        table = self.table() if table is None else table
        v = table[tokens]  # (B, T, 5, H, D)
        return tuple(np.ascontiguousarray(v[:, :, i]) for i in range(5))

    def _outputs(self, Y):
        B, T, H, _ = Y.shape
        if self.lift is not None:
            Y = Y @ self.lift.Q.T
        return Y.reshape(B, T, -1) @ self.weights.head

    def _output_grad(self, dlogits):
        B, T, _ = dlogits.shape
        H = self.weights.dims.num_heads
        g = (dlogits @ self.weights.head.T).reshape(B, T, H, -1)
        if self.lift is not None:
            g = g @ self.lift.Q
        return g

    def forward(self, S0, tokens, record=False, table=None):
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        vecs = self._vectors(tokens, table)
        B = tokens.shape[0]
        S0b = np.broadcast_to(S0, (B,) + S0.shape)
        Y, S, _, trans = _backend.kernels.scan_forward(S0b, *vecs, self.ceiling, record)
        return self._outputs(Y), vecs, trans, S

    def logits(self, S0, tokens):
        return self.forward(S0, tokens)[0][0]

    def loss_and_grad(self, S0, inputs, targets, mask):
        """Batch loss (mean over sequences of mean target CE) and dL/dS0."""
        table = self.table()
        logits, vecs, _, _ = self.forward(S0, inputs, table=table)
        B = inputs.shape[0]
        logp = _log_softmax(logits)
        counts = mask.sum(axis=1)
        picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
        per_seq = -(picked * mask).sum(axis=1) / counts
        loss = float(per_seq.mean())
        d = np.exp(logp)
        b_idx, t_idx = np.nonzero(mask)
        d[b_idx, t_idx, targets[b_idx, t_idx]] -= 1.0
        d *= (mask / (counts[:, None] * B))[..., None]
        dY = self._output_grad(d)
        W, K, A, _, R = vecs
        grad = _backend.kernels.scan_backward_wka(W, K, A, R, dY).sum(axis=0)
        return loss, grad, vecs, logits

    def predict_fn(self, S0):
        return lambda tokens: self.logits(S0, tokens)


def _batch_arrays(examples):
    lengths = {len(ex.tokens) for ex in examples}
    if len(lengths) != 1:
        raise InputError("a batch must hold sequences of one length")
    toks = np.array([ex.tokens for ex in examples], dtype=np.int64)
    inputs = toks[:, :-1]
    targets = toks[:, 1:]
    mask = np.zeros(targets.shape)
    for i, ex in enumerate(examples):
        mask[i, ex.target_start - 1:ex.target_start - 1 + ex.target_len] = 1.0
    return inputs, targets, mask


def _batches(examples, size, order):
    by_len = {}
    for i in order:
        by_len.setdefault(len(examples[i].tokens), []).append(i)
    if size == -1:
        for idxs in by_len.values():
            yield [examples[i] for i in idxs]
        return
    # preserve the shuffled order while keeping each batch length-homogeneous
    pending = {}
    for i in order:
        L = len(examples[i].tokens)
        pending.setdefault(L, []).append(i)
        if len(pending[L]) == size:
            yield [examples[j] for j in pending.pop(L)]
    for idxs in pending.values():
        yield [examples[j] for j in idxs]


def evaluate_batched(model: StateModel, S0, examples, chunk=256) -> dict:
    """Same metrics as tasks.evaluate, computed with batched rollouts."""
    correct = total = 0
    loss = 0.0
    groups = {}
    for ex in examples:
        groups.setdefault(len(ex.tokens), []).append(ex)
    for group in groups.values():
        for i in range(0, len(group), chunk):
            inputs, targets, mask = _batch_arrays(group[i:i + chunk])
            logits = model.forward(S0, inputs)[0]
            logp = _log_softmax(logits)
            picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
            loss -= float((picked * mask).sum())
            correct += int(((logits.argmax(axis=-1) == targets) * mask).sum())
            total += int(mask.sum())
    if total == 0:
        raise InputError("cannot evaluate an empty split")
    return {"accuracy": correct / total, "loss": loss / total, "targets": total,
            "sequences": len(examples)}


@dataclass
class TuneResult:
    S0: np.ndarray
    model: StateModel
    report: list
    best_epoch: int
    R: np.ndarray | None = None
    config: dict = field(default_factory=dict)
    trajectory: list = field(default_factory=list)


def build_model(weights, cfg: TuneConfig, kernel_cfg: KernelConfig | None = None,
                lift: KernelLift | None = None, data_tokens=None) -> StateModel:
    if cfg.regime != "standard" and lift is None:
        lift = KernelLift.build(kernel_cfg or KernelConfig(), weights, data_tokens)
    decor = None
    if cfg.regime == "dbp":
        decor = DecorrelationMatrix(lift.cfg.M, lr=cfg.lr_R, kappa=cfg.kappa,
                                    subsample_frac=cfg.subsample_frac, seed=cfg.seed)
    return StateModel(weights, cfg.regime, lift, decor, cfg.ceiling)


def _digests(model: StateModel):
    out = {"weights": model.weights.digest}
    if model.lift is not None:
        out["supports"] = model.lift.supports_digest
        out["q"] = model.lift.q_digest
    return out


def _verify_fixed(model: StateModel):
    model.weights.verify()
    if model.lift is not None:
        model.lift.verify()


def tune(weights: FrozenWeights, dataset, cfg: TuneConfig, kernel_cfg: KernelConfig | None = None,
         lift: KernelLift | None = None, on_epoch=None, record_trajectory=False) -> TuneResult:
    """Train S_0 (and R for dbp) on ``dataset['train']``, early-stopping on ``dataset['val']``."""
    train = list(dataset["train"])
    val = list(dataset["val"])
    if not train or not val:
        raise InputError("dataset needs nonempty train and val splits")
    data_tokens = np.concatenate([np.asarray(ex.tokens) for ex in train])
    model = build_model(weights, cfg, kernel_cfg, lift, data_tokens)
    S0 = model.initial_state()
    opt = AdaptiveMomentState.zeros_like(S0)
    lr = cfg.state_lr
    best = (-1.0, np.inf)
    best_S0, best_R, best_epoch = S0.copy(), None, 0
    since_best = 0
    report, trajectory = [], []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        _verify_fixed(model)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
        task_losses, decor_losses = [], []
        for batch in _batches(train, cfg.batch_size, order):
            inputs, targets, mask = _batch_arrays(batch)
            last_good = S0.copy()
            try:
                loss, grad, vecs, _ = model.loss_and_grad(S0, inputs, targets, mask)
            except NumericalError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}", checkpoint=last_good) from exc
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise DivergenceError(f"epoch {epoch}: non-finite loss", checkpoint=last_good)
            S0 = adaptive_moment_step(S0, grad, opt, lr)
            task_losses.append(loss)
            if model.decor is not None:
                update_vecs = np.stack(vecs[:4], axis=0).reshape(-1, model.state_dim)
                decor_losses.append(float(np.mean(decorr_loss(update_vecs, cfg.kappa))))
                update_R(model.decor, update_vecs)
                if not np.all(np.isfinite(model.decor.R)):
                    raise DivergenceError(f"epoch {epoch}: decorrelation matrix diverged",
                                          checkpoint=last_good)
            if record_trajectory:
                trajectory.append(loss)
        _verify_fixed(model)
        metrics = evaluate_batched(model, S0, val)
        task = float(np.mean(task_losses))
        dec = float(np.mean(decor_losses)) if decor_losses else 0.0
        rec = {"epoch": epoch, "regime": cfg.regime, "task_loss": task, "decorr_loss": dec,
               "total_loss": task + cfg.lam * dec, "val_accuracy": metrics["accuracy"],
               "val_loss": metrics["loss"], "seconds": time.perf_counter() - t0,
               "digests": _digests(model)}
        if model.decor is not None:
            rec["R_condition"] = model.decor.check()
            rec["R_alarm"] = model.decor.alarm
        report.append(rec)
        log.info("epoch %d task %.4f val acc %.3f", epoch, task, metrics["accuracy"])
        if on_epoch is not None:
            on_epoch(rec)
        key = (metrics["accuracy"], -metrics["loss"])
        if key > (best[0], -best[1]):
            best = (metrics["accuracy"], metrics["loss"])
            best_S0 = S0.copy()
            best_R = None if model.decor is None else model.decor.R.copy()
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    if model.decor is not None and best_R is not None:
        model.decor.R = best_R
    return TuneResult(best_S0, model, report, best_epoch,
                      None if best_R is None else best_R, cfg.to_dict(), trajectory)


def tune_standard(weights, dataset, cfg: TuneConfig | None = None, **kw) -> TuneResult:
    cfg = replace(cfg or TuneConfig(), regime="standard")
    return tune(weights, dataset, cfg, **kw)


def tune_kernel(weights, dataset, cfg: TuneConfig | None = None,
                kernel_cfg: KernelConfig | None = None, **kw) -> TuneResult:
    cfg = replace(cfg or TuneConfig(regime="kernel"), regime="kernel")
    return tune(weights, dataset, cfg, kernel_cfg=kernel_cfg, **kw)


def tune_dbp(weights, dataset, cfg: TuneConfig | None = None,
             kernel_cfg: KernelConfig | None = None, **kw) -> TuneResult:
    cfg = replace(cfg or TuneConfig(regime="dbp"), regime="dbp")
    return tune(weights, dataset, cfg, kernel_cfg=kernel_cfg, **kw)


def write_report(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
