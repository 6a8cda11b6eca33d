"""Teacher-guided refinement of the running state during generation.

Per generated token the current state S_t is nudged by a few gradient
ascent steps before the next token is chosen:

* ``distill`` (default) ascends sum_j q_j log P_small(j) with q the
  teacher's softmax; for a one-hot teacher this is log P_small(teacher
  token), and for a uniform teacher it pulls the student toward uniform;
* ``reinforce`` samples a candidate, scores it by the teacher's
  log-probability (plus a terminal bonus on an exact-match completion),
  subtracts a running-mean baseline and ascends reward * log P_small(x).

Tokens already emitted are never revised; only S_t moves.
"""

from __future__ import annotations

import json
import logging
import math
import socket
import time
import urllib.error
import urllib.request
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import FrozenWeights, state_step
from .errors import (ConfigurationError, InputError, TeacherProtocolError,
                     TeacherTransportError)
from .tuning import StateModel

log = logging.getLogger(__name__)

MODES = ("distill", "reinforce")
ONE_HOT_MARGIN = 1e4  # exp(-1e4) underflows to 0, so the softmax is exactly one-hot


@dataclass(frozen=True)
class TeacherStep:
    token: int
    logits: np.ndarray
    index: int
    final: bool = False

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        if logits.ndim != 1 or not np.all(np.isfinite(logits)):
            raise InputError("teacher logits must be a finite vector")
        if not 0 <= self.token < logits.size:
            raise InputError(f"teacher token {self.token} outside vocab of size {logits.size}")
        object.__setattr__(self, "logits", logits)


@dataclass(frozen=True)
class TestTimeConfig:
    iterations: int = 5
    eta: float = 0.01
    tau: float = 1.0
    greedy: bool = False
    terminal_bonus: float = 1.0
    max_len: int = 32
    seed: int = 0
    mode: str = "distill"
    lifted: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError(f"iterations must be >= 1, got {self.iterations}")
        if not self.eta >= 0:
            raise ConfigurationError("eta must be non-negative")
        if not self.tau > 0:
            raise ConfigurationError("tau must be positive")
        if self.max_len < 0:
            raise ConfigurationError("max_len must be >= 0")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")

    def to_dict(self):
        return asdict(self)


def _log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def reward(teacher_logits, aligned_token: int, terminal: bool = False,
           bonus: float = 1.0) -> float:
    """Teacher log-probability of ``aligned_token``, plus ``bonus`` if terminal."""
    logp = _log_softmax(teacher_logits)
    if not 0 <= aligned_token < logp.size:
        raise InputError(f"token {aligned_token} outside vocab of size {logp.size}")
    return float(logp[aligned_token]) + (bonus if terminal else 0.0)


class ScriptedTeacher:
    """Deterministic teacher replaying a known continuation.

    The truth token gets logit ``confidence`` and all others 0; an infinite
    confidence becomes a one-hot distribution.
    """

    def __init__(self, prompt, continuation, vocab_size: int, confidence: float = math.inf):
        self.prompt = [int(t) for t in prompt]
        self.continuation = [int(t) for t in continuation]
        self.vocab_size = int(vocab_size)
        if confidence < 0:
            raise ConfigurationError("confidence must be non-negative")
        self.confidence = float(confidence)
        for t in self.continuation:
            if not 0 <= t < vocab_size:
                raise InputError(f"continuation token {t} outside vocab")

    def logits_for(self, token: int) -> np.ndarray:
        logits = np.zeros(self.vocab_size)
        logits[token] = ONE_HOT_MARGIN if math.isinf(self.confidence) else self.confidence
        return logits

    def step(self, context):
        context = [int(t) for t in context]
        if context[:len(self.prompt)] != self.prompt:
            raise InputError("context does not extend the scripted prompt")
        idx = len(context) - len(self.prompt)
        if idx >= len(self.continuation):
            return None
        token = self.continuation[idx]
        return TeacherStep(token, self.logits_for(token), idx + 1,
                           final=idx == len(self.continuation) - 1)

    def describe(self):
        return {"kind": "scripted", "confidence": self.confidence,
                "continuation": self.continuation}


def scripted_teacher(example, vocab_size: int, confidence: float = math.inf) -> ScriptedTeacher:
    """Teacher for a task example: prompt is the context, continuation its target."""
    return ScriptedTeacher(example.tokens[:example.target_start], example.target,
                           vocab_size, confidence)


class RemoteTeacher:
    """HTTP teacher speaking one JSON object per line in each direction.

    Request body: ``{"context": [...], "want_logits": true}``.
    Response body: ``{"token": id, "logits": [...]}``, or ``{"done": true}``
    (or a null token) at the end of the reasoning sequence.
    """

    def __init__(self, url: str, vocab_size: int, timeout_ms: float = 5000, retries: int = 3,
                 backoff_ms: float = 250, sleep=time.sleep):
        if retries < 1:
            raise ConfigurationError("retries must be >= 1")
        self.url = url
        self.vocab_size = int(vocab_size)
        self.timeout = timeout_ms / 1000.0
        self.retries = int(retries)
        self.backoff = backoff_ms / 1000.0
        self.sleep = sleep
        self.last_retries = 0
        self.total_retries = 0

    def _post(self, payload: bytes) -> bytes:
        req = urllib.request.Request(self.url, data=payload, method="POST",
                                     headers={"Content-Type": "application/x-ndjson"})
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return resp.read()

    def _request(self, context):
        payload = (json.dumps({"context": [int(t) for t in context], "want_logits": True})
                   + "\n").encode()
        self.last_retries = 0
        for attempt in range(self.retries):
            try:
                return self._post(payload)
            except urllib.error.HTTPError as exc:
                if exc.code < 500:
                    raise TeacherProtocolError(f"teacher answered HTTP {exc.code}") from exc
                err = exc
            except (urllib.error.URLError, socket.timeout, TimeoutError, ConnectionError) as exc:
                err = exc
            if attempt + 1 < self.retries:
                self.last_retries += 1
                self.total_retries += 1
                self.sleep(self.backoff * (2 ** attempt))
        raise TeacherTransportError(
            f"teacher at {self.url} failed after {self.retries} attempts: {err}")

    def step(self, context):
        raw = self._request(context)
        text = raw.decode("utf-8", errors="replace").strip()
        excerpt = text[:120]
        try:
            msg = json.loads(text.splitlines()[0] if text else "")
        except (json.JSONDecodeError, IndexError) as exc:
            raise TeacherProtocolError(f"malformed teacher response: {excerpt!r}") from exc
        if not isinstance(msg, dict):
            raise TeacherProtocolError(f"teacher response is not an object: {excerpt!r}")
        if "vocab_size" in msg and int(msg["vocab_size"]) != self.vocab_size:
            raise ConfigurationError(
                f"teacher vocabulary {msg['vocab_size']} != student vocabulary {self.vocab_size}")
        if msg.get("done") or msg.get("token") is None:
            return None
        logits = msg.get("logits")
        if not isinstance(logits, list):
            raise TeacherProtocolError(f"teacher response lacks a logits list: {excerpt!r}")
        if len(logits) != self.vocab_size:
            raise TeacherProtocolError(
                f"teacher sent {len(logits)} logits, expected {self.vocab_size}")
        try:
            return TeacherStep(int(msg["token"]), np.asarray(logits, dtype=np.float64),
                               int(msg.get("index", 0)), bool(msg.get("final", False)))
        except (InputError, TypeError, ValueError) as exc:
            raise TeacherProtocolError(f"invalid teacher step ({exc}): {excerpt!r}") from exc

    def describe(self):
        return {"kind": "remote", "url": self.url, "timeout_s": self.timeout,
                "retries": self.retries}


def _as_model(model) -> StateModel:
    return StateModel(model) if isinstance(model, FrozenWeights) else model


def student_logits(model: StateModel, S, r):
    y = (S @ r[..., None])[..., 0]
    return model._outputs(y[None, None])[0, 0]


def _state_grad(model: StateModel, r, dlogits):
    g = model._output_grad(dlogits[None, None])[0, 0]
    return g[..., :, None] * r[..., None, :]


def tune_state_step(model, S, r, teacher: TeacherStep, cfg: TestTimeConfig,
                    candidate: int | None = None, baseline: float = 0.0, terminal: bool = False):
    """Refine ``S`` for one token; returns (S, diagnostics)."""
    model = _as_model(model)
    S = np.asarray(S, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if S.shape[:-1] != r.shape or S.shape[-1] != r.shape[-1]:
        raise InputError(f"state shape {S.shape} and receptance shape {r.shape} disagree")
    V = model.weights.dims.vocab_size
    if teacher.logits.size != V:
        raise ConfigurationError(f"teacher vocabulary {teacher.logits.size} != student vocabulary {V}")
    if cfg.mode == "reinforce":
        if candidate is None:
            raise InputError("reinforce mode needs a sampled candidate token")
        rew = reward(teacher.logits, candidate, terminal, cfg.terminal_bonus)
        target, scale = candidate, rew - baseline
        weights = np.zeros(V)
        weights[target] = 1.0
    else:
        rew = reward(teacher.logits, teacher.token)
        target, scale = teacher.token, 1.0
        weights = np.exp(_log_softmax(teacher.logits))
    support = weights > 0  # keeps 0 * log(0) out of the objective
    diag = {"objective": [], "p_target": [], "target": int(target), "reward": rew,
            "advantage": scale, "warning": None}
    S0 = S
    for _ in range(cfg.iterations):
        logp = _log_softmax(student_logits(model, S, r))
        obj = scale * float(weights[support] @ logp[support])
        if not np.isfinite(obj):
            diag["warning"] = "non-finite objective; inner loop aborted"
            return S0, diag
        diag["objective"].append(obj)
        diag["p_target"].append(float(np.exp(logp[target])))
        dlogits = weights - np.exp(logp)
        S = S + cfg.eta * (scale * _state_grad(model, r, dlogits))
    logp = _log_softmax(student_logits(model, S, r))
    final = scale * float(weights[support] @ logp[support])
    if not np.isfinite(final):
        diag["warning"] = "non-finite objective; inner loop aborted"
        return S0, diag
    diag["objective"].append(final)
    diag["p_target"].append(float(np.exp(logp[target])))
    return S, diag


def _choose(logits, cfg: TestTimeConfig, rng):
    if cfg.greedy:
        return int(np.argmax(logits))  # first maximum, so ties go to the lowest id
    p = np.exp(_log_softmax(np.asarray(logits) / cfg.tau))
    return int(rng.choice(p.size, p=p))


@dataclass
class GenerationResult:
    tokens: list
    diagnostics: list = field(default_factory=list)
    final_state: np.ndarray | None = None


def guided_generate(model, S0, prompt, teacher, cfg: TestTimeConfig) -> GenerationResult:
    model = _as_model(model)
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise InputError("prompt must be nonempty")
    V = model.weights.dims.vocab_size
    table = model.table()
    if max(prompt) >= V or min(prompt) < 0:
        raise InputError("prompt token out of range")
    S = np.array(S0, dtype=np.float64, copy=True)
    for tok in prompt:
        w, k, a, v, r = table[tok]
        S = state_step(S, w, k, a, v, ceiling=model.ceiling)
    rng = np.random.default_rng(cfg.seed)
    generated, diagnostics, teacher_tokens = [], [], []
    baseline, seen = 0.0, 0
    while len(generated) < cfg.max_len:
        step = teacher.step(prompt + generated)
        if step is None:
            break
        if step.logits.size != V:
            raise ConfigurationError(
                f"teacher vocabulary {step.logits.size} != student vocabulary {V}")
        teacher_tokens.append(step.token)
        candidate, terminal = None, False
        if cfg.mode == "reinforce":
            candidate = _choose(student_logits(model, S, r), cfg, rng)
            terminal = step.final and generated + [candidate] == teacher_tokens
        S, diag = tune_state_step(model, S, r, step, cfg, candidate, baseline, terminal)
        if cfg.mode == "reinforce":
            seen += 1
            baseline += (diag["reward"] - baseline) / seen
        x = _choose(student_logits(model, S, r), cfg, rng)
        diag.update(token=x, teacher_token=step.token, index=len(generated) + 1)
        diagnostics.append(diag)
        generated.append(x)
        w, k, a, v, r = table[x]
        S = state_step(S, w, k, a, v, ceiling=model.ceiling)
    return GenerationResult(generated, diagnostics, S)
