"""Synthetic sequence tasks with known continuations, plus dataset I/O.

Reserved token ids: 0 pad, 1 separator, 2 query marker, 3 equals sign.
Content tokens start at 4.

Associative recall draws its key/value pairs from one seeded lookup table
per task, so the answer is present in context *and* is a fixed fact the
tuned state can store (knowledge retrieval rather than in-context binding,
which the frozen recurrence has no token-shift path for).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DigestError, FormatError, InputError

PAD, SEP, QUERY, EQUALS = 0, 1, 2, 3
FIRST_CONTENT = 4
KINDS = ("recall", "copy", "modular-add")
FORMAT_NAME = "statetune-dataset"


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "recall"
    vocab_size: int = 32
    pairs: int = 4
    span: int = 4
    modulus: int = 11
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown task kind {self.kind!r}; expected one of {KINDS}")
        for name in ("vocab_size", "pairs", "span", "modulus", "n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1")
        content = self.vocab_size - FIRST_CONTENT
        if content < 2:
            raise InputError(f"vocab_size {self.vocab_size} leaves no content tokens")
        if self.kind == "recall" and self.pairs > self.num_keys:
            raise InputError(
                f"infeasible spec: {self.pairs} distinct keys requested but vocab_size "
                f"{self.vocab_size} provides only {self.num_keys}")
        if self.kind == "modular-add" and self.modulus > content:
            raise InputError(
                f"infeasible spec: modulus {self.modulus} needs {self.modulus} content tokens, "
                f"vocab_size {self.vocab_size} provides {content}")

    @property
    def num_keys(self) -> int:
        return (self.vocab_size - FIRST_CONTENT) // 2

    @property
    def seq_len(self) -> int:
        if self.kind == "recall":
            return 2 * self.pairs + 3
        if self.kind == "copy":
            return 2 * self.span + 1
        return 4

    @property
    def total(self) -> int:
        return self.n_train + self.n_val + self.n_test

    def to_dict(self):
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class Example:
    tokens: list
    target_start: int
    target_len: int

    @property
    def target(self):
        return self.tokens[self.target_start:self.target_start + self.target_len]


@dataclass
class Dataset:
    spec: TaskSpec
    splits: dict = field(default_factory=dict)

    def __getitem__(self, split):
        return self.splits[split]

    def records(self):
        for split in ("train", "val", "test"):
            for ex in self.splits.get(split, []):
                yield {"split": split, "tokens": list(map(int, ex.tokens)),
                       "target_start": int(ex.target_start), "target_len": int(ex.target_len)}

    def digest(self) -> str:
        h = hashlib.sha256(self.spec.digest().encode())
        for rec in self.records():
            h.update(json.dumps(rec, sort_keys=True).encode())
        return h.hexdigest()


def recall_table(spec: TaskSpec):
    """The fixed key -> value lookup used by every recall sequence of ``spec``."""
    rng = np.random.default_rng([spec.seed, 1])
    keys = np.arange(FIRST_CONTENT, FIRST_CONTENT + spec.num_keys)
    values = np.arange(FIRST_CONTENT + spec.num_keys, FIRST_CONTENT + 2 * spec.num_keys)
    return dict(zip(keys.tolist(), rng.permutation(values).tolist()))


def _max_distinct(spec: TaskSpec) -> float:
    if spec.kind == "recall":
        return math.perm(spec.num_keys, spec.pairs) * spec.pairs
    if spec.kind == "copy":
        return float(spec.vocab_size - FIRST_CONTENT) ** spec.span
    return spec.modulus ** 2


def _sample(spec: TaskSpec, rng, table) -> Example:
    if spec.kind == "recall":
        keys = rng.choice(sorted(table), size=spec.pairs, replace=False).tolist()
        seq = []
        for key in keys:
            seq += [key, table[key]]
        q = keys[int(rng.integers(spec.pairs))]
        seq += [QUERY, q, table[q]]
        return Example(seq, len(seq) - 1, 1)
    if spec.kind == "copy":
        span = rng.integers(FIRST_CONTENT, spec.vocab_size, size=spec.span).tolist()
        return Example(span + [SEP] + span, spec.span + 1, spec.span)
    x, y = (int(v) for v in rng.integers(spec.modulus, size=2))
    return Example([FIRST_CONTENT + x, FIRST_CONTENT + y, EQUALS,
                    FIRST_CONTENT + (x + y) % spec.modulus], 3, 1)


def generate(spec: TaskSpec) -> Dataset:
    """Deterministic dataset with exact-match-disjoint splits."""
    if spec.total > _max_distinct(spec):
        raise InputError(
            f"infeasible spec: {spec.total} distinct sequences requested, "
            f"only {int(_max_distinct(spec))} exist")
    rng = np.random.default_rng([spec.seed, 0])
    table = recall_table(spec) if spec.kind == "recall" else None
    seen = set()
    examples = []
    attempts = 0
    while len(examples) < spec.total:
        attempts += 1
        if attempts > 50 * spec.total + 1000:
            raise InputError("could not draw enough distinct sequences for this spec")
        ex = _sample(spec, rng, table)
        key = tuple(ex.tokens)
        if key in seen:
            continue
        seen.add(key)
        examples.append(ex)
    a, b = spec.n_train, spec.n_train + spec.n_val
    return Dataset(spec, {"train": examples[:a], "val": examples[a:b], "test": examples[b:]})


def modular_add_target(x: int, y: int, modulus: int) -> int:
    return FIRST_CONTENT + (x + y) % modulus


def save_dataset(dataset: Dataset, path) -> str:
    path = Path(path)
    records = list(dataset.records())
    header = {"format": FORMAT_NAME, "version": 1, "spec": dataset.spec.to_dict(),
              "spec_digest": dataset.spec.digest(), "seed": dataset.spec.seed,
              "records": len(records), "digest": dataset.digest()}
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return header["digest"]


def load_dataset(path) -> Dataset:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError(f"{path}: empty dataset file", line=0)
    try:
        header = json.loads(lines[0])
        spec = TaskSpec(**header["spec"])
        expected_records = int(header["records"])
    except (json.JSONDecodeError, KeyError, TypeError, InputError) as exc:
        raise FormatError(f"{path}:1: malformed header ({exc})", line=1) from exc
    if header.get("format") != FORMAT_NAME:
        raise FormatError(f"{path}:1: not a {FORMAT_NAME} file", line=1)
    if spec.digest() != header.get("spec_digest"):
        raise DigestError(f"{path}:1: spec digest mismatch", line=1)
    splits = {"train": [], "val": [], "test": []}
    last_good = 1
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            ex = Example([int(t) for t in rec["tokens"]], int(rec["target_start"]),
                         int(rec["target_len"]))
            split = rec["split"]
            if split not in splits:
                raise ValueError(f"unknown split {split!r}")
            if ex.target_len < 1 or ex.target_start < 1 or \
                    ex.target_start + ex.target_len > len(ex.tokens):
                raise ValueError("target span out of bounds")
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(
                f"{path}:{lineno}: malformed record ({exc}); last good line {last_good}",
                line=lineno) from exc
        splits[split].append(ex)
        last_good = lineno
    if last_good - 1 != expected_records:
        raise FormatError(
            f"{path}: expected {expected_records} records, found {last_good - 1}; "
            f"last good line {last_good}", line=last_good)
    ds = Dataset(spec, splits)
    if ds.digest() != header.get("digest"):
        raise DigestError(f"{path}: content digest mismatch")
    return ds


def _log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def evaluate(model_fn, examples, kind=None) -> dict:
    """Token accuracy and mean cross-entropy over target spans.

    ``model_fn(tokens)`` returns logits of shape (len(tokens), vocab) where
    row ``t`` predicts token ``t + 1``.
    """
    examples = list(examples)
    if not examples:
        raise InputError("cannot evaluate an empty split")
    correct = total = 0
    loss = 0.0
    for ex in examples:
        if ex.target_len < 1:
            raise InputError("example with empty target span")
        logits = np.asarray(model_fn(ex.tokens[:-1]))
        rows = logits[ex.target_start - 1:ex.target_start - 1 + ex.target_len]
        tgt = np.asarray(ex.target)
        logp = _log_softmax(rows)
        loss -= float(logp[np.arange(len(tgt)), tgt].sum())
        correct += int((rows.argmax(axis=-1) == tgt).sum())
        total += len(tgt)
    out = {"accuracy": correct / total, "loss": loss / total, "targets": total,
           "sequences": len(examples)}
    if kind is not None:
        out["kind"] = kind
    return out
