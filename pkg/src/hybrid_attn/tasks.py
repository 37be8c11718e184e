"""Synthetic sequence tasks: multi-query associative recall, copy, induction.

Token layout (vocabulary shared by all tasks)::

    0            PAD
    1            SEP
    2 .. 2+K-1   keys
    2+K ..       values

Targets use IGNORE everywhere except the positions that are scored.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PAD, SEP = 0, 1
IGNORE = -100
TASK_KINDS = ("mqar_recall", "copy", "induction")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "mqar_recall"
    n_pairs: int = 16
    key_vocab: int = 64
    val_vocab: int = 64
    seq_len: int = 256
    seed: int = 0

    @property
    def vocab(self):
        return 2 + self.key_vocab + self.val_vocab

    def validate(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")
        if self.kind == "mqar_recall" and self.n_pairs > self.key_vocab:
            raise ValueError(f"n_pairs={self.n_pairs} exceeds key_vocab={self.key_vocab}")
        need = 2 * self.n_pairs + 2
        if self.seq_len < need:
            raise ValueError(f"seq_len={self.seq_len} cannot hold {self.n_pairs} pairs, "
                             f"a separator and one query (needs {need})")


def _mqar(spec, rng):
    L, n = spec.seq_len, spec.n_pairs
    keys = rng.choice(spec.key_vocab, size=n, replace=False) + 2
    vals = rng.integers(0, spec.val_vocab, size=n) + 2 + spec.key_vocab
    toks = np.full(L, PAD, dtype=np.int64)
    tgt = np.full(L, IGNORE, dtype=np.int64)
    toks[0:2 * n:2] = keys
    toks[1:2 * n:2] = vals
    toks[2 * n] = SEP
    pos = 2 * n + 1
    while pos < L:
        j = rng.integers(n)
        toks[pos] = keys[j]
        tgt[pos] = vals[j]
        if pos + 1 < L:
            toks[pos + 1] = vals[j]
        pos += 2
    return toks, tgt


def _copy(spec, rng):
    L, n = spec.seq_len, spec.n_pairs
    seq = rng.integers(0, spec.val_vocab, size=n) + 2 + spec.key_vocab
    toks = np.full(L, PAD, dtype=np.int64)
    tgt = np.full(L, IGNORE, dtype=np.int64)
    toks[:n] = seq
    toks[n] = SEP
    m = min(n, L - n - 1)
    toks[n + 1:n + 1 + m] = seq[:m]
    # predict the i-th copied token from the position before it
    tgt[n:n + m] = seq[:m]
    return toks, tgt


def _induction(spec, rng):
    L = spec.seq_len
    body = rng.integers(0, spec.val_vocab, size=L) + 2 + spec.key_vocab
    trig = rng.integers(0, spec.key_vocab) + 2
    toks = body.astype(np.int64)
    tgt = np.full(L, IGNORE, dtype=np.int64)
    first = rng.integers(0, max(1, L // 2 - 1))
    answer = toks[first + 1]
    toks[first] = trig
    toks[L - 1] = trig
    tgt[L - 1] = answer
    return toks, tgt


def gen_task(spec: TaskSpec, batch=1, seed=None):
    """Returns (tokens [batch, L], targets [batch, L]); deterministic under seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    fn = {"mqar_recall": _mqar, "copy": _copy, "induction": _induction}[spec.kind]
    pairs = [fn(spec, rng) for _ in range(batch)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def query_accuracy(logits, targets):
    keep = targets != IGNORE
    if not keep.any():
        raise ValueError("no scored positions")
    pred = logits.argmax(axis=-1)
    return float((pred[keep] == targets[keep]).mean())
