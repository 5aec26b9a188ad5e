"""Synthetic sequence classification that needs attention to solve.

Position 0 holds a query token naming one of ``num_colors`` colours. The
remaining positions hold item tokens, each a (colour, digit) pair. Exactly
one item shares the query colour; its digit is the label. Reading the label
therefore requires matching content across positions.

Token ids: item (c, k) -> c * num_classes + k; query c -> num_colors * num_classes + c.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class SyntheticTask:
    seed: int = 1234
    seq_len: int = 16
    num_colors: int = 4
    num_classes: int = 8
    train_size: int = 4096
    val_size: int = 1024

    @property
    def vocab_size(self) -> int:
        return self.num_colors * self.num_classes + self.num_colors


@dataclass
class Dataset:
    tokens: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def batches(self, batch_size: int, rng=None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for i in range(0, len(self), batch_size):
            idx = order[i:i + batch_size]
            yield self.tokens[idx], self.labels[idx]


def _sample(task: SyntheticTask, rng: np.random.Generator, n: int):
    c, k, length = task.num_colors, task.num_classes, task.seq_len
    query = rng.integers(0, c, n)
    labels = rng.integers(0, k, n)
    slot = rng.integers(1, length, n)
    # other colours: shift by 1..c-1 so the query colour never repeats
    colors = (query[:, None] + rng.integers(1, c, (n, length - 1))) % c
    digits = rng.integers(0, k, (n, length - 1))
    rows = np.arange(n)
    colors[rows, slot - 1] = query
    digits[rows, slot - 1] = labels
    tokens = np.empty((n, length), dtype=np.int64)
    tokens[:, 0] = c * k + query
    tokens[:, 1:] = colors * k + digits
    return tokens, labels.astype(np.int64)


def make_synthetic_task(task: SyntheticTask):
    """Return (train, val) datasets; val rows never duplicate train rows."""
    if task.train_size < 1 or task.val_size < 1:
        raise ParameterError("split sizes must be >= 1")
    if task.num_colors < 2 or task.seq_len < 2:
        raise ParameterError("need at least two colours and two positions")
    rng = np.random.default_rng(task.seed)
    train_tokens, train_labels = _sample(task, rng, task.train_size)
    seen = {row.tobytes() for row in train_tokens}
    val_tokens, val_labels = [], []
    while len(val_labels) < task.val_size:
        tok, lab = _sample(task, rng, task.val_size)
        for row, y in zip(tok, lab):
            key = row.tobytes()
            if key in seen:
                continue
            seen.add(key)
            val_tokens.append(row)
            val_labels.append(y)
            if len(val_labels) == task.val_size:
                break
    return (Dataset(train_tokens, train_labels),
            Dataset(np.array(val_tokens), np.array(val_labels, dtype=np.int64)))
