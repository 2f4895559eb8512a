"""Deterministic calibration token streams."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, ParameterError

SOURCES = ("markov", "uniform_random", "file")


@dataclass
class CalibrationSet:
    train: np.ndarray  # [n_train, seq_len] int64
    holdout: np.ndarray  # [n_holdout, seq_len] int64
    seed: int
    source: str
    transition: np.ndarray | None = None

    @property
    def seq_len(self):
        return self.train.shape[1]

    def batches(self, batch_size, split="train"):
        """Ordered list of ``[batch, seq_len]`` batches; the last may be short."""
        if batch_size < 1:
            raise ParameterError("batch_size must be positive")
        tokens = self.train if split == "train" else self.holdout
        return [tokens[i : i + batch_size] for i in range(0, tokens.shape[0], batch_size)]


def markov_table(vocab_size, seed, concentration=0.1):
    """Seeded order-1 transition matrix with peaked (Dirichlet) rows."""
    rng = np.random.default_rng([seed, 1])
    return rng.dirichlet(np.full(vocab_size, concentration), size=vocab_size)


def sample_markov(table, num_sequences, seq_len, rng):
    vocab = table.shape[0]
    cdf = np.cumsum(table, axis=1)
    cdf[:, -1] = 1.0
    out = np.empty((num_sequences, seq_len), dtype=np.int64)
    out[:, 0] = rng.integers(0, vocab, size=num_sequences)
    for t in range(1, seq_len):
        u = rng.random(num_sequences)
        rows = cdf[out[:, t - 1]]
        out[:, t] = (u[:, None] >= rows).sum(axis=1)
    return out


def read_token_file(path, vocab_size):
    sequences = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            ids = [int(tok) for tok in line.split()]
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: non-integer token") from exc
        if any(i < 0 or i >= vocab_size for i in ids):
            raise InputError(f"{path}:{lineno}: token id outside [0, {vocab_size})")
        sequences.append(ids)
    return sequences


def generate_calibration(
    vocab_size,
    num_sequences=128,
    seq_len=64,
    seed=0,
    source="markov",
    path=None,
    holdout_fraction=0.0,
):
    """Build the calibration set; the trailing ``holdout_fraction`` is held out."""
    if num_sequences < 1 or seq_len < 2:
        raise ParameterError("need num_sequences >= 1 and seq_len >= 2")
    if not 0.0 <= holdout_fraction < 1.0:
        raise ParameterError("holdout_fraction must lie in [0, 1)")
    if source not in SOURCES:
        raise ParameterError(f"unknown calibration source {source!r}; expected one of {SOURCES}")

    table = None
    if source == "file":
        if path is None:
            raise ParameterError("file source needs a path")
        seqs = read_token_file(path, vocab_size)
        if len(seqs) < num_sequences:
            raise InputError(f"{path} has {len(seqs)} sequences, need {num_sequences}")
        seqs = seqs[:num_sequences]
        if any(len(s) < seq_len for s in seqs):
            raise InputError(f"{path}: every sequence needs at least {seq_len} tokens")
        tokens = np.array([s[:seq_len] for s in seqs], dtype=np.int64)
    else:
        rng = np.random.default_rng([seed, 0])
        if source == "markov":
            table = markov_table(vocab_size, seed)
            tokens = sample_markov(table, num_sequences, seq_len, rng)
        else:
            tokens = rng.integers(0, vocab_size, size=(num_sequences, seq_len), dtype=np.int64)

    n_hold = int(round(holdout_fraction * num_sequences))
    if holdout_fraction > 0 and (n_hold == 0 or n_hold == num_sequences):
        raise ParameterError("holdout fraction leaves an empty split")
    cut = num_sequences - n_hold
    return CalibrationSet(
        train=tokens[:cut],
        holdout=tokens[cut:],
        seed=seed,
        source=source,
        transition=table,
    )
