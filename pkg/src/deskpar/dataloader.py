"""Deterministic, checkpointable synthetic token streams.

Every sample is addressed by a global index ``cursor * global_batch +
dp_rank * local_batch + i`` and generated from a counter-based RNG keyed on
``(seed, sample index)``. The loader therefore has no hidden state beyond its
cursor, data-parallel ranks read disjoint samples, and the union over ranks of
one step's batches equals the single-rank global batch.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ndtensor as nt

_BIGRAM_FANOUT = 4
_BIGRAM_MASS = 0.9


@dataclass(frozen=True)
class LoaderState:
    master_seed: int
    vocab_size: int
    seq_len: int
    local_batch: int
    dp_rank: int = 0
    dp_degree: int = 1
    cursor: int = 0
    task: str = "bigram"  # "bigram", "uniform" or "file"
    token_file: str | None = None

    def __post_init__(self):
        if not 0 <= self.dp_rank < self.dp_degree:
            raise ValueError(f"dp_rank {self.dp_rank} outside [0, {self.dp_degree})")
        if self.task not in ("bigram", "uniform", "file"):
            raise ValueError(f"unknown data task {self.task!r}")
        if self.task == "file" and not self.token_file:
            raise ValueError("task 'file' needs token_file")

    @property
    def global_batch(self) -> int:
        return self.local_batch * self.dp_degree

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "LoaderState":
        return cls(**d)


def bigram_table(master_seed: int, vocab_size: int) -> np.ndarray:
    """Cumulative transition table: each token strongly prefers a few successors."""
    key = nt.counter_key(master_seed, nt.stable_hash("bigram"))
    u = nt.counter_uniform(key, np.arange(vocab_size * _BIGRAM_FANOUT))
    succ = (u * vocab_size).astype(np.int64).reshape(vocab_size, _BIGRAM_FANOUT)
    probs = np.full((vocab_size, vocab_size), (1.0 - _BIGRAM_MASS) / vocab_size)
    for j in range(_BIGRAM_FANOUT):
        np.add.at(probs, (np.arange(vocab_size), succ[:, j]), _BIGRAM_MASS / _BIGRAM_FANOUT)
    return np.cumsum(probs, axis=1)


_TABLE_CACHE: dict[tuple[int, int], np.ndarray] = {}
_FILE_CACHE: dict[str, np.ndarray] = {}


def _table(seed: int, vocab: int) -> np.ndarray:
    key = (seed, vocab)
    if key not in _TABLE_CACHE:
        _TABLE_CACHE[key] = bigram_table(seed, vocab)
    return _TABLE_CACHE[key]


def load_token_file(path: str) -> np.ndarray:
    """Plain-text token ids, one per line."""
    if path not in _FILE_CACHE:
        text = Path(path).read_text().split()
        _FILE_CACHE[path] = np.array([int(t) for t in text], dtype=np.int64)
    return _FILE_CACHE[path]


def sample_tokens(state: LoaderState, sample_ids: np.ndarray) -> np.ndarray:
    """``[len(sample_ids), seq_len + 1]`` tokens for the given global sample indices."""
    n, length = len(sample_ids), state.seq_len + 1
    key = nt.counter_key(state.master_seed, nt.stable_hash(state.task))
    if state.task == "file":
        tokens = load_token_file(state.token_file)
        if len(tokens) <= length:
            raise ValueError(f"token file has {len(tokens)} ids; need more than {length}")
        if tokens.max() >= state.vocab_size or tokens.min() < 0:
            raise ValueError("token file contains ids outside the vocabulary")
        starts = (sample_ids * state.seq_len) % (len(tokens) - length + 1)
        return tokens[starts[:, None] + np.arange(length)]
    idx = sample_ids[:, None] * length + np.arange(length)
    u = nt.counter_uniform(key, idx)
    if state.task == "uniform":
        return np.minimum((u * state.vocab_size).astype(np.int64), state.vocab_size - 1)
    cdf = _table(state.master_seed, state.vocab_size)
    out = np.empty((n, length), dtype=np.int64)
    out[:, 0] = np.minimum((u[:, 0] * state.vocab_size).astype(np.int64), state.vocab_size - 1)
    for t in range(1, length):
        rows = cdf[out[:, t - 1]]
        pick = (rows < u[:, t:t + 1] * rows[:, -1:]).sum(axis=1)
        out[:, t] = np.minimum(pick, state.vocab_size - 1)
    return out


def next_batch(state: LoaderState) -> tuple[dict[str, np.ndarray], LoaderState]:
    first = state.cursor * state.global_batch + state.dp_rank * state.local_batch
    tokens = sample_tokens(state, np.arange(first, first + state.local_batch, dtype=np.int64))
    batch = {"input_ids": tokens[:, :-1].copy(), "labels": tokens[:, 1:].copy()}
    return batch, dataclasses.replace(state, cursor=state.cursor + 1)


class DataLoader:
    """Iterator wrapper around :func:`next_batch` with a state dict."""

    def __init__(self, state: LoaderState):
        self.state = state

    def __iter__(self):
        return self

    def __next__(self) -> dict[str, np.ndarray]:
        batch, self.state = next_batch(self.state)
        return batch

    def state_dict(self) -> dict:
        return self.state.to_json()

    def load_state_dict(self, d: dict) -> None:
        self.state = LoaderState.from_json(d)
