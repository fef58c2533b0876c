"""Negative supply for contrastive training.

Two modes:
  moco     document embeddings come from a slowly-updated momentum copy of
           the parameters and past batches' documents are kept in a FIFO
           queue as extra negatives; gradients reach only the query branch.
  in_batch the other documents of the current batch act as negatives; both
           branches stay differentiable, which the gradient checks exploit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class MomentumState:
    """Momentum copy of the embedding table plus its update coefficient."""

    table: np.ndarray
    mu: float = 0.99

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        if not (0.0 <= self.mu <= 1.0):
            raise ConfigError(f"mu must lie in [0, 1], got {self.mu}")


def momentum_update(slow: MomentumState, fast_table: np.ndarray) -> None:
    """slow <- mu * slow + (1 - mu) * fast, elementwise and in place."""
    if slow.table.shape != fast_table.shape:
        raise ConfigError(
            f"shape mismatch: momentum {slow.table.shape} vs live {fast_table.shape}"
        )
    slow.table *= slow.mu
    slow.table += (1.0 - slow.mu) * fast_table


def momentum_update_rows(slow: MomentumState, fast_table: np.ndarray, rows: np.ndarray) -> None:
    """Same recurrence restricted to the given rows.

    The trainer applies it to the rows that have ever received gradient;
    elsewhere both tables still hold their identical initial values, so the
    dense recurrence would be a no-op there anyway (up to rounding).
    """
    if slow.table.shape != fast_table.shape:
        raise ConfigError(
            f"shape mismatch: momentum {slow.table.shape} vs live {fast_table.shape}"
        )
    slow.table[rows] = slow.mu * slow.table[rows] + (1.0 - slow.mu) * fast_table[rows]


class NegativeQueue:
    """FIFO store of up to `capacity` past document embeddings."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ConfigError("queue capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self._entries = np.empty((0, dim), dtype=np.float64)

    def __len__(self) -> int:
        return self._entries.shape[0]

    @property
    def entries(self) -> np.ndarray:
        """(len, dim) matrix in FIFO order, oldest first. Do not mutate."""
        return self._entries

    def enqueue(self, new: np.ndarray) -> None:
        """Append rows in order, evicting the oldest beyond capacity."""
        new = np.asarray(new, dtype=np.float64)
        if new.ndim == 1:
            new = new[None, :]
        if new.shape[1] != self.dim:
            raise ConfigError(f"embedding dim {new.shape[1]} != queue dim {self.dim}")
        merged = np.concatenate([self._entries, new], axis=0)
        if merged.shape[0] > self.capacity:
            merged = merged[-self.capacity :]
        self._entries = merged

    def state(self) -> np.ndarray:
        return self._entries.copy()

    def restore(self, entries: np.ndarray) -> None:
        entries = np.asarray(entries, dtype=np.float64).reshape(-1, self.dim)
        if entries.shape[0] > self.capacity:
            raise ConfigError("restored queue exceeds capacity")
        self._entries = entries.copy()


def negatives_for(
    mode: str,
    queue: NegativeQueue | None,
    batch_doc_embeddings: np.ndarray | None,
    group_index: int,
    pairs_per_group: int,
) -> np.ndarray:
    """Negative pool for one group's pairs, as a (D, d) matrix.

    moco: the entire queue (possibly empty during warmup). in_batch: every
    positive-document embedding in the batch except the ones cropped from the
    query's own document.
    """
    if mode == "moco":
        if queue is None:
            raise ConfigError("moco mode requires a queue")
        return queue.entries
    if mode == "in_batch":
        flat = np.asarray(batch_doc_embeddings, dtype=np.float64)
        m = flat.shape[0] // pairs_per_group
        if m < 2:
            raise ConfigError("in_batch negatives need at least two groups")
        own = slice(group_index * pairs_per_group, (group_index + 1) * pairs_per_group)
        mask = np.ones(flat.shape[0], dtype=bool)
        mask[own] = False
        return flat[mask]
    raise ConfigError(f"unknown negatives mode {mode!r}")
