"""Fixed-capacity FIFO queues of negative features, one per hierarchy level."""

from __future__ import annotations

import numpy as np

from .errors import BatchTooLarge, ConfigError

LEVELS = ("frame", "subword", "word")


class NegativeBank:
    """Ring buffer of K unit-norm rows.

    ``cursor`` points at the oldest row, which is the next to be overwritten.
    Banks start full of random unit vectors so the number of negatives is K
    from the first iteration.
    """

    def __init__(self, storage: np.ndarray, level: str = "word", cursor: int = 0, fill: int | None = None):
        self.storage = np.array(storage, dtype=np.float32)
        if self.storage.ndim != 2:
            raise ConfigError("bank storage must be K x D")
        self.level = level
        self.cursor = int(cursor)
        self.fill = self.capacity if fill is None else int(fill)

    @property
    def capacity(self) -> int:
        return self.storage.shape[0]

    @property
    def dim(self) -> int:
        return self.storage.shape[1]

    def enqueue_dequeue(self, keys) -> None:
        keys = np.asarray(keys, dtype=np.float32)
        n = keys.shape[0]
        if n > self.capacity:
            raise BatchTooLarge(f"{n} keys for a bank of {self.capacity}")
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ConfigError(f"keys of shape {keys.shape} for a bank of dim {self.dim}")
        idx = (self.cursor + np.arange(n)) % self.capacity
        self.storage[idx] = keys
        self.cursor = (self.cursor + n) % self.capacity
        self.fill = min(self.capacity, self.fill + n)

    def as_negatives(self) -> np.ndarray:
        """Read-only K x D snapshot, decoupled from later enqueues."""
        snap = self.storage.copy()
        snap.flags.writeable = False
        return snap

    def by_age(self) -> np.ndarray:
        """Rows from oldest to newest."""
        return np.roll(self.storage, -self.cursor, axis=0)

    def copy(self) -> "NegativeBank":
        return NegativeBank(self.storage.copy(), self.level, self.cursor, self.fill)


def init_bank(K: int, D: int, seed: int, level: str = "word") -> NegativeBank:
    if K < 1 or D < 1:
        raise ConfigError(f"bank needs K >= 1 and D >= 1, got K={K}, D={D}")
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((K, D))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return NegativeBank(rows, level)


def enqueue_dequeue(bank: NegativeBank, keys) -> None:
    bank.enqueue_dequeue(keys)


def as_negatives(bank: NegativeBank) -> np.ndarray:
    return bank.as_negatives()
