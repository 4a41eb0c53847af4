from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rclstr.bank import as_negatives, enqueue_dequeue, init_bank
from rclstr.errors import BatchTooLarge, ConfigError


def _unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


def test_init_full_unit_and_deterministic():
    a, b = init_bank(16, 4, 3), init_bank(16, 4, 3)
    assert a.fill == 16 and a.cursor == 0
    assert np.allclose(np.linalg.norm(a.storage, axis=1), 1, atol=1e-6)
    assert np.array_equal(a.storage, b.storage)
    with pytest.raises(ConfigError):
        init_bank(0, 4, 0)


def test_snapshot_is_decoupled_and_read_only():
    bank = init_bank(4, 2, 0)
    snap = as_negatives(bank)
    enqueue_dequeue(bank, _unit(np.random.default_rng(42), 2, 2))
    assert not np.array_equal(snap, bank.storage)
    with pytest.raises(ValueError):
        snap[0, 0] = 1.0


def test_batch_too_large():
    bank = init_bank(4, 2, 0)
    with pytest.raises(BatchTooLarge):
        bank.enqueue_dequeue(np.zeros((5, 2)))


def test_full_cycle_returns_to_start():
    bank = init_bank(6, 3, 1)
    keys = _unit(np.random.default_rng(1), 6, 3)
    bank.enqueue_dequeue(keys[:4])
    bank.enqueue_dequeue(keys[4:])
    assert bank.cursor == 0
    assert np.array_equal(bank.by_age(), keys)


@settings(max_examples=1000, deadline=None)
@given(st.integers(1, 12), st.integers(1, 4),
       st.lists(st.integers(0, 12), min_size=0, max_size=12), st.integers(0, 2**31))
def test_matches_reference_queue(K, D, sizes, seed):
    rng = np.random.default_rng(seed)
    bank = init_bank(K, D, seed)
    ref = deque((tuple(r) for r in bank.storage), maxlen=K)
    for n in sizes:
        n = min(n, K)
        keys = _unit(rng, n, D)
        bank.enqueue_dequeue(keys)
        ref.extend(tuple(r) for r in keys)
        assert [tuple(r) for r in bank.by_age()] == list(ref)
        assert np.allclose(np.linalg.norm(bank.storage, axis=1), 1, atol=1e-5)
