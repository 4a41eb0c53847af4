import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rclstr import fixtures as fx
from rclstr import ndiff as nd
from rclstr.errors import GroupError, ShapeError
from rclstr.permute import PermutationRecord, divide, permute_blocks, shuffle_groups, unshuffle_features


def test_divide_direct_and_identity():
    x = np.random.default_rng(0).random((3, 4, 64))
    d = divide(x, 1)
    assert np.array_equal(d.patches[:, 0], x)
    d = divide(x, 2)
    assert np.array_equal(d.patches[:, 0], x[:, :, :32])
    assert np.array_equal(d.patches[:, 1], x[:, :, 32:])
    with pytest.raises(ShapeError):
        divide(x, 3)


def test_vertical_projection_cuts_at_empty_column():
    x = np.ones((1, 4, 64))
    x[0, :, 30] = 0
    d = divide(x, 2, "vertical_projection")
    assert d.cuts[0, 1] == 30
    assert d.patches.shape == (1, 2, 4, 32)


def test_shuffle_example_table():
    # images A = [A1|A2], B = [B1|B2]; slot s receives patch pi[s]
    a = np.stack([np.full((1, 2), 1.0), np.full((1, 2), 2.0)])
    b = np.stack([np.full((1, 2), 3.0), np.full((1, 2), 4.0)])
    out, record = shuffle_groups(np.stack([a, b]), 2, pi=[2, 0, 3, 1])
    assert np.array_equal(out[0], np.array([[3, 3, 1, 1]]))
    assert np.array_equal(out[1], np.array([[4, 4, 2, 2]]))


def test_identity_permutation_is_identity():
    x = np.random.default_rng(1).random((4, 3, 16))
    d = divide(x, 2)
    out, record = shuffle_groups(d, 2, pi=np.arange(4))
    assert np.array_equal(out, x)
    f = np.random.default_rng(2).random((4, 5, 8))
    assert np.array_equal(unshuffle_features(f, record), f)


def test_group_error():
    with pytest.raises(GroupError):
        shuffle_groups(np.zeros((3, 2, 1, 4)), 2)


def test_record_rejects_non_bijection():
    with pytest.raises(ValueError):
        PermutationRecord(2, 1, [[0, 0]])


def test_unshuffle_needs_divisible_frames():
    _, record = shuffle_groups(np.zeros((2, 2, 1, 4)), 2, 0)
    with pytest.raises(ShapeError):
        unshuffle_features(np.zeros((2, 3, 7)), record)


def test_block_tagged_round_trip_matches_loop_oracle():
    pi = [2, 0, 3, 1]
    _, record = shuffle_groups(np.zeros((2, 2, 1, 4)), 2, pi=pi)
    tags = np.repeat(np.arange(4.0), 3).reshape(2, 1, 6)
    shuffled = permute_blocks(tags, record)
    assert np.array_equal(shuffled[0, 0], [2, 2, 2, 0, 0, 0])
    assert np.array_equal(unshuffle_features(shuffled, record), tags)
    assert np.array_equal(fx.oracle_unshuffle_blocks(shuffled, record.pi, 2, 2), tags)


def test_drop_boundary_mask_excludes_frames_next_to_cut():
    _, record = shuffle_groups(np.zeros((2, 2, 1, 4)), 2, pi=np.arange(4), strategy="drop_boundary")
    mask = record.frame_mask(16)
    assert not mask[0, 7] and not mask[0, 8]
    assert mask[0].sum() == 14
    _, shuffled = shuffle_groups(np.zeros((2, 2, 1, 4)), 2, pi=[1, 0, 2, 3], strategy="drop_boundary")
    # slot 0 holds patch 1 (right half of image 0): its last frame is next to the cut
    m = shuffled.frame_mask(16)
    assert not m[0, 15] and not m[0, 0] and m[0, 7] and m[0, 8]


@settings(max_examples=300, deadline=None)
@given(st.sampled_from([1, 2, 4]), st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_permutation_algebra(N, M, groups, seed):
    rng = np.random.default_rng(seed)
    B = groups * M
    patches = rng.normal(size=(B, N, 2, 3))
    images, record = shuffle_groups(patches, M, seed)
    out = images.reshape(B, 2, N, 3).transpose(0, 2, 1, 3).reshape(B * N, -1)
    assert sorted(map(tuple, out)) == sorted(map(tuple, patches.reshape(B * N, -1)))
    feats = rng.normal(size=(B, 3, N * 2))
    assert np.array_equal(unshuffle_features(permute_blocks(feats, record), record), feats)
    assert np.array_equal(fx.oracle_unshuffle_blocks(permute_blocks(feats, record), record.pi, N, M), feats)


def test_unshuffle_gradient():
    _, record = shuffle_groups(np.zeros((4, 2, 1, 2)), 2, 3)
    w = np.random.default_rng(0).normal(size=(4, 2, 4))
    err = nd.grad_check(lambda x: nd.sum(nd.mul(unshuffle_features(x, record), w)),
                        np.random.default_rng(1).normal(size=(4, 2, 4)))
    assert err < 1e-8
