"""Patch division, group shuffling and feature un-shuffling.

Images of a batch are taken ``M`` at a time. Each is cut into ``N`` vertical
strips (patches); the ``N*M`` patches of a group are permuted and
re-concatenated into ``M`` new images. Group patch ``i*N + n`` is patch ``n``
of image ``i``; slot ``s`` of the output is position ``s % N`` of output image
``s // N`` and receives patch ``pi[s]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndiff as nd
from .errors import ConfigError, GroupError, ShapeError

STRATEGIES = ("direct", "drop_boundary", "vertical_projection")


@dataclass
class Division:
    patches: np.ndarray  # (B, N, H, W // N)
    cuts: np.ndarray  # (B, N + 1) pixel cut positions, first 0 and last W
    strategy: str

    @property
    def N(self) -> int:
        return self.patches.shape[1]


@dataclass
class PermutationRecord:
    N: int
    M: int
    pi: np.ndarray  # (groups, N*M), slot -> source patch
    strategy: str = "direct"

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=np.intp)
        for row in self.pi:
            if not np.array_equal(np.sort(row), np.arange(self.N * self.M)):
                raise ValueError(f"pi row {row} is not a permutation of 0..{self.N * self.M - 1}")

    @property
    def groups(self) -> int:
        return self.pi.shape[0]

    @property
    def batch(self) -> int:
        return self.groups * self.M

    def global_pi(self) -> np.ndarray:
        """Slot -> source block index over the whole batch (image-major)."""
        nm = self.N * self.M
        return (self.pi + nm * np.arange(self.groups)[:, None]).ravel()

    def global_inverse(self) -> np.ndarray:
        gp = self.global_pi()
        inv = np.empty_like(gp)
        inv[gp] = np.arange(gp.size)
        return inv

    def frame_mask(self, T: int) -> np.ndarray:
        """Frames (B, T) that count in the loss after un-shuffling.

        Under ``drop_boundary`` the frame on each side of every interior cut of
        a permuted image is dropped; the mask is then routed back to original
        positions along with the features.
        """
        if T % self.N:
            raise ShapeError(f"T={T} not divisible by N={self.N}")
        B = self.batch
        if self.strategy != "drop_boundary" or self.N == 1:
            return np.ones((B, T), dtype=bool)
        per = T // self.N
        slot_mask = np.ones((B * self.N, per), dtype=bool)
        pos = np.arange(B * self.N) % self.N
        slot_mask[pos > 0, 0] = False
        slot_mask[pos < self.N - 1, per - 1] = False
        orig = np.empty_like(slot_mask)
        orig[self.global_pi()] = slot_mask
        return orig.reshape(B, T)


def _min_ink_cut(column_ink: np.ndarray, nominal: int, radius: int) -> int:
    lo = max(1, nominal - radius)
    hi = min(column_ink.size - 1, nominal + radius)
    xs = np.arange(lo, hi + 1)
    vals = column_ink[lo:hi + 1]
    best = vals.min()
    ties = xs[vals == best]
    return int(ties[np.argmin(np.abs(ties - nominal))])


def divide(images: np.ndarray, N: int, strategy: str = "direct") -> Division:
    """Cut each image of a (B, H, W) batch into ``N`` patches of width W/N."""
    images = np.asarray(images)
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown division strategy {strategy!r}")
    if N < 1:
        raise ConfigError("N must be >= 1")
    B, H, W = images.shape
    if W % N:
        raise ShapeError(f"W={W} not divisible by N={N}")
    pw = W // N
    nominal = np.arange(N + 1) * pw
    if strategy != "vertical_projection" or N == 1:
        patches = images.reshape(B, H, N, pw).transpose(0, 2, 1, 3).copy()
        return Division(patches, np.tile(nominal, (B, 1)), strategy)

    radius = W // (4 * N)
    patches = np.empty((B, N, H, pw), dtype=images.dtype)
    cuts = np.tile(nominal, (B, 1))
    for b in range(B):
        ink = images[b].sum(axis=0)
        for k in range(1, N):
            cuts[b, k] = _min_ink_cut(ink, int(nominal[k]), radius)
        for n in range(N):
            piece = images[b, :, cuts[b, n]:cuts[b, n + 1]]
            if piece.shape[1] >= pw:
                piece = piece[:, :pw]
            else:
                piece = np.pad(piece, ((0, 0), (0, pw - piece.shape[1])), mode="edge")
            patches[b, n] = piece
    return Division(patches, cuts, strategy)


def shuffle_groups(patches, M: int, rng_seed: int = 0, pi=None, strategy: str = "direct"):
    """Permute patches within each group of ``M`` images and re-concatenate.

    ``patches`` is (B, N, H, P) or a :class:`Division`. ``pi`` forces the
    permutation: one row of length N*M shared by all groups, or one row per
    group. Returns the new (B, H, N*P) images and the record.
    """
    if isinstance(patches, Division):
        strategy = patches.strategy
        patches = patches.patches
    patches = np.asarray(patches)
    B, N, H, P = patches.shape
    if M < 1 or B % M:
        raise GroupError(f"batch of {B} is not divisible into groups of M={M}")
    G = B // M
    if pi is None:
        rng = np.random.default_rng(rng_seed)
        pi = np.stack([rng.permutation(N * M) for _ in range(G)])
    else:
        pi = np.asarray(pi)
        if pi.ndim == 1:
            pi = np.tile(pi, (G, 1))
    record = PermutationRecord(N, M, pi, strategy)
    flat = patches.reshape(B * N, H, P)[record.global_pi()]
    images = flat.reshape(B, N, H, P).transpose(0, 2, 1, 3).reshape(B, H, N * P)
    return images, record


def _blocks(features, N: int):
    B, F, T = features.shape
    if T % N:
        raise ShapeError(f"T={T} not divisible by N={N}")
    x = nd.reshape(features, (B, F, N, T // N))
    x = nd.transpose(x, (0, 2, 1, 3))
    return nd.reshape(x, (B * N, F, T // N))


def _unblocks(blocks, B: int, N: int):
    _, F, per = blocks.shape
    x = nd.reshape(blocks, (B, N, F, per))
    x = nd.transpose(x, (0, 2, 1, 3))
    return nd.reshape(x, (B, F, N * per))


def unshuffle_features(features, record: PermutationRecord):
    """Route frame blocks of permuted images back to their source positions.

    ``features`` is (B, F, T) as a DiffArray or ndarray; the frame axis is
    split into N blocks of T/N frames. Gradients flow through (the backward
    is the forward shuffle).
    """
    as_numpy = not isinstance(features, nd.DiffArray)
    x = nd.as_array(features)
    B = x.shape[0]
    if B != record.batch:
        raise ShapeError(f"features for {B} images but record covers {record.batch}")
    blocks = nd.take(_blocks(x, record.N), record.global_inverse(), axis=0)
    out = _unblocks(blocks, B, record.N)
    return out.data if as_numpy else out


def permute_blocks(features, record: PermutationRecord):
    """Feature-level counterpart of :func:`shuffle_groups` (inverse of unshuffle)."""
    as_numpy = not isinstance(features, nd.DiffArray)
    x = nd.as_array(features)
    B = x.shape[0]
    blocks = nd.take(_blocks(x, record.N), record.global_pi(), axis=0)
    out = _unblocks(blocks, B, record.N)
    return out.data if as_numpy else out
