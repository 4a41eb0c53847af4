"""Desk-scale sequence encoder with projector and per-level predictors.

Backbone (per image, 1 x H x W input):

    conv 3x3 (pad 1) -> relu -> maxpool 2x2
    conv 3x3 (pad 1) -> relu -> maxpool 2 x pw     (pw = 2 when the width allows T frames)
    conv (H/4) x 1   -> relu                        (collapses height, F channels)
    adaptive column average to T frames              (only if width != T)

Projector: framewise affine F->F with relu, then a width-3 sequence
convolution F->F (pad 1). Predictors: one affine F->D per level followed
by L2 normalisation.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import ndiff as nd
from .errors import ConfigError, DomainError, ShapeError

LEVELS = ("frame", "subword", "word")


@dataclass(frozen=True)
class EncoderConfig:
    height: int = 16
    width: int = 64
    features: int = 32  # F
    frames: int = 16  # T
    dim: int = 16  # D
    channels: tuple[int, int] = (8, 16)
    subword_bins: int = 4

    def __post_init__(self):
        if min(self.height, self.width, self.features, self.frames, self.dim) < 1:
            raise ConfigError("encoder extents must be positive")
        if self.height < 4:
            raise ConfigError("height must be >= 4")
        if not 1 <= self.subword_bins <= self.frames:
            raise ConfigError("subword_bins must be in [1, T]")
        if self.column_width() < self.frames:
            raise ConfigError(f"width {self.width} too small for T={self.frames}")

    def second_pool(self) -> int:
        return 2 if (self.width // 2) // 2 >= self.frames else 1

    def column_width(self) -> int:
        return (self.width // 2) // self.second_pool()

    def column_height(self) -> int:
        return (self.height // 2) // 2


def _kaiming(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class EncoderParams:
    """Named parameter arrays plus the geometry they were built for."""

    def __init__(self, config: EncoderConfig, arrays: "OrderedDict[str, np.ndarray]"):
        self.config = config
        self.arrays = OrderedDict((k, np.asarray(v, dtype=np.float32)) for k, v in arrays.items())

    def names(self):
        return list(self.arrays)

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, OrderedDict((k, v.copy()) for k, v in self.arrays.items()))

    def leaves(self, trainable=True) -> dict:
        """Wrap every array as a DiffArray sharing no memory with the store."""
        make = nd.parameter if trainable else nd.as_array
        return {k: make(v) for k, v in self.arrays.items()}

    def equal(self, other: "EncoderParams") -> bool:
        return self.arrays.keys() == other.arrays.keys() and all(
            np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)

    BACKBONE = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b")


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    if not isinstance(config, EncoderConfig):
        raise ConfigError("init_params needs an EncoderConfig")
    rng = np.random.default_rng(seed)
    c1, c2 = config.channels
    F, D = config.features, config.dim
    kh = config.column_height()
    a = OrderedDict()
    a["conv1.w"] = _kaiming(rng, (c1, 1, 3, 3), 9)
    a["conv1.b"] = np.zeros(c1)
    a["conv2.w"] = _kaiming(rng, (c2, c1, 3, 3), 9 * c1)
    a["conv2.b"] = np.zeros(c2)
    a["conv3.w"] = _kaiming(rng, (F, c2, kh, 1), kh * c2)
    a["conv3.b"] = np.zeros(F)
    a["proj.w"] = _kaiming(rng, (F, F), F)
    a["proj.b"] = np.zeros(F)
    a["seq.w"] = _kaiming(rng, (F, F, 3), 3 * F)
    a["seq.b"] = np.zeros(F)
    for level in LEVELS:
        a[f"pred.{level}.w"] = _kaiming(rng, (F, D), F)
        a[f"pred.{level}.b"] = np.zeros(D)
    return EncoderParams(config, a)


def backbone(leaves: dict, config: EncoderConfig, pixels) -> nd.DiffArray:
    """(B, H, W) pixels -> (B, F, T) backbone features."""
    x = nd.as_array(pixels)
    if x.ndim == 2:
        x = nd.reshape(x, (1,) + x.shape)
    if x.shape[1:] != (config.height, config.width):
        raise ShapeError(f"pixels {x.shape[1:]} do not match {config.height}x{config.width}")
    B = x.shape[0]
    x = nd.reshape(x, (B, 1, config.height, config.width))
    x = nd.relu(nd.conv2d(x, leaves["conv1.w"], leaves["conv1.b"], padding=1))
    x = nd.maxpool2d(x, 2)
    x = nd.relu(nd.conv2d(x, leaves["conv2.w"], leaves["conv2.b"], padding=1))
    x = nd.maxpool2d(x, (2, config.second_pool()))
    x = nd.relu(nd.conv2d(x, leaves["conv3.w"], leaves["conv3.b"]))
    x = nd.reshape(x, (B, config.features, x.shape[-1]))
    if x.shape[-1] != config.frames:
        x = nd.avgpool_seq(x, config.frames)
    return x


def project(leaves: dict, config: EncoderConfig, feats: nd.DiffArray) -> nd.DiffArray:
    B, F, T = feats.shape
    h = nd.reshape(nd.transpose(feats, (0, 2, 1)), (B * T, F))
    h = nd.relu(nd.add(nd.matmul(h, leaves["proj.w"]), leaves["proj.b"]))
    h = nd.transpose(nd.reshape(h, (B, T, F)), (0, 2, 1))
    return nd.conv1d_seq(h, leaves["seq.w"], leaves["seq.b"], padding=1)


def encode(params, pixels, config: EncoderConfig | None = None) -> nd.DiffArray:
    """Sequence features (B, F, T) for a batch (B, H, W) or one image (H, W).

    ``params`` is an :class:`EncoderParams` (no gradients) or a dict of
    leaves from :meth:`EncoderParams.leaves` with ``config`` given.
    """
    if isinstance(params, EncoderParams):
        leaves, config = params.leaves(trainable=False), params.config
    else:
        leaves = params
    return project(leaves, config, backbone(leaves, config, pixels))


def predict_level(params, seq: nd.DiffArray, level: str, config: EncoderConfig | None = None) -> nd.DiffArray:
    """Unit-norm atoms of one level, image-major: (B * atoms, D)."""
    if isinstance(params, EncoderParams):
        leaves, config = params.leaves(trainable=False), params.config
    else:
        leaves = params
    seq = nd.as_array(seq)
    if seq.ndim == 2:
        seq = nd.reshape(seq, (1,) + seq.shape)
    if level == "frame":
        pooled = seq
    elif level == "subword":
        pooled = nd.avgpool_seq(seq, config.subword_bins)
    elif level == "word":
        pooled = nd.mean(seq, axis=2, keepdims=True)
    else:
        raise ConfigError(f"unknown level {level!r}")
    B, F, n = pooled.shape
    rows = nd.reshape(nd.transpose(pooled, (0, 2, 1)), (B * n, F))
    out = nd.add(nd.matmul(rows, leaves[f"pred.{level}.w"]), leaves[f"pred.{level}.b"])
    return nd.l2_normalize(out, axis=1)


class ModelPair:
    """Online parameters (trained) and their momentum copy (never trained)."""

    def __init__(self, online: EncoderParams, momentum: EncoderParams | None = None, m: float = 0.999):
        if not 0 <= m <= 1:
            raise DomainError(f"momentum coefficient {m} outside [0, 1]")
        self.online = online
        self.momentum = momentum if momentum is not None else online.copy()
        if self.online.arrays.keys() != self.momentum.arrays.keys():
            raise ConfigError("online and momentum parameter sets differ")
        self.m = m

    @classmethod
    def create(cls, config: EncoderConfig, seed: int, m: float = 0.999) -> "ModelPair":
        online = init_params(config, seed)
        return cls(online, online.copy(), m)


def momentum_update(pair: ModelPair, m: float | None = None) -> None:
    m = pair.m if m is None else m
    if not 0 <= m <= 1:
        raise DomainError(f"momentum coefficient {m} outside [0, 1]")
    keep = np.float32(m)
    take = np.float32(1.0 - m)
    for name, q in pair.online.arrays.items():
        k = pair.momentum.arrays[name]
        if m == 1:
            continue
        if m == 0:
            k[...] = q
        else:
            k[...] = keep * k + take * q
