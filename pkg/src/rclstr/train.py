"""Pre-training loop: two augmented views, permuted regularization views,
momentum keys, hierarchical relational losses, SGD and queue maintenance.

All randomness is derived from ``config.seed`` and the iteration index, so
a run resumed from a checkpoint continues bit-identically.
"""

from __future__ import annotations

import json
import logging
import sys
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import permute, store
from .bank import LEVELS, NegativeBank, init_bank
from .config import TrainConfig, parse_pairs
from .encoder import EncoderConfig, EncoderParams, ModelPair, encode, momentum_update, predict_level
from .errors import DataExhausted, DigestMismatch, IoError, NonFiniteLoss, ShapeMismatch
from .losses import LevelInputs, banks_used, total_loss
from .textgen import TextStrip, augment, derive_seed, generate_strips

log = logging.getLogger(__name__)

# stream identifiers for derive_seed
STREAM_DATA, STREAM_AUG, STREAM_PERM, STREAM_INIT, STREAM_BANK = 1, 2, 3, 4, 5
STREAM_PROBE_TRAIN, STREAM_PROBE_EVAL, STREAM_PROBE_INIT = 11, 12, 13


def sgd_step(params: dict, grads: dict, lr: float, weight_decay: float, momentum: float,
             state: dict) -> None:
    """In place: ``v = momentum*v + (g + wd*p)``, ``p -= lr*v``."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        d = g + p.dtype.type(weight_decay) * p if weight_decay else g
        v = state.get(name)
        if v is None:
            v = d.astype(p.dtype, copy=True)
        else:
            v *= p.dtype.type(momentum)
            v += d
        state[name] = v
        p -= p.dtype.type(lr) * v


@dataclass
class TrainState:
    config: TrainConfig
    pair: ModelPair
    banks: dict
    velocity: dict = field(default_factory=dict)
    iteration: int = 0


def new_state(config: TrainConfig) -> TrainState:
    enc = config.encoder_config()
    pair = ModelPair.create(enc, derive_seed(config.seed, STREAM_INIT), config.encoder_momentum)
    banks = {level: init_bank(config.bank_size, config.dim, derive_seed(config.seed, STREAM_BANK, i), level)
             for i, level in enumerate(LEVELS)}
    return TrainState(config, pair, banks)


# ---------------------------------------------------------------------------
# checkpoints

def state_arrays(state: TrainState) -> "OrderedDict[str, np.ndarray]":
    out = OrderedDict()
    for name, v in state.pair.online.arrays.items():
        out[f"online.{name}"] = v
    for name, v in state.pair.momentum.arrays.items():
        out[f"momentum.{name}"] = v
    for name in state.pair.online.arrays:
        if name in state.velocity:
            out[f"velocity.{name}"] = state.velocity[name]
    for level, bank in state.banks.items():
        out[f"bank.{level}.storage"] = bank.storage
        out[f"bank.{level}.state"] = np.array([bank.cursor, bank.fill], dtype=np.float32)
    cfg = state.config
    out["meta.iteration"] = np.array([state.iteration], dtype=np.float32)
    out["meta.geometry"] = np.array([cfg.height, cfg.width, cfg.frames, cfg.subword_bins], dtype=np.float32)
    out["meta.digest"] = _bytes_record(cfg.digest())
    out["meta.config"] = _bytes_record(cfg.to_text().encode())
    return out


def _bytes_record(raw: bytes) -> np.ndarray:
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def _record_bytes(values: np.ndarray) -> bytes:
    return bytes(values.astype(np.uint8))


def save_checkpoint(path, state: TrainState) -> None:
    store.write_arrays(path, state_arrays(state))


def load_encoder(path) -> EncoderParams:
    """Online encoder parameters from a checkpoint, geometry inferred from shapes."""
    arrays = store.read_arrays(path)
    if "online.conv1.w" not in arrays:
        raise IoError(f"{path}: no encoder parameters")
    online = OrderedDict((k[len("online."):], v) for k, v in arrays.items() if k.startswith("online."))
    c1 = online["conv1.w"].shape[0]
    c2 = online["conv2.w"].shape[0]
    F, D = online["pred.frame.w"].shape
    geom = arrays.get("meta.geometry")
    if geom is None:
        raise IoError(f"{path}: missing geometry record")
    H, W, T, S = (int(x) for x in geom)
    return EncoderParams(EncoderConfig(H, W, F, T, D, (c1, c2), S), online)


def load_checkpoint(path, config: TrainConfig | None = None) -> TrainState:
    """Restore a full training state.

    Without ``config`` the configuration stored in the checkpoint is used;
    with one, its digest must match the stored digest.
    """
    arrays = store.read_arrays(path)
    try:
        digest = _record_bytes(arrays["meta.digest"])
        iteration = int(arrays["meta.iteration"][0])
        stored = _record_bytes(arrays["meta.config"]).decode()
    except KeyError as exc:
        raise IoError(f"{path}: missing record {exc}") from None
    if config is None:
        config = resolve_text(stored)
    if digest != config.digest():
        raise DigestMismatch(f"{path}: checkpoint was written under a different configuration")
    state = new_state(config)
    try:
        for name in state.pair.online.arrays:
            state.pair.online.arrays[name] = arrays[f"online.{name}"].copy()
            state.pair.momentum.arrays[name] = arrays[f"momentum.{name}"].copy()
            if f"velocity.{name}" in arrays:
                state.velocity[name] = arrays[f"velocity.{name}"].copy()
        for level in LEVELS:
            cursor, fill = arrays[f"bank.{level}.state"]
            state.banks[level] = NegativeBank(arrays[f"bank.{level}.storage"].copy(), level,
                                              int(cursor), int(fill))
    except KeyError as exc:
        raise IoError(f"{path}: missing record {exc}") from None
    state.iteration = iteration
    return state


def resolve_text(text: str) -> TrainConfig:
    pairs = [line for line in text.splitlines() if line.strip()]
    return TrainConfig(**parse_pairs(pairs))


# ---------------------------------------------------------------------------
# data

class SyntheticStream:
    """Infinite stream of rendered strips, item ``i`` depending only on (seed, i)."""

    def __init__(self, config: TrainConfig, stream: int = STREAM_DATA):
        self.data = config.data_config()
        self.seed = derive_seed(config.seed, stream)
        self.workers = config.workers

    def batch(self, iteration: int, size: int) -> list[TextStrip]:
        return generate_strips(self.data, self.seed, size, iteration * size, self.workers)


class ListSource:
    """Fixed list of strips consumed in order; raises DataExhausted at the end."""

    def __init__(self, strips: Sequence[TextStrip]):
        self.strips = list(strips)

    def batch(self, iteration: int, size: int) -> list[TextStrip]:
        start = iteration * size
        if start + size > len(self.strips):
            raise DataExhausted(f"need strips {start}..{start + size - 1}, only {len(self.strips)} available")
        return self.strips[start:start + size]


# ---------------------------------------------------------------------------
# one iteration

def _features(leaves, momentum_leaves, x_q, x_k, x_reg, record, cfg: TrainConfig, needed_levels):
    enc = cfg.encoder_config()
    seq_q = encode(leaves, x_q, enc)
    seq_k = encode(momentum_leaves, x_k, enc)
    seq_reg = None
    if record is not None:
        seq_reg = permute.unshuffle_features(encode(leaves, x_reg, enc), record)
    inputs = {}
    for level in needed_levels:
        q = predict_level(leaves, seq_q, level, enc)
        p = predict_level(momentum_leaves, seq_k, level, enc).data
        q_reg = mask = None
        if seq_reg is not None:
            q_reg = predict_level(leaves, seq_reg, level, enc)
            if level == "frame":
                mask = record.frame_mask(cfg.frames).ravel()
        inputs[level] = LevelInputs(q, p, q_reg, mask)
    return inputs


def train_step(state: TrainState, strips: Sequence[TextStrip], hooks: Sequence[Callable] = ()) -> dict:
    """Run one optimisation step in place; returns the metrics record."""
    cfg = state.config
    it = state.iteration
    toggles = cfg.toggles()
    t0 = time.perf_counter()
    B = len(strips)
    aug = cfg.augment_config()
    x_q = np.stack([augment(s, aug, derive_seed(cfg.seed, STREAM_AUG, it, i, 0)) for i, s in enumerate(strips)])
    x_k = np.stack([augment(s, aug, derive_seed(cfg.seed, STREAM_AUG, it, i, 1)) for i, s in enumerate(strips)])

    x_reg = record = None
    if toggles.reg:
        grouped = (B // cfg.perm_group) * cfg.perm_group
        if grouped:
            division = permute.divide(x_q[:grouped], cfg.perm_patches, cfg.division_strategy)
            x_reg, record = permute.shuffle_groups(division, cfg.perm_group,
                                                   derive_seed(cfg.seed, STREAM_PERM, it))

    used = banks_used(toggles)
    needed = set(toggles.active_levels())
    if toggles.con:
        needed |= {"frame", "subword", "word"}
    needed = [level for level in LEVELS if level in needed]

    leaves = state.pair.online.leaves(trainable=True)
    momentum_leaves = state.pair.momentum.leaves(trainable=False)
    inputs = _features(leaves, momentum_leaves, x_q, x_k, x_reg, record, cfg, needed)

    snapshots = {level: state.banks[level].as_negatives() for level in used}
    loss, parts = total_loss(inputs, snapshots, cfg.loss_config(), toggles)
    for hook in hooks:
        hook("loss", {"iteration": it, "snapshots": snapshots, "parts": parts})
    if not all(np.isfinite(v) for v in parts.values()):
        raise NonFiniteLoss(it, derive_seed(cfg.seed, STREAM_DATA), parts)

    loss.backward()
    grads = {name: leaf.grad for name, leaf in leaves.items()}
    grad_norm = float(np.sqrt(np.sum([np.sum(g.astype(np.float64) ** 2) for g in grads.values()])))
    sgd_step(state.pair.online.arrays, grads, cfg.lr, cfg.weight_decay, cfg.sgd_momentum, state.velocity)
    momentum_update(state.pair)

    for level in used:
        keys = inputs[level].p
        state.banks[level].enqueue_dequeue(keys)
        for hook in hooks:
            hook("enqueue", {"iteration": it, "level": level, "keys": keys})

    state.iteration += 1
    record_ = {"iteration": state.iteration}
    record_.update({k: parts[k] for k in parts})
    record_["grad_norm"] = grad_norm
    record_["bank_fill"] = {level: state.banks[level].fill for level in used}
    record_["banks_touched"] = list(used)
    record_["wall_time"] = time.perf_counter() - t0
    return record_


# ---------------------------------------------------------------------------
# driver

@dataclass
class PretrainResult:
    state: TrainState
    metrics: list
    checkpoints: list


def checkpoint_name(iteration: int) -> str:
    return f"ckpt_{iteration:06d}.rcl"


def pretrain(config: TrainConfig, out_dir=None, source=None, resume=None,
             hooks: Sequence[Callable] = (), until: int | None = None) -> PretrainResult:
    """Train from scratch (or ``resume`` checkpoint) up to ``config.iterations``.

    With ``out_dir``, metrics go to ``metrics.jsonl`` (one JSON object per
    iteration), checkpoints every ``checkpoint_every`` iterations and at the
    end, and the resolved config to ``config.txt``.
    """
    state = load_checkpoint(resume, config) if resume else new_state(config)
    source = source or SyntheticStream(config)
    stop = config.iterations if until is None else until
    out = Path(out_dir) if out_dir else None
    metrics, checkpoints = [], []
    fh = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(config.to_text())
        fh = open(out / "metrics.jsonl", "a" if resume else "w")
    try:
        while state.iteration < stop:
            strips = source.batch(state.iteration, config.batch_size)
            try:
                rec = train_step(state, strips, hooks)
            except NonFiniteLoss as exc:
                if out:
                    (out / f"nonfinite_{exc.iteration:06d}.json").write_text(json.dumps(
                        {"iteration": exc.iteration, "batch_seed": exc.batch_seed, "terms": exc.terms,
                         "words": [s.text for s in strips], "strip_seeds": [s.seed for s in strips]}))
                raise
            metrics.append(rec)
            if fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if config.progress:
                print(f"\rit {rec['iteration']:6d}  loss {rec['total']:.4f}", end="", file=sys.stderr)
            every = config.checkpoint_every
            if out and every and state.iteration % every == 0:
                path = out / checkpoint_name(state.iteration)
                save_checkpoint(path, state)
                checkpoints.append(path)
        if out and (not checkpoints or checkpoints[-1].name != checkpoint_name(state.iteration)):
            path = out / checkpoint_name(state.iteration)
            save_checkpoint(path, state)
            checkpoints.append(path)
    finally:
        if fh:
            fh.close()
        if config.progress:
            print(file=sys.stderr)
    return PretrainResult(state, metrics, checkpoints)


def smoothed(values, window: int = 50) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)
