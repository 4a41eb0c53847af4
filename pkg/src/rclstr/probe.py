"""Frame-level linear probe on top of an encoder, evaluation and embedding export.

Class 0 is BLANK; class ``k + 1`` is ``alphabet[k]``. Features are the
encoder's sequence output (F per frame), standardised with statistics of
the probe's training set before the affine map.
"""

from __future__ import annotations

import csv
import io
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ndiff as nd
from . import store
from .config import TrainConfig
from .encoder import EncoderConfig, EncoderParams, encode, predict_level
from .errors import CheckpointError, ConfigError, IoError
from .textgen import BLANK, TextStrip, collapse, derive_seed, frame_labels, generate_strips
from .train import (STREAM_PROBE_EVAL, STREAM_PROBE_INIT, STREAM_PROBE_TRAIN, load_encoder,
                    sgd_step)

MODES = ("frozen", "finetune")
CHUNK = 256


@dataclass
class ProbeParams:
    weight: np.ndarray  # (F, C + 1)
    bias: np.ndarray  # (C + 1,)
    mean: np.ndarray  # (F,)
    scale: np.ndarray  # (F,)
    alphabet: str
    # set in finetune mode: the encoder the probe was trained with
    encoder: EncoderParams | None = None

    @property
    def classes(self) -> int:
        return self.weight.shape[1]

    def __post_init__(self):
        if self.weight.shape[1] != len(self.alphabet) + 1:
            raise ConfigError(f"probe has {self.weight.shape[1]} outputs for alphabet of {len(self.alphabet)} + blank")


@dataclass
class EvalReport:
    frame_accuracy: float
    word_accuracy: float
    frames: int
    words: int
    confusion: np.ndarray  # rows: truth, columns: prediction
    alphabet: str
    digest: str = ""
    checkpoint: str = ""
    correct_frames: int = 0
    correct_words: int = 0
    extra: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"frame_accuracy = {self.frame_accuracy!r}",
                 f"word_accuracy = {self.word_accuracy!r}",
                 f"frames = {self.frames}",
                 f"correct_frames = {self.correct_frames}",
                 f"words = {self.words}",
                 f"correct_words = {self.correct_words}",
                 f"config_digest = {self.digest}",
                 f"checkpoint = {self.checkpoint}"]
        lines += [f"{k} = {v}" for k, v in self.extra.items()]
        names = ["BLANK"] + list(self.alphabet)
        lines.append("confusion = truth\\pred " + " ".join(names))
        for name, row in zip(names, self.confusion):
            lines.append(f"confusion.{name} = " + " ".join(str(int(x)) for x in row))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        try:
            Path(path).write_text(self.to_text())
        except OSError as exc:
            raise IoError(f"{path}: {exc}") from None


def class_index(alphabet: str) -> dict:
    table = {BLANK: 0}
    table.update({ch: i + 1 for i, ch in enumerate(alphabet)})
    return table


def targets(strips: Sequence[TextStrip], alphabet: str, frames: int) -> np.ndarray:
    """(n, T) integer class per frame."""
    table = class_index(alphabet)
    out = np.zeros((len(strips), frames), dtype=np.int64)
    for i, s in enumerate(strips):
        try:
            out[i] = [table[c] for c in frame_labels(s, frames)]
        except KeyError as exc:
            raise ConfigError(f"strip text {s.text!r} uses symbol {exc} outside the alphabet") from None
    return out


def decode(classes: np.ndarray, alphabet: str) -> str:
    symbols = [BLANK] + list(alphabet)
    return collapse([symbols[int(c)] for c in classes])


def _pixels(strips) -> np.ndarray:
    return np.stack([s.pixels for s in strips]).astype(np.float32)


def sequence_features(encoder: EncoderParams, pixels: np.ndarray) -> np.ndarray:
    """(n, T, F) frame features, computed in chunks without a tape."""
    if len(pixels) == 0:
        return np.zeros((0, encoder.config.frames, encoder.config.features), dtype=np.float32)
    leaves = encoder.leaves(trainable=False)
    parts = [encode(leaves, pixels[i:i + CHUNK], encoder.config).data.transpose(0, 2, 1)
             for i in range(0, len(pixels), CHUNK)]
    return np.concatenate(parts).astype(np.float32)


def probe_strips(config: TrainConfig, split: str) -> list[TextStrip]:
    """Labelled strips of the ``train`` or ``eval`` split; the two seed streams are disjoint."""
    if split == "train":
        stream, count = STREAM_PROBE_TRAIN, config.probe_train_strips
    elif split == "eval":
        stream, count = STREAM_PROBE_EVAL, config.probe_eval_strips
    else:
        raise ConfigError(f"unknown split {split!r}")
    return generate_strips(config.data_config(), derive_seed(config.seed, stream), count,
                           workers=config.workers)


def _as_encoder(encoder) -> EncoderParams:
    if isinstance(encoder, EncoderParams):
        return encoder
    try:
        return load_encoder(encoder)
    except IoError as exc:
        raise CheckpointError(str(exc)) from None


def _logits(feats, weight, bias, mean, scale):
    z = nd.mul(nd.sub(feats, mean), scale)
    return nd.add(nd.matmul(z, weight), bias)


def _xent(logits, onehot: np.ndarray):
    logp = nd.log_softmax(logits, axis=1)
    return nd.scale(nd.sum(nd.mul(logp, onehot)), -1.0 / onehot.shape[0])


def train_probe(encoder, strips: Sequence[TextStrip], config: TrainConfig, mode: str | None = None,
                labels_fraction: float | None = None) -> ProbeParams:
    """Fit the per-frame classifier by minibatch SGD on cross-entropy.

    ``frozen`` precomputes features once and only the probe is in the
    optimiser. ``finetune`` trains encoder and probe together; the
    encoder passed in is not modified (a trained copy is returned on the
    probe).
    """
    mode = mode or config.probe_mode
    fraction = config.labels_fraction if labels_fraction is None else labels_fraction
    if mode not in MODES:
        raise ConfigError(f"probe mode must be one of {MODES}, got {mode!r}")
    if not 0 < fraction <= 1:
        raise ConfigError(f"labels fraction {fraction} outside (0, 1]")
    encoder = _as_encoder(encoder)
    enc = encoder.config
    used = list(strips)[:max(1, int(round(fraction * len(strips))))]
    if not strips:
        raise ConfigError("no labelled strips for the probe")
    labels = targets(used, config.alphabet, enc.frames)
    pixels = _pixels(used)
    C = len(config.alphabet) + 1
    F = enc.features

    feats = sequence_features(encoder, pixels)
    flat = feats.reshape(-1, F).astype(np.float64)
    mean = flat.mean(axis=0).astype(np.float32)
    scale = (1.0 / np.maximum(flat.std(axis=0), 1e-6)).astype(np.float32)

    params = {"weight": np.zeros((F, C), dtype=np.float32), "bias": np.zeros(C, dtype=np.float32)}
    tuned = encoder.copy() if mode == "finetune" else None
    if tuned is not None:
        params.update({f"enc.{k}": v for k, v in tuned.arrays.items()})
    velocity: dict = {}
    rng = np.random.default_rng(derive_seed(config.seed, STREAM_PROBE_INIT))
    eye = np.eye(C, dtype=np.float32)
    n = len(used)
    batch = min(config.probe_batch, n)
    for _ in range(config.probe_iterations):
        idx = np.sort(rng.choice(n, size=batch, replace=False))
        w, b = nd.parameter(params["weight"]), nd.parameter(params["bias"])
        leaves = {"weight": w, "bias": b}
        if tuned is None:
            x = feats[idx].reshape(-1, F)
        else:
            enc_leaves = {k: nd.parameter(params[f"enc.{k}"]) for k in tuned.arrays}
            leaves.update({f"enc.{k}": v for k, v in enc_leaves.items()})
            seq = encode(enc_leaves, pixels[idx], enc)
            x = nd.reshape(nd.transpose(seq, (0, 2, 1)), (batch * enc.frames, F))
        loss = _xent(_logits(x, w, b, mean, scale), eye[labels[idx].ravel()])
        loss.backward()
        grads = {k: v.grad for k, v in leaves.items()}
        sgd_step(params, grads, config.probe_lr, config.weight_decay, config.sgd_momentum, velocity)
    if tuned is not None:
        for k in tuned.arrays:
            tuned.arrays[k] = params[f"enc.{k}"]
    return ProbeParams(params["weight"], params["bias"], mean, scale, config.alphabet, tuned)


def predict(encoder, probe: ProbeParams, strips: Sequence[TextStrip]) -> np.ndarray:
    """(n, T) predicted classes."""
    encoder = probe.encoder if probe.encoder is not None else _as_encoder(encoder)
    T = encoder.config.frames
    if not strips:
        return np.zeros((0, T), dtype=np.int64)
    feats = sequence_features(encoder, _pixels(strips))
    z = (feats - probe.mean) * probe.scale
    logits = z @ probe.weight + probe.bias
    return np.argmax(logits, axis=-1)


def evaluate(encoder, probe: ProbeParams, strips: Sequence[TextStrip], digest: str = "",
             checkpoint: str = "") -> EvalReport:
    """Frame and word accuracy; an empty set gives zero totals and zero accuracies."""
    enc_params = probe.encoder if probe.encoder is not None else _as_encoder(encoder)
    C = probe.classes
    confusion = np.zeros((C, C), dtype=np.int64)
    if not strips:
        return EvalReport(0.0, 0.0, 0, 0, confusion, probe.alphabet, digest, checkpoint)
    pred = predict(enc_params, probe, strips)
    truth = targets(strips, probe.alphabet, enc_params.config.frames)
    np.add.at(confusion, (truth.ravel(), pred.ravel()), 1)
    correct_frames = int((pred == truth).sum())
    correct_words = sum(decode(p, probe.alphabet) == s.text for p, s in zip(pred, strips))
    return EvalReport(correct_frames / truth.size, correct_words / len(strips), int(truth.size),
                      len(strips), confusion, probe.alphabet, digest, checkpoint,
                      correct_frames, int(correct_words))


# ---------------------------------------------------------------------------
# persistence

def save_probe(path, probe: ProbeParams) -> None:
    arrays = OrderedDict()
    arrays["probe.weight"] = probe.weight
    arrays["probe.bias"] = probe.bias
    arrays["probe.mean"] = probe.mean
    arrays["probe.scale"] = probe.scale
    arrays["probe.alphabet"] = np.frombuffer(probe.alphabet.encode(), dtype=np.uint8).astype(np.float32)
    if probe.encoder is not None:
        c = probe.encoder.config
        arrays["encoder.geometry"] = np.array([c.height, c.width, c.frames, c.subword_bins], dtype=np.float32)
        for k, v in probe.encoder.arrays.items():
            arrays[f"encoder.{k}"] = v
    store.write_arrays(path, arrays)


def load_probe(path) -> ProbeParams:
    arrays = store.read_arrays(path)
    try:
        alphabet = bytes(arrays["probe.alphabet"].astype(np.uint8)).decode()
        encoder = None
        if "encoder.geometry" in arrays:
            H, W, T, S = (int(x) for x in arrays["encoder.geometry"])
            enc = OrderedDict((k[len("encoder."):], v) for k, v in arrays.items()
                              if k.startswith("encoder.") and k != "encoder.geometry")
            F, D = enc["pred.frame.w"].shape
            c1, c2 = enc["conv1.w"].shape[0], enc["conv2.w"].shape[0]
            encoder = EncoderParams(EncoderConfig(H, W, F, T, D, (c1, c2), S), enc)
        return ProbeParams(arrays["probe.weight"], arrays["probe.bias"], arrays["probe.mean"],
                           arrays["probe.scale"], alphabet, encoder)
    except KeyError as exc:
        raise IoError(f"{path}: missing record {exc}") from None


def export_embeddings(encoder, strips: Sequence[TextStrip], path, alphabet: str | None = None) -> int:
    """Write unit-norm frame atoms as CSV; returns the number of rows.

    Columns: strip, frame, label (BLANK for gaps), then the D values.
    """
    encoder = _as_encoder(encoder)
    cfg = encoder.config
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["strip", "frame", "label"] + [f"f{j}" for j in range(cfg.dim)])
    rows = 0
    pixels = _pixels(strips) if strips else np.zeros((0, cfg.height, cfg.width), np.float32)
    leaves = encoder.leaves(trainable=False)
    for start in range(0, len(pixels), CHUNK):
        seq = encode(leaves, pixels[start:start + CHUNK], cfg)
        atoms = predict_level(leaves, seq, "frame", cfg).data.reshape(-1, cfg.frames, cfg.dim)
        for i, per_frame in enumerate(atoms):
            strip = strips[start + i]
            labels = frame_labels(strip, cfg.frames)
            for t, vec in enumerate(per_frame):
                writer.writerow([start + i, t, labels[t] or "BLANK"] + [f"{v:.8e}" for v in vec])
                rows += 1
    try:
        Path(path).write_text(buf.getvalue())
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from None
    return rows
