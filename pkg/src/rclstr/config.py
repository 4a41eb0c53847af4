"""Run configuration: one flat set of keys, read from ``key = value`` files.

Precedence is file < environment (``RCLSTR_<KEY>``) < explicit overrides.
Unknown keys and keys given without a value are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .encoder import EncoderConfig
from .errors import ConfigError
from .font import GLYPHS
from .losses import LossConfig, Toggles
from .permute import STRATEGIES
from .textgen import AugmentConfig, DataConfig, RenderConfig

ENV_PREFIX = "RCLSTR_"

# keys that change how long or how verbosely a run goes, not what it computes
RUN_LENGTH_KEYS = ("iterations", "checkpoint_every", "workers", "progress",
                   "probe_iterations", "probe_train_strips", "probe_eval_strips",
                   "probe_mode", "labels_fraction")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    iterations: int = 2000
    lr: float = 1e-2
    weight_decay: float = 1e-4
    sgd_momentum: float = 0.9
    encoder_momentum: float = 0.999
    # geometry
    height: int = 16
    width: int = 64
    features: int = 32
    frames: int = 16
    dim: int = 16
    conv1_channels: int = 8
    conv2_channels: int = 16
    # data
    alphabet: str = "ABCDEFGHIJ"
    min_word_length: int = 3
    max_word_length: int = 6
    glyph_advance: int = 8
    aug_prob: float = 0.5
    aug_contrast_min: float = 0.5
    aug_blur_max: float = 1.5
    aug_crop_max: float = 0.05
    aug_noise_std: float = 0.03
    # losses
    tau_info: float = 0.07
    tau_kl: float = 0.1
    alpha: float = 1.0
    cross_hierarchy_loss_kind: str = "kl_only"
    subword_bins: int = 4
    hierarchy_levels: str = "frame,subword,word"
    reg: bool = True
    hier: bool = True
    con: bool = True
    # relational regularization
    perm_patches: int = 2
    perm_group: int = 2
    division_strategy: str = "direct"
    # negatives
    bank_size: int = 512
    # bookkeeping
    checkpoint_every: int = 0
    workers: int = 1
    progress: bool = False
    # probe
    probe_mode: str = "frozen"
    probe_iterations: int = 2000
    probe_lr: float = 0.05
    probe_batch: int = 64
    probe_train_strips: int = 2000
    probe_eval_strips: int = 500
    labels_fraction: float = 1.0

    def __post_init__(self):
        positive = ("batch_size", "height", "width", "features", "frames", "dim",
                    "conv1_channels", "conv2_channels", "perm_patches", "perm_group",
                    "bank_size", "subword_bins", "glyph_advance", "probe_batch")
        for key in positive:
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.frames % self.perm_patches:
            raise ConfigError(f"frames={self.frames} must be divisible by perm_patches={self.perm_patches}")
        if self.width % self.perm_patches:
            raise ConfigError(f"width={self.width} must be divisible by perm_patches={self.perm_patches}")
        if self.division_strategy not in STRATEGIES:
            raise ConfigError(f"division_strategy must be one of {STRATEGIES}")
        if not 0 <= self.encoder_momentum <= 1:
            raise ConfigError("encoder_momentum must be in [0, 1]")
        if self.probe_mode not in ("frozen", "finetune"):
            raise ConfigError("probe_mode must be frozen or finetune")
        if not 0 < self.labels_fraction <= 1:
            raise ConfigError("labels_fraction must be in (0, 1]")
        for level in self.levels():
            if level not in ("frame", "subword", "word"):
                raise ConfigError(f"unknown hierarchy level {level!r}")
        # build the sub-configs once so their own checks run
        self.encoder_config()
        self.loss_config()
        self.augment_config()
        self.data_config()

    def levels(self) -> tuple[str, ...]:
        return tuple(x.strip() for x in self.hierarchy_levels.split(",") if x.strip())

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.height, self.width, self.features, self.frames, self.dim,
                             (self.conv1_channels, self.conv2_channels), self.subword_bins)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.tau_info, self.tau_kl, self.alpha,
                          self.cross_hierarchy_loss_kind, self.subword_bins)

    def toggles(self) -> Toggles:
        return Toggles(self.reg, self.hier, self.con, self.levels())

    def augment_config(self) -> AugmentConfig:
        p = self.aug_prob
        return AugmentConfig(contrast_range=(self.aug_contrast_min, 1.0),
                             blur_sigma_range=(min(0.5, self.aug_blur_max), self.aug_blur_max),
                             crop_fraction_range=(0.0, self.aug_crop_max),
                             noise_std=self.aug_noise_std,
                             p_contrast=p, p_blur=p, p_crop=p, p_noise=p)

    def data_config(self) -> DataConfig:
        render = RenderConfig(height=self.height, width=self.width,
                              advance=self.glyph_advance, frames=self.frames)
        for ch in self.alphabet:
            if ch not in GLYPHS:
                raise ConfigError(f"alphabet symbol {ch!r} has no glyph")
        if self.max_word_length > render.max_chars() or self.min_word_length < 1 \
                or self.max_word_length < self.min_word_length:
            raise ConfigError("word length range infeasible for the strip width")
        return DataConfig(self.alphabet, (self.min_word_length, self.max_word_length), render)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def digest(self) -> bytes:
        """SHA-256 over every key that affects the computed trajectory."""
        lines = [f"{k}={_format(v)}" for k, v in sorted(self.as_dict().items())
                 if k not in RUN_LENGTH_KEYS]
        return hashlib.sha256("\n".join(lines).encode()).digest()

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.as_dict().items())


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, raw: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    raw = raw.strip()
    if raw == "":
        raise ConfigError(f"missing value for config key {key!r}")
    kind = _TYPES[key]
    try:
        if kind in ("bool", bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for config key {key!r}") from None


def parse_pairs(pairs) -> dict:
    """``["key=value", ...]`` -> typed dict."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"missing value for config key {pair.strip()!r}")
        key, value = pair.split("=", 1)
        key = key.strip()
        out[key] = _coerce(key, value)
    return out


def read_config_file(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: missing value for config key {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        out[key] = _coerce(key, value)
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            out[key] = _coerce(key, value)
    return out


def resolve(path=None, overrides=(), environ=None, base: TrainConfig | None = None) -> TrainConfig:
    values = {}
    if path is not None:
        values.update(read_config_file(path))
    values.update(env_overrides(environ))
    values.update(parse_pairs(overrides))
    try:
        return dataclasses.replace(base or TrainConfig(), **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
