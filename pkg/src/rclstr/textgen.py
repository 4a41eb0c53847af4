"""Synthetic text strips: word sampling, rendering, augmentation and frame labels.

Strips are light-on-dark grayscale images in [0, 1]. The background never
exceeds ``RenderConfig.background`` so any brighter pixel is ink, and ink is
confined to the recorded glyph spans.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import font
from .errors import ConfigError, DoesNotFit, EmptyWord, IoError, VersionMismatch

BLANK = ""
DEFAULT_ALPHABET = "ABCDEFGHIJ"


def derive_seed(seed: int, *path: int) -> int:
    """Independent 64-bit seed for the item addressed by ``path``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(p) for p in path]])
    return int(ss.generate_state(1, np.uint64)[0])


def rng_for(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(p) for p in path]]))


@dataclass(frozen=True)
class RenderConfig:
    height: int = 16
    width: int = 64
    advance: int = 8
    # frame count whose centres the layout tries to hit (one per glyph, one per gap)
    frames: int = 16
    background: float = 0.15
    texture: float = 0.08
    ink_range: tuple[float, float] = (0.6, 1.0)
    vertical_jitter: int = 2
    glyph_rows: tuple[int, ...] = (7, 8, 9)

    def max_chars(self) -> int:
        return self.width // self.advance


@dataclass
class TextStrip:
    pixels: np.ndarray
    text: str
    glyph_spans: list[tuple[int, int]]
    seed: int

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True)
class AugmentConfig:
    contrast_range: tuple[float, float] = (0.5, 1.0)
    blur_sigma_range: tuple[float, float] = (0.5, 1.5)
    crop_fraction_range: tuple[float, float] = (0.0, 0.05)
    noise_std: float = 0.03
    p_contrast: float = 0.5
    p_blur: float = 0.5
    p_crop: float = 0.5
    p_noise: float = 0.5

    def __post_init__(self):
        lo, hi = self.contrast_range
        if not 0 <= lo <= hi <= 2:
            raise ConfigError(f"contrast_range {self.contrast_range} outside [0, 2]")
        lo, hi = self.blur_sigma_range
        if not 0 <= lo <= hi <= 5:
            raise ConfigError(f"blur_sigma_range {self.blur_sigma_range} outside [0, 5]")
        lo, hi = self.crop_fraction_range
        if not 0 <= lo <= hi < 0.5:
            raise ConfigError(f"crop_fraction_range {self.crop_fraction_range} outside [0, 0.5)")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        for name in ("p_contrast", "p_blur", "p_crop", "p_noise"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ConfigError(f"{name}={p} outside [0, 1]")


def sample_word(alphabet: Sequence[str], length_range: tuple[int, int], rng_seed: int,
                max_chars: int | None = None) -> str:
    lo, hi = length_range
    if not alphabet:
        raise ConfigError("empty alphabet")
    if lo < 1 or hi < lo or (max_chars is not None and hi > max_chars):
        raise ConfigError(f"length range {length_range} infeasible (max {max_chars} chars)")
    rng = np.random.default_rng(rng_seed)
    n = int(rng.integers(lo, hi + 1))
    idx = rng.integers(0, len(alphabet), size=n)
    return "".join(alphabet[i] for i in idx)


def _frame_centres(width: int, frames: int) -> np.ndarray:
    return (np.arange(frames) + 0.5) * width / frames


def _covers(centres, lo, hi) -> bool:
    return bool(np.any((centres >= lo) & (centres < hi)))


@lru_cache(maxsize=None)
def _start_candidates(n: int, width: int, advance: int, glyph_w: int, frames: int) -> tuple[int, ...]:
    """Left offsets where every glyph and every gap holds a frame centre."""
    centres = _frame_centres(width, frames)
    last_x0 = width - (n - 1) * advance - glyph_w
    good = []
    for x0 in range(last_x0 + 1):
        starts = [x0 + k * advance for k in range(n)]
        if all(_covers(centres, s, s + glyph_w) for s in starts) and \
                all(_covers(centres, s + glyph_w, t) for s, t in zip(starts, starts[1:])):
            good.append(x0)
    return tuple(good) or tuple(range(last_x0 + 1))


def render(word: str, config: RenderConfig = RenderConfig(), seed: int = 0) -> TextStrip:
    """Draw ``word`` left to right with one glyph per ``advance`` pixels."""
    if not word:
        raise EmptyWord("cannot render an empty word")
    H, W = config.height, config.width
    gw = font.GLYPH_COLS
    n = len(word)
    max_rows = max(config.glyph_rows)
    if (n - 1) * config.advance + gw > W or max_rows > H:
        raise DoesNotFit(f"{word!r} does not fit in {H}x{W} at advance {config.advance}")
    rng = np.random.default_rng(seed)

    candidates = _start_candidates(n, W, config.advance, gw, config.frames)
    x0 = candidates[int(rng.integers(len(candidates)))]

    pixels = config.background - config.texture * rng.random((H, W))
    spans = []
    for k, ch in enumerate(word):
        bitmap = font.glyph(ch)
        rows = config.glyph_rows[int(rng.integers(len(config.glyph_rows)))]
        if rows != bitmap.shape[0]:
            pick = (np.arange(rows) * bitmap.shape[0]) // rows
            bitmap = bitmap[pick]
        top = (H - rows) // 2 + int(rng.integers(-config.vertical_jitter, config.vertical_jitter + 1))
        top = min(max(top, 0), H - rows)
        ink = rng.uniform(*config.ink_range)
        x = x0 + k * config.advance
        region = pixels[top:top + rows, x:x + gw]
        region[bitmap] = ink
        spans.append((x, x + gw))
    return TextStrip(pixels=pixels.astype(np.float32), text=word, glyph_spans=spans, seed=int(seed))


# ---------------------------------------------------------------------------
# augmentation

def _contrast(img, rng, cfg):
    a = rng.uniform(*cfg.contrast_range)
    return 0.5 + a * (img - 0.5)


def _blur(img, rng, cfg):
    sigma = rng.uniform(*cfg.blur_sigma_range)
    if sigma <= 0:
        return img
    return ndimage.gaussian_filter(img, sigma, mode="nearest")


def _crop(img, rng, cfg):
    W = img.shape[1]
    left = int(round(rng.uniform(*cfg.crop_fraction_range) * W))
    right = int(round(rng.uniform(*cfg.crop_fraction_range) * W))
    kept = W - left - right
    src = left + (np.arange(W) + 0.5) * (kept / W) - 0.5
    src = np.clip(src, left, W - right - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, W - 1)
    frac = src - i0
    return img[:, i0] * (1 - frac) + img[:, i1] * frac


def _noise(img, rng, cfg):
    return img + rng.normal(0.0, cfg.noise_std, size=img.shape)


_AUG_OPS = (("p_contrast", _contrast), ("p_blur", _blur), ("p_crop", _crop), ("p_noise", _noise))


def augment(strip, config: AugmentConfig = AugmentConfig(), seed: int = 0) -> np.ndarray:
    """Apply a random non-empty subset of the enabled ops in random order.

    Each op is selected with its own probability; if none was picked, one
    enabled op is forced. With every probability at zero the input is
    returned unchanged.
    """
    pixels = strip.pixels if isinstance(strip, TextStrip) else np.asarray(strip)
    rng = np.random.default_rng(seed)
    enabled = [(getattr(config, name), fn) for name, fn in _AUG_OPS if getattr(config, name) > 0]
    img = pixels.astype(np.float64)
    if not enabled:
        return pixels.astype(np.float32).copy()
    chosen = [fn for p, fn in enabled if rng.random() < p]
    if not chosen:
        chosen = [enabled[int(rng.integers(len(enabled)))][1]]
    for k in rng.permutation(len(chosen)):
        img = chosen[k](img, rng, config)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# labels

def frame_labels(strip: TextStrip, T: int) -> list[str]:
    """Symbol under the centre of each of ``T`` equal-width frames, else BLANK."""
    if T < 1:
        raise ConfigError("T must be >= 1")
    W = strip.pixels.shape[1]
    labels = []
    for c in _frame_centres(W, T):
        label = BLANK
        for ch, (x0, x1) in zip(strip.text, strip.glyph_spans):
            if x0 <= c < x1:
                label = ch
                break
        labels.append(label)
    return labels


def collapse(frame_predictions: Sequence[str]) -> str:
    """Greedy readout: merge consecutive repeats, then drop BLANKs."""
    out = []
    prev = None
    for sym in frame_predictions:
        if sym != prev and sym != BLANK:
            out.append(sym)
        prev = sym
    return "".join(out)


# ---------------------------------------------------------------------------
# batches and the on-disk container

@dataclass(frozen=True)
class DataConfig:
    alphabet: str = DEFAULT_ALPHABET
    length_range: tuple[int, int] = (3, 6)
    render: RenderConfig = field(default_factory=RenderConfig)


def make_strip(data: DataConfig, seed: int, index: int) -> TextStrip:
    item_seed = derive_seed(seed, index)
    word = sample_word(data.alphabet, data.length_range, item_seed, data.render.max_chars())
    return render(word, data.render, derive_seed(item_seed, 1))


def generate_strips(data: DataConfig, seed: int, count: int, start: int = 0,
                    workers: int | None = None) -> list[TextStrip]:
    """Strips ``start .. start+count-1`` of the stream named by ``seed``.

    Each item depends only on (seed, index), so threaded generation returns
    exactly the sequential result.
    """
    indices = range(start, start + count)
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda i: make_strip(data, seed, i), indices))
    return [make_strip(data, seed, i) for i in indices]


MAGIC = b"RCLD"
VERSION = 1


def write_dataset(path, strips: Sequence[TextStrip]) -> None:
    """Little-endian container: header then one record per strip.

    Header: ``b"RCLD"``, version u16, H u32, W u32, count u32.
    Record: seed u64, word length u16, word bytes (ASCII), then per glyph
    x_start u32 and x_end u32, then H*W float32 pixels in row-major order.
    """
    if not strips:
        H = W = 0
    else:
        H, W = strips[0].pixels.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HIII", VERSION, H, W, len(strips)))
        for s in strips:
            if s.pixels.shape != (H, W):
                raise ValueError("all strips in a dataset must share one shape")
            word = s.text.encode("ascii")
            fh.write(struct.pack("<QH", s.seed & 0xFFFFFFFFFFFFFFFF, len(word)))
            fh.write(word)
            for x0, x1 in s.glyph_spans:
                fh.write(struct.pack("<II", x0, x1))
            fh.write(np.ascontiguousarray(s.pixels, dtype="<f4").tobytes())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(18)
    if len(head) < 18 or head[:4] != MAGIC:
        raise IoError(f"{path}: not an RCLD dataset")
    version, H, W, count = struct.unpack("<HIII", head[4:])
    if version != VERSION:
        raise VersionMismatch(f"{path}: dataset version {version}, expected {VERSION}")
    return {"version": version, "height": H, "width": W, "count": count}


def read_dataset(path) -> list[TextStrip]:
    raw = Path(path).read_bytes()
    header = read_header(path)
    H, W = header["height"], header["width"]
    pos = 18
    strips = []
    try:
        for _ in range(header["count"]):
            seed, n = struct.unpack_from("<QH", raw, pos)
            pos += 10
            word = raw[pos:pos + n].decode("ascii")
            if len(word) != n:
                raise struct.error("short word")
            pos += n
            spans = [struct.unpack_from("<II", raw, pos + 8 * k) for k in range(n)]
            pos += 8 * n
            nbytes = 4 * H * W
            if pos + nbytes > len(raw):
                raise struct.error("short pixel block")
            pixels = np.frombuffer(raw, dtype="<f4", count=H * W, offset=pos).reshape(H, W).astype(np.float32)
            pos += nbytes
            strips.append(TextStrip(pixels, word, [tuple(s) for s in spans], seed))
    except struct.error as exc:
        raise IoError(f"{path}: truncated dataset ({exc})") from None
    return strips
