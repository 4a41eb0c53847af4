"""Contrastive objectives over unit-norm atoms and a bank of negatives.

Every loss takes queries ``q`` (A x D), positives ``p`` (A x D) and negatives
``bank`` (K x D) and reduces over atoms with the mean. ``q`` and ``p`` may
be DiffArrays or plain arrays; the bank never carries gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndiff as nd
from .errors import ConfigError, DomainError, MaskAllFalse, ShapeMismatch

CROSS_KINDS = ("kl_only", "relational", "info_nce")


@dataclass(frozen=True)
class LossConfig:
    tau_info: float = 0.07
    tau_kl: float = 0.1
    alpha: float = 1.0
    cross_hierarchy_loss_kind: str = "kl_only"
    subword_bins: int = 4

    def __post_init__(self):
        if not (self.tau_info > 0 and self.tau_kl > 0):
            raise ConfigError("temperatures must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.cross_hierarchy_loss_kind not in CROSS_KINDS:
            raise ConfigError(f"cross_hierarchy_loss_kind must be one of {CROSS_KINDS}")


@dataclass(frozen=True)
class Toggles:
    reg: bool = True
    hier: bool = True
    con: bool = True
    levels: tuple[str, ...] = ("frame", "subword", "word")

    def active_levels(self) -> tuple[str, ...]:
        return self.levels if self.hier else ("word",)

    def label(self) -> str:
        on = [name for name in ("reg", "hier", "con") if getattr(self, name)]
        return "+".join(on) if on else "baseline"


def _operands(q, p, bank):
    q = nd.as_array(q)
    p = nd.as_array(p, dtype=q.dtype)
    bank = np.asarray(bank.data if isinstance(bank, nd.DiffArray) else bank, dtype=q.dtype)
    if q.ndim != 2 or q.shape != p.shape:
        raise ShapeMismatch(f"q {q.shape} and p {p.shape} must both be A x D")
    if bank.ndim != 2 or bank.shape[1] != q.shape[1] or bank.shape[0] < 1:
        raise ShapeMismatch(f"bank {bank.shape} incompatible with atoms of dim {q.shape[1]}")
    return q, p, bank


def _check_tau(tau):
    if not tau > 0:
        raise DomainError(f"temperature must be positive, got {tau}")


def info_nce(q, p, bank, tau_info: float) -> nd.DiffArray:
    """Cross-entropy of the positive (logit 0) among 1 + K similarity logits."""
    _check_tau(tau_info)
    q, p, bank = _operands(q, p, bank)
    pos = nd.sum(nd.mul(q, p), axis=1, keepdims=True)
    neg = nd.matmul(q, bank.T)
    logits = nd.concat([pos, neg], axis=1)
    logp = nd.log_softmax(logits, axis=1, temperature=tau_info)
    return nd.scale(nd.mean(nd.take(logp, [0], axis=1)), -1.0)


def symmetric_kl(q, p, bank, tau_kl: float) -> nd.DiffArray:
    """Mean over atoms of 0.5 KL(P||Q) + 0.5 KL(Q||P).

    Q and P are the softmax distributions of q and p over the negatives only.
    Their sum equals 0.5 * sum((P - Q) * (log P - log Q)).
    """
    _check_tau(tau_kl)
    q, p, bank = _operands(q, p, bank)
    bt = bank.T
    log_q = nd.log_softmax(nd.matmul(q, bt), axis=1, temperature=tau_kl)
    log_p = nd.log_softmax(nd.matmul(p, bt), axis=1, temperature=tau_kl)
    diff = nd.mul(nd.sub(nd.exp(log_p), nd.exp(log_q)), nd.sub(log_p, log_q))
    per_atom = nd.sum(diff, axis=1)
    return nd.scale(nd.mean(per_atom), 0.5)


def relational(q, p, bank, cfg: LossConfig) -> nd.DiffArray:
    loss = info_nce(q, p, bank, cfg.tau_info)
    if cfg.alpha == 0:
        return loss
    return nd.add(loss, nd.scale(symmetric_kl(q, p, bank, cfg.tau_kl), cfg.alpha))


def _rows(x, mask):
    if mask is None:
        return x
    idx = np.flatnonzero(mask)
    if isinstance(x, nd.DiffArray):
        return nd.take(x, idx, axis=0)
    return np.asarray(x)[idx]


def regularized(q, q_reg, reg_mask, p, bank, cfg: LossConfig) -> nd.DiffArray:
    """Relational loss on the original queries plus on the un-shuffled ones.

    ``q_reg`` may cover only the leading atoms of ``q`` (images left out of
    the permutation groups); ``p`` is restricted to the same rows.
    ``reg_mask`` (bool, one per row of ``q_reg``) drops excluded atoms.
    """
    first = relational(q, p, bank, cfg)
    n = q_reg.shape[0]
    p_part = p[:n] if not isinstance(p, nd.DiffArray) else nd.take(p, np.arange(n), axis=0)
    if reg_mask is not None:
        reg_mask = np.asarray(reg_mask, dtype=bool).ravel()
        if reg_mask.shape[0] != n:
            raise ShapeMismatch(f"mask of {reg_mask.shape[0]} for {n} regularized atoms")
        if not reg_mask.any():
            raise MaskAllFalse("regularization mask excludes every atom")
        if reg_mask.all():
            reg_mask = None
    second = relational(_rows(q_reg, reg_mask), _rows(p_part, reg_mask), bank, cfg)
    return nd.add(first, second)


@dataclass
class LevelInputs:
    """Features of one level. Atoms are image-major: image b owns rows b*n .. b*n+n-1."""

    q: nd.DiffArray
    p: np.ndarray
    q_reg: nd.DiffArray | None = None
    reg_mask: np.ndarray | None = None


def level_loss(inputs: LevelInputs, bank, cfg: LossConfig, reg: bool) -> nd.DiffArray:
    if reg and inputs.q_reg is not None:
        return regularized(inputs.q, inputs.q_reg, inputs.reg_mask, inputs.p, bank, cfg)
    return relational(inputs.q, inputs.p, bank, cfg)


def hierarchical(level_inputs: dict, banks: dict, cfg: LossConfig,
                 levels=("frame", "subword", "word"), reg: bool = True) -> nd.DiffArray:
    total = None
    for level in levels:
        term = level_loss(level_inputs[level], banks[level], cfg, reg)
        total = term if total is None else nd.add(total, term)
    return total


def _cross(q, p, bank, cfg: LossConfig) -> nd.DiffArray:
    kind = cfg.cross_hierarchy_loss_kind
    if kind == "kl_only":
        return symmetric_kl(q, p, bank, cfg.tau_kl)
    if kind == "info_nce":
        return info_nce(q, p, bank, cfg.tau_info)
    return relational(q, p, bank, cfg)


def frame_to_bin(T: int, bins: int) -> np.ndarray:
    """Pooling bin that owns each frame (same edges as ``avgpool_seq``)."""
    edges = nd.bin_edges(T, bins)
    return np.repeat(np.arange(bins), np.diff(edges))


def upper_rows(batch: int, lower_per_image: int, upper_per_image: int) -> np.ndarray:
    """Row of the upper-level positive paired with every lower-level atom."""
    local = frame_to_bin(lower_per_image, upper_per_image)
    return (np.arange(batch)[:, None] * upper_per_image + local[None, :]).ravel()


def cross_hierarchy(frame_q, subword_q, subword_p, word_p, banks: dict, cfg: LossConfig,
                    batch: int | None = None):
    """Frame-to-subword and subword-to-word consistency terms.

    Each lower atom is paired with the momentum-branch atom one level up
    that covers the same image region, and compared against that upper
    level's bank. Returns ``(L_f2s, L_s2w)``.
    """
    n_sub = subword_p.shape[0]
    n_word = word_p.shape[0]
    batch = batch or n_word
    S = n_sub // batch
    T = frame_q.shape[0] // batch
    f2s_p = np.asarray(subword_p)[upper_rows(batch, T, S)]
    s2w_p = np.asarray(word_p)[upper_rows(batch, S, 1)]
    f2s = _cross(frame_q, f2s_p, banks["subword"], cfg)
    s2w = _cross(subword_q, s2w_p, banks["word"], cfg)
    return f2s, s2w


TERM_ORDER = ("frame", "subword", "word", "f2s", "s2w")


def total_loss(level_inputs: dict, banks: dict, cfg: LossConfig, toggles: Toggles = Toggles()):
    """Sum of enabled terms and a breakdown dict of floats.

    reg off: each level uses the plain relational loss. hier off: only the
    word level. con off: no cross-hierarchy terms. Terms are added in
    ``TERM_ORDER``.
    """
    terms: dict[str, nd.DiffArray] = {}
    for level in toggles.active_levels():
        terms[level] = level_loss(level_inputs[level], banks[level], cfg, toggles.reg)
    if toggles.con:
        batch = level_inputs["word"].p.shape[0]
        terms["f2s"], terms["s2w"] = cross_hierarchy(
            level_inputs["frame"].q, level_inputs["subword"].q,
            level_inputs["subword"].p, level_inputs["word"].p, banks, cfg, batch)
    total = None
    for name in TERM_ORDER:
        if name in terms:
            total = terms[name] if total is None else nd.add(total, terms[name])
    breakdown = {name: float(t.data) for name, t in terms.items()}
    breakdown["total"] = float(total.data)
    return total, breakdown


def banks_used(toggles: Toggles) -> tuple[str, ...]:
    used = set(toggles.active_levels())
    if toggles.con:
        used |= {"subword", "word"}
    return tuple(level for level in ("frame", "subword", "word") if level in used)
