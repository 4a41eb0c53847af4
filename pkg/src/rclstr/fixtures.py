"""Brute-force oracles and the golden fixture file.

The oracles use plain Python loops and ``math`` only, so they share no
code with the vectorised losses they check. ``build_fixtures`` writes one
block per fixture::

    [name]
    provenance = TRIVIAL | DERIVED
    input = <description>
    oracle = <how the value was obtained>      (DERIVED only)
    expected = <value or space-separated values>

Regenerate with ``python -m rclstr.fixtures tests/fixtures/golden.txt``;
the output is byte-identical across runs.
"""

from __future__ import annotations

import math
import sys
from pathlib import Path

import numpy as np

from . import ndiff as nd
from . import permute

# ---------------------------------------------------------------------------
# oracles


def _dot(a, b) -> float:
    s = 0.0
    for x, y in zip(a, b):
        s += float(x) * float(y)
    return s


def _log_sum_exp(values) -> float:
    top = max(values)
    return top + math.log(sum(math.exp(v - top) for v in values))


def oracle_info_nce(q, p, bank, tau) -> float:
    total = 0.0
    for qi, pi in zip(q, p):
        pos = _dot(qi, pi) / tau
        logits = [pos] + [_dot(qi, n) / tau for n in bank]
        total += _log_sum_exp(logits) - pos
    return total / len(q)


def _softmax_over_bank(v, bank, tau):
    logits = [_dot(v, n) / tau for n in bank]
    z = _log_sum_exp(logits)
    return [math.exp(x - z) for x in logits], [x - z for x in logits]


def oracle_symmetric_kl(q, p, bank, tau) -> float:
    total = 0.0
    for qi, pi in zip(q, p):
        Q, logQ = _softmax_over_bank(qi, bank, tau)
        P, logP = _softmax_over_bank(pi, bank, tau)
        kl_pq = sum(P[k] * (logP[k] - logQ[k]) for k in range(len(bank)))
        kl_qp = sum(Q[k] * (logQ[k] - logP[k]) for k in range(len(bank)))
        total += 0.5 * kl_pq + 0.5 * kl_qp
    return total / len(q)


def oracle_relational(q, p, bank, tau_info, tau_kl, alpha) -> float:
    return oracle_info_nce(q, p, bank, tau_info) + alpha * oracle_symmetric_kl(q, p, bank, tau_kl)


def oracle_regularized(q, q_reg, mask, p, bank, tau_info, tau_kl, alpha) -> float:
    keep = [i for i in range(len(q_reg)) if mask is None or mask[i]]
    second = oracle_relational([q_reg[i] for i in keep], [p[i] for i in keep], bank, tau_info, tau_kl, alpha)
    return oracle_relational(q, p, bank, tau_info, tau_kl, alpha) + second


def oracle_bin_of(t: int, length: int, bins: int) -> int:
    for b in range(bins):
        if (b * length) // bins <= t < ((b + 1) * length) // bins:
            return b
    raise ValueError("frame outside every bin")


def _cross_term(q, p, bank, kind, tau_info, tau_kl, alpha):
    if kind == "kl_only":
        return oracle_symmetric_kl(q, p, bank, tau_kl)
    if kind == "info_nce":
        return oracle_info_nce(q, p, bank, tau_info)
    return oracle_relational(q, p, bank, tau_info, tau_kl, alpha)


def oracle_cross_hierarchy(frame_q, subword_q, subword_p, word_p, bank_sub, bank_word, batch,
                           kind, tau_info, tau_kl, alpha):
    T = len(frame_q) // batch
    S = len(subword_p) // batch
    f2s_p, s2w_p = [], []
    for b in range(batch):
        for t in range(T):
            f2s_p.append(subword_p[b * S + oracle_bin_of(t, T, S)])
    for b in range(batch):
        for s in range(S):
            s2w_p.append(word_p[b])
    return (_cross_term(frame_q, f2s_p, bank_sub, kind, tau_info, tau_kl, alpha),
            _cross_term(subword_q, s2w_p, bank_word, kind, tau_info, tau_kl, alpha))


def oracle_unshuffle_blocks(features, pi, N, M):
    """Inverse of the patch shuffle on (B, C, T) features by explicit index loops.

    Slot ``s`` of group ``g`` received original patch ``pi[g][s]``.
    """
    B, C, T = features.shape
    L = T // N
    out = np.empty_like(features)
    for g in range(len(pi)):
        for s in range(N * M):
            src = pi[g][s]
            dst_img, dst_blk = g * M + src // N, src % N
            img, blk = g * M + s // N, s % N
            for t in range(L):
                out[dst_img, :, dst_blk * L + t] = features[img, :, blk * L + t]
    return out


def central_difference(f, x, h=1e-6):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for j in range(x.size):
        up, down = x.copy(), x.copy()
        up.reshape(-1)[j] += h
        down.reshape(-1)[j] -= h
        g.reshape(-1)[j] = (f(up) - f(down)) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# instances


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def loss_instance(seed: int, A=None, K=None, D=None):
    """Random unit-norm (q, p, bank) with A <= 8, K <= 16, D <= 8 unless given."""
    rng = np.random.default_rng(seed)
    A = A or int(rng.integers(1, 9))
    K = K or int(rng.integers(1, 17))
    D = D or int(rng.integers(2, 9))
    return unit_rows(rng, A, D), unit_rows(rng, A, D), unit_rows(rng, K, D)


def hierarchy_instance(seed: int, batch=2, frames=8, bins=4, dim=4, K=6):
    rng = np.random.default_rng(seed)
    return {
        "frame_q": unit_rows(rng, batch * frames, dim),
        "subword_q": unit_rows(rng, batch * bins, dim),
        "subword_p": unit_rows(rng, batch * bins, dim),
        "word_p": unit_rows(rng, batch, dim),
        "bank_sub": unit_rows(rng, K, dim),
        "bank_word": unit_rows(rng, K, dim),
        "batch": batch,
    }


# ---------------------------------------------------------------------------
# fixture file


def _fmt(v) -> str:
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(_fmt(x) for x in np.asarray(v).ravel().tolist())
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _block(name, provenance, description, expected, oracle=None) -> str:
    lines = [f"[{name}]", f"provenance = {provenance}", f"input = {description}"]
    if oracle:
        lines.append(f"oracle = {oracle}")
    lines.append(f"expected = {_fmt(expected)}")
    return "\n".join(lines) + "\n"


TAU_INFO, TAU_KL, ALPHA = 0.07, 0.1, 1.0


def build_fixtures(seed: int = 0) -> str:
    e = np.eye(3)
    blocks = [
        _block("info_nce.orthogonal_tau1", "TRIVIAL", "q=p=e1, bank={e2,e3}, tau=1",
               math.log(1 + 2 / math.e)),
        _block("info_nce.orthogonal_tau0.5", "TRIVIAL", "q=p=e1, bank={e2,e3}, tau=0.5",
               math.log(1 + 2 * math.exp(-2))),
        _block("symmetric_kl.two_point", "DERIVED", "q=e1, p=e2, bank={e1,e2}, tau=1",
               oracle_symmetric_kl([e[0]], [e[1]], [e[0], e[1]], 1.0),
               "two-point enumeration; equals tanh(1/2)"),
    ]
    q, p, bank = loss_instance(seed, A=4, K=8, D=4)
    desc = f"loss_instance(seed={seed}, A=4, K=8, D=4)"
    blocks.append(_block("info_nce.random", "DERIVED", f"{desc}, tau={TAU_INFO}",
                         oracle_info_nce(q, p, bank, TAU_INFO), "direct double-loop summation"))
    blocks.append(_block("symmetric_kl.random", "DERIVED", f"{desc}, tau={TAU_KL}",
                         oracle_symmetric_kl(q, p, bank, TAU_KL), "direct double-loop summation"))
    blocks.append(_block("relational.random", "DERIVED", f"{desc}, tau_info={TAU_INFO}, tau_kl={TAU_KL}, alpha={ALPHA}",
                         oracle_relational(q, p, bank, TAU_INFO, TAU_KL, ALPHA), "sum of the two oracles"))
    rng = np.random.default_rng([seed, 1])
    q_reg = unit_rows(rng, 4, 4)
    mask = [True, False, True, True]
    blocks.append(_block("regularized.random", "DERIVED",
                         f"{desc}; q_reg=unit_rows(default_rng([{seed}, 1]), 4, 4); mask=1 0 1 1",
                         oracle_regularized(q, q_reg, mask, p, bank, TAU_INFO, TAU_KL, ALPHA),
                         "two relational oracles, second over masked rows"))
    h = hierarchy_instance(seed)
    for kind in ("kl_only", "relational"):
        f2s, s2w = oracle_cross_hierarchy(h["frame_q"], h["subword_q"], h["subword_p"], h["word_p"],
                                          h["bank_sub"], h["bank_word"], h["batch"],
                                          kind, TAU_INFO, TAU_KL, ALPHA)
        blocks.append(_block(f"cross_hierarchy.{kind}", "DERIVED",
                             f"hierarchy_instance(seed={seed}), B=2, T=8, bins=4, D=4, K=6",
                             [f2s, s2w], "per-image loop over frames and bins; values are f2s s2w"))
    for T, bins in ((16, 4), (26, 4), (7, 3), (5, 4), (4, 4)):
        owner = [oracle_bin_of(t, T, bins) for t in range(T)]
        blocks.append(_block(f"bins.T{T}.S{bins}", "DERIVED", f"frame -> bin owner, T={T}, bins={bins}",
                             owner, "floor(b*T/bins) boundary enumeration"))
    for N, M in ((1, 2), (2, 2), (4, 2), (2, 4)):
        patches = np.zeros((2 * M, N, 1, 1))
        _, record = permute.shuffle_groups(patches, M, seed)
        table = record.global_pi()
        inverse = [0] * len(table)
        for slot, src in enumerate(table):
            inverse[src] = slot
        blocks.append(_block(f"permutation.N{N}.M{M}", "DERIVED",
                             f"shuffle_groups of {2 * M} images x {N} patches, M={M}, seed={seed}; "
                             "first row: slot -> source patch, second row: inverse",
                             list(table) + inverse, "inverse by explicit index loop"))
    def f(x):
        return oracle_info_nce(x, p, bank, 0.5)
    grad = central_difference(f, q)
    blocks.append(_block("info_nce.grad_q", "DERIVED", f"{desc}, tau=0.5; d loss / d q, row-major",
                         grad, "central differences of the summation oracle, h=1e-6"))
    header = (f"# golden fixtures, seed {seed}\n"
              "# regenerate: python -m rclstr.fixtures <path>\n\n")
    return header + "\n".join(blocks)


def write_fixtures(path, seed: int = 0) -> None:
    with nd.precision(np.float64):
        text = build_fixtures(seed)
    Path(path).write_text(text)


def read_fixtures(path) -> dict:
    out, current = {}, None
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = out.setdefault(line[1:-1], {})
        elif current is not None and " = " in line:
            key, value = line.split(" = ", 1)
            current[key] = value
    for block in out.values():
        block["values"] = [float(x) for x in block["expected"].split()]
    return out


if __name__ == "__main__":
    write_fixtures(sys.argv[1] if len(sys.argv) > 1 else "golden.txt")
