"""Registry of differentiable operations and composite losses for gradient checking.

Each entry builds, for a shape index, a scalar function and its inputs.
Non-scalar ops are reduced with a fixed random weighting so every output
element contributes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from . import ndiff as nd

SHAPES_PER_CASE = 3
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    shape_index: int
    shapes: tuple
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.error < TOLERANCE)


def _weighted(out: nd.DiffArray, rng) -> nd.DiffArray:
    w = rng.normal(size=out.shape)
    return nd.sum(nd.mul(out, w))


def _unit(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _away_from_zero(rng, *shape):
    x = rng.uniform(0.2, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


# each builder: (rng, k) -> (f, inputs); f takes a list of DiffArrays

def _unary(op, shapes, make=None):
    def build(rng, k):
        x = (make or (lambda r, *s: r.normal(size=s)))(rng, *shapes[k])
        w = rng.normal(size=op(nd.as_array(x)).shape)
        return (lambda a: nd.sum(nd.mul(op(a[0]), w))), [x]
    return build


def _binary(op, shapes):
    def build(rng, k):
        sa, sb = shapes[k]
        a, b = rng.normal(size=sa), rng.normal(size=sb)
        w = rng.normal(size=op(nd.as_array(a), nd.as_array(b)).shape)
        return (lambda x: nd.sum(nd.mul(op(x[0], x[1]), w))), [a, b]
    return build


def _conv2d(rng, k):
    (B, C, H, W), (O, kh, kw), pad = [((2, 1, 5, 6), (2, 3, 3), 1), ((1, 2, 4, 5), (3, 2, 3), 0),
                                      ((2, 2, 6, 4), (2, 3, 1), (1, 0))][k]
    x, ker, bias = rng.normal(size=(B, C, H, W)), rng.normal(size=(O, C, kh, kw)), rng.normal(size=O)
    w = rng.normal(size=nd.conv2d(x, ker, bias, padding=pad).shape)
    return (lambda a: nd.sum(nd.mul(nd.conv2d(a[0], a[1], a[2], padding=pad), w))), [x, ker, bias]


def _conv1d(rng, k):
    B, C, T, O, width, pad = [(2, 3, 6, 2, 3, 1), (1, 2, 5, 3, 1, 0), (2, 2, 7, 2, 3, 0)][k]
    x, ker, bias = rng.normal(size=(B, C, T)), rng.normal(size=(O, C, width)), rng.normal(size=O)
    w = rng.normal(size=nd.conv1d_seq(x, ker, bias, padding=pad).shape)
    return (lambda a: nd.sum(nd.mul(nd.conv1d_seq(a[0], a[1], a[2], padding=pad), w))), [x, ker, bias]


def _maxpool(rng, k):
    shape, window = [((1, 2, 4, 6), 2), ((2, 1, 4, 4), (2, 1)), ((1, 1, 5, 7), 2)][k]
    # distinct values keep the argmax away from ties
    x = rng.permutation(np.prod(shape)).reshape(shape) * 0.1 + rng.uniform(0, 0.01, shape)
    w = rng.normal(size=nd.maxpool2d(x, window).shape)
    return (lambda a: nd.sum(nd.mul(nd.maxpool2d(a[0], window), w))), [x]


def _loss_inputs(rng, k):
    A, K, D = [(3, 5, 4), (6, 9, 8), (2, 16, 3)][k]
    return _unit(rng, A, D), _unit(rng, A, D), _unit(rng, K, D)


def _loss_case(fn):
    def build(rng, k):
        q, p, bank = _loss_inputs(rng, k)
        return (lambda a: fn(a[0], a[1], bank)), [q, p]
    return build


_CFG = L.LossConfig(tau_info=0.5, tau_kl=0.7, alpha=0.8)


def _regularized(rng, k):
    q, p, bank = _loss_inputs(rng, k)
    n = max(1, q.shape[0] - 1)
    q_reg = _unit(rng, n, q.shape[1])
    mask = np.ones(n, dtype=bool)
    mask[0] = n == 1
    return (lambda a: L.regularized(a[0], a[1], mask, a[2], bank, _CFG)), [q, q_reg, p]


def _hier_inputs(rng, k):
    B, T, D, S = [(2, 8, 4, 4), (3, 4, 3, 2), (2, 6, 5, 4)][k]
    K = 7
    counts = {"frame": B * T, "subword": B * S, "word": B}
    qs = [_unit(rng, counts[lv], D) for lv in L.TERM_ORDER[:3]]
    ps = [_unit(rng, counts[lv], D) for lv in L.TERM_ORDER[:3]]
    banks = {lv: _unit(rng, K, D) for lv in L.TERM_ORDER[:3]}
    return B, qs, ps, banks, L.LossConfig(0.5, 0.7, 0.8, "relational", S)


def _hierarchical(rng, k):
    _, qs, ps, banks, cfg = _hier_inputs(rng, k)

    def f(a):
        inputs = {lv: L.LevelInputs(a[i], ps[i]) for i, lv in enumerate(L.TERM_ORDER[:3])}
        return L.hierarchical(inputs, banks, cfg, reg=False)
    return f, qs


def _cross(which):
    def build(rng, k):
        B, qs, ps, banks, cfg = _hier_inputs(rng, k)

        def f(a):
            f2s, s2w = L.cross_hierarchy(a[0], a[1], ps[1], ps[2], banks, cfg, B)
            return f2s if which == 0 else s2w
        return f, qs[:2]
    return build


def _total(rng, k):
    B, qs, ps, banks, cfg = _hier_inputs(rng, k)
    regs = [_unit(rng, *q.shape) for q in qs]

    def f(a):
        inputs = {lv: L.LevelInputs(a[i], ps[i], a[3 + i]) for i, lv in enumerate(L.TERM_ORDER[:3])}
        return L.total_loss(inputs, banks, cfg)[0]
    return f, qs + regs


_ELEM = [(4,), (3, 5), (2, 3, 4)]
_BIN = [((4,), (4,)), ((3, 5), (5,)), ((2, 3, 4), (2, 3, 4))]

REGISTRY: dict[str, Callable] = {
    "add": _binary(nd.add, _BIN),
    "sub": _binary(nd.sub, _BIN),
    "mul": _binary(nd.mul, _BIN),
    "scale": _unary(lambda x: nd.scale(x, -1.7), _ELEM),
    "relu": _unary(nd.relu, _ELEM, _away_from_zero),
    "exp": _unary(nd.exp, _ELEM),
    "log": _unary(nd.log, _ELEM, lambda r, *s: r.uniform(0.5, 2.0, size=s)),
    "matmul": _binary(nd.matmul, [((2, 3), (3, 4)), ((1, 5), (5, 1)), ((4, 2), (2, 3))]),
    "sum": _unary(lambda x: nd.sum(x, axis=-1), _ELEM),
    "mean": _unary(lambda x: nd.mean(x, axis=0, keepdims=True), _ELEM),
    "softmax": _unary(lambda x: nd.softmax(x, axis=-1, temperature=0.7), _ELEM),
    "log_softmax": _unary(lambda x: nd.log_softmax(x, axis=-1, temperature=0.3), _ELEM),
    "l2_normalize": _unary(lambda x: nd.l2_normalize(x, axis=-1), _ELEM),
    "avgpool_seq": _unary(lambda x: nd.avgpool_seq(x, 3), [(7,), (2, 9), (2, 2, 5)]),
    "reshape": _unary(lambda x: nd.reshape(x, (-1,)), _ELEM),
    "transpose": _unary(lambda x: nd.transpose(x), _ELEM),
    "take": _unary(lambda x: nd.take(x, [0, 2, 0], axis=-1), [(3,), (2, 4), (2, 3, 3)]),
    "concat": _binary(lambda a, b: nd.concat([a, b], axis=0), [((2,), (3,)), ((1, 3), (2, 3)), ((2, 2, 2), (1, 2, 2))]),
    "conv2d": _conv2d,
    "maxpool2d": _maxpool,
    "conv1d_seq": _conv1d,
    "info_nce": _loss_case(lambda q, p, b: L.info_nce(q, p, b, 0.5)),
    "symmetric_kl": _loss_case(lambda q, p, b: L.symmetric_kl(q, p, b, 0.7)),
    "relational": _loss_case(lambda q, p, b: L.relational(q, p, b, _CFG)),
    "regularized": _regularized,
    "hierarchical": _hierarchical,
    "cross_f2s": _cross(0),
    "cross_s2w": _cross(1),
    "total_loss": _total,
}


def run(names=None, seed: int = 0, shapes: int = SHAPES_PER_CASE) -> list[CheckResult]:
    results = []
    for i, name in enumerate(names or REGISTRY):
        build = REGISTRY[name]
        for k in range(shapes):
            rng = np.random.default_rng([seed, i, k])
            with nd.precision(np.float64):
                f, inputs = build(rng, k)
            t0 = time.perf_counter()
            err = nd.grad_check(f, inputs)
            results.append(CheckResult(name, k, tuple(np.shape(x) for x in inputs), err,
                                       time.perf_counter() - t0))
    return results


def table(results) -> str:
    lines = [f"{'op':<14} {'case':>4}  {'max rel err':>11}  status  shapes"]
    for r in results:
        lines.append(f"{r.name:<14} {r.shape_index:>4}  {r.error:11.3e}  {'PASS' if r.passed else 'FAIL':<6}  "
                     + " ".join("x".join(map(str, s)) for s in r.shapes))
    return "\n".join(lines) + "\n"
