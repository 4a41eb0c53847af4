import numpy as np
import pytest

from rclstr import gradcheck
from rclstr import ndiff as nd
from rclstr.errors import DegenerateInput, DomainError, NotScalar, ShapeMismatch


@pytest.mark.parametrize("name", sorted(gradcheck.REGISTRY))
def test_registered_op_gradients(name):
    results = gradcheck.run([name])
    assert len(results) == gradcheck.SHAPES_PER_CASE
    for r in results:
        assert r.error < 1e-4, (r.name, r.shapes, r.error)


def test_precision_context_switches_dtype():
    assert nd.as_array([1.0]).dtype == np.float32
    with nd.precision(np.float64):
        assert nd.as_array([1.0]).dtype == np.float64
    assert nd.as_array([1.0]).dtype == np.float32


def test_gradients_accumulate_over_reuse():
    x = nd.parameter(np.array([2.0, 3.0]))
    y = nd.sum(nd.add(nd.mul(x, x), x))
    y.backward()
    assert np.allclose(x.grad, 2 * x.data + 1)


def test_tape_is_freed_after_backward():
    x = nd.parameter(np.ones(3))
    y = nd.sum(nd.exp(x))
    y.backward()
    assert y._parents == ()


def test_no_tape_without_parameters():
    y = nd.sum(nd.exp(nd.as_array(np.ones(3))))
    assert not y.requires_grad


def test_backward_needs_scalar():
    x = nd.parameter(np.ones(3))
    with pytest.raises(NotScalar):
        nd.exp(x).backward()


def test_broadcast_only_trailing():
    a = nd.as_array(np.ones((2, 3)))
    nd.add(a, np.ones(3))
    with pytest.raises(ShapeMismatch):
        nd.add(a, np.ones((2, 1)))


def test_log_domain():
    with pytest.raises(DomainError):
        nd.log(np.array([1.0, 0.0]))


def test_softmax_rows_and_temperature():
    x = np.random.default_rng(0).normal(size=(4, 7))
    s = nd.softmax(x, axis=1, temperature=0.3).data
    assert np.allclose(s.sum(axis=1), 1, atol=1e-6)
    with pytest.raises(DomainError):
        nd.softmax(x, temperature=0.0)


def test_softmax_extreme_logits_stay_finite():
    with nd.precision(np.float64):
        s = nd.softmax(np.array([10.0, 0.0]), temperature=0.1).data
    assert np.isfinite(s).all()
    assert s[1] == pytest.approx(np.exp(-100.0), rel=1e-6)
    ls = nd.log_softmax(np.array([1000.0, 0.0]), temperature=0.01).data
    assert np.isfinite(ls).all()


def test_l2_normalize_and_degenerate():
    x = np.random.default_rng(1).normal(size=(5, 3))
    y = nd.l2_normalize(x, axis=1).data
    assert np.allclose(np.linalg.norm(y, axis=1), 1, atol=1e-6)
    with pytest.raises(DegenerateInput):
        nd.l2_normalize(np.zeros((1, 3)), axis=1)


@pytest.mark.parametrize("length,bins", [(16, 4), (26, 4), (7, 3), (4, 4), (5, 1)])
def test_bin_edges_cover_sequence(length, bins):
    e = nd.bin_edges(length, bins)
    assert e[0] == 0 and e[-1] == length
    assert all(b > a for a, b in zip(e, e[1:]))


def test_avgpool_matches_manual_means():
    x = np.arange(14, dtype=float).reshape(2, 7)
    y = nd.avgpool_seq(x, 3).data
    e = nd.bin_edges(7, 3)
    manual = np.stack([x[:, e[i]:e[i + 1]].mean(axis=1) for i in range(3)], axis=1)
    assert np.allclose(y, manual)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 2, 5, 6))
    k = rng.normal(size=(3, 2, 3, 3))
    with nd.precision(np.float64):
        y = nd.conv2d(x, k).data
    ref = np.zeros((1, 3, 3, 4))
    for o in range(3):
        for i in range(3):
            for j in range(4):
                ref[0, o, i, j] = (x[0, :, i:i + 3, j:j + 3] * k[o]).sum()
    assert np.allclose(y, ref)


def test_maxpool_floor_and_values():
    x = np.arange(30, dtype=float).reshape(1, 1, 5, 6)
    y = nd.maxpool2d(x, 2).data
    assert y.shape == (1, 1, 2, 3)
    assert y[0, 0, 0, 0] == x[0, 0, 1, 1]


def test_grad_check_catches_wrong_backward():
    def bad(x):
        x = nd.as_array(x)
        return nd.record(np.asarray((x.data ** 2).sum()), [x], lambda g: [g * x.data], "bad")
    assert nd.grad_check(bad, np.array([0.5, -1.5, 2.0])) > 1e-2
