from pathlib import Path

import numpy as np
import pytest

from rclstr import fixtures as fx
from rclstr import losses
from rclstr import ndiff as nd
from rclstr import permute

GOLDEN = Path(__file__).parent / "fixtures" / "golden.txt"


@pytest.fixture(scope="module")
def golden():
    return fx.read_fixtures(GOLDEN)


@pytest.fixture(autouse=True)
def f64():
    with nd.precision(np.float64):
        yield


def test_regeneration_is_byte_identical(tmp_path):
    fx.write_fixtures(tmp_path / "g.txt")
    assert (tmp_path / "g.txt").read_bytes() == GOLDEN.read_bytes()


def test_every_block_has_provenance(golden):
    assert len(golden) >= 15
    for name, block in golden.items():
        assert block["provenance"] in ("TRIVIAL", "DERIVED"), name
        if block["provenance"] == "DERIVED":
            assert "oracle" in block, name


def test_loss_blocks_match_implementation(golden):
    e = np.eye(3)
    cfg = losses.LossConfig()
    assert float(losses.info_nce(e[:1], e[:1], e[1:], 1.0).data) == pytest.approx(
        golden["info_nce.orthogonal_tau1"]["values"][0], rel=1e-12)
    assert float(losses.info_nce(e[:1], e[:1], e[1:], 0.5).data) == pytest.approx(
        golden["info_nce.orthogonal_tau0.5"]["values"][0], rel=1e-12)
    assert float(losses.symmetric_kl(e[:1], e[1:2], e[:2], 1.0).data) == pytest.approx(np.tanh(0.5), rel=1e-12)

    q, p, bank = fx.loss_instance(0, A=4, K=8, D=4)
    got = {
        "info_nce.random": losses.info_nce(q, p, bank, cfg.tau_info),
        "symmetric_kl.random": losses.symmetric_kl(q, p, bank, cfg.tau_kl),
        "relational.random": losses.relational(q, p, bank, cfg),
    }
    q_reg = fx.unit_rows(np.random.default_rng([0, 1]), 4, 4)
    got["regularized.random"] = losses.regularized(q, q_reg, np.array([1, 0, 1, 1], bool), p, bank, cfg)
    for name, value in got.items():
        assert float(value.data) == pytest.approx(golden[name]["values"][0], rel=1e-10), name


@pytest.mark.parametrize("kind", ["kl_only", "relational"])
def test_cross_hierarchy_blocks(golden, kind):
    h = fx.hierarchy_instance(0)
    cfg = losses.LossConfig(cross_hierarchy_loss_kind=kind)
    f2s, s2w = losses.cross_hierarchy(h["frame_q"], h["subword_q"], h["subword_p"], h["word_p"],
                                      {"subword": h["bank_sub"], "word": h["bank_word"]}, cfg, h["batch"])
    assert [float(f2s.data), float(s2w.data)] == pytest.approx(golden[f"cross_hierarchy.{kind}"]["values"],
                                                               rel=1e-10)


def test_bin_blocks(golden):
    for name, block in golden.items():
        if name.startswith("bins."):
            T, S = (int(part[1:]) for part in name.split(".")[1:])
            assert losses.frame_to_bin(T, S).tolist() == [int(v) for v in block["values"]], name


def test_permutation_blocks(golden):
    for name, block in golden.items():
        if not name.startswith("permutation."):
            continue
        N, M = (int(part[1:]) for part in name.split(".")[1:])
        _, record = permute.shuffle_groups(np.zeros((2 * M, N, 1, 1)), M, 0)
        table = list(record.global_pi())
        inverse = np.argsort(table).tolist()
        assert table + inverse == [int(v) for v in block["values"]], name


def test_gradient_block(golden):
    q, p, bank = fx.loss_instance(0, A=4, K=8, D=4)
    x = nd.parameter(q)
    losses.info_nce(x, p, bank, 0.5).backward()
    assert np.allclose(x.grad.ravel(), golden["info_nce.grad_q"]["values"], atol=1e-7)
