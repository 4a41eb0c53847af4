import json

import numpy as np
import pytest

from rclstr import store
from rclstr.config import TrainConfig, read_config_file, resolve
from rclstr.errors import ConfigError, DataExhausted, DigestMismatch, IoError, NonFiniteLoss, VersionMismatch
from rclstr.textgen import DataConfig, generate_strips
from rclstr.train import (ListSource, load_checkpoint, load_encoder, new_state, pretrain, save_checkpoint,
                          sgd_step, smoothed, train_step)

SMALL = TrainConfig(batch_size=4, bank_size=64, iterations=3)


def test_sgd_hand_trajectory():
    p = {"w": np.array([1.0])}
    state = {}
    sgd_step(p, {"w": np.array([1.0])}, 0.1, 0.0, 0.9, state)
    assert state["w"][0] == pytest.approx(1.0) and p["w"][0] == pytest.approx(0.9)
    sgd_step(p, {"w": np.array([1.0])}, 0.1, 0.0, 0.9, state)
    assert state["w"][0] == pytest.approx(1.9) and p["w"][0] == pytest.approx(0.71)


def test_sgd_plain_and_weight_decay():
    p = {"w": np.array([2.0])}
    sgd_step(p, {"w": np.array([0.5])}, 0.1, 0.0, 0.0, {})
    assert p["w"][0] == pytest.approx(1.95)
    sgd_step(p, {"w": np.array([0.0])}, 0.1, 0.1, 0.0, {})
    assert p["w"][0] == pytest.approx(1.95 - 0.1 * 0.1 * 1.95)


def test_step_ordering_and_metrics():
    state = new_state(SMALL)
    strips = generate_strips(SMALL.data_config(), 0, 4)
    events = []

    def hook(kind, info):
        events.append((kind, info))

    rec = train_step(state, strips, [hook])
    kinds = [k for k, _ in events]
    assert kinds[0] == "loss" and set(kinds[1:]) == {"enqueue"}
    snaps = events[0][1]["snapshots"]
    for kind, info in events[1:]:
        keys = info["keys"]
        # this iteration's keys were not among its own negatives
        assert not any(np.allclose(k, row) for k in keys[:1] for row in snaps[info["level"]])
    parts = sum(v for k, v in rec.items() if k in ("frame", "subword", "word", "f2s", "s2w"))
    assert parts == pytest.approx(rec["total"], abs=1e-5)
    assert set(state.velocity) == set(state.pair.online.names())
    assert rec["banks_touched"] == ["frame", "subword", "word"]


def test_baseline_touches_only_word_bank():
    cfg = SMALL.replace(reg=False, hier=False, con=False)
    state = new_state(cfg)
    before = {lv: b.storage.copy() for lv, b in state.banks.items()}
    rec = train_step(state, generate_strips(cfg.data_config(), 0, 4))
    assert rec["banks_touched"] == ["word"]
    assert set(rec) >= {"word", "total"} and "frame" not in rec
    for lv in ("frame", "subword"):
        assert np.array_equal(before[lv], state.banks[lv].storage)
    assert not np.array_equal(before["word"], state.banks["word"].storage)


def test_momentum_not_trained_directly():
    cfg = SMALL.replace(encoder_momentum=1.0)
    state = new_state(cfg)
    before = state.pair.momentum.copy()
    train_step(state, generate_strips(cfg.data_config(), 0, 4))
    assert state.pair.momentum.equal(before)
    assert not state.pair.online.equal(before)


def test_nonfinite_loss_aborts(tmp_path):
    cfg = SMALL.replace(lr=1e30)
    with pytest.raises(NonFiniteLoss) as info:
        pretrain(cfg.replace(iterations=5), tmp_path)
    assert info.value.iteration >= 1
    dumps = list(tmp_path.glob("nonfinite_*.json"))
    assert len(dumps) == 1
    assert "terms" in json.loads(dumps[0].read_text())


def test_list_source_exhausts():
    strips = generate_strips(DataConfig(), 0, 6)
    with pytest.raises(DataExhausted):
        pretrain(SMALL, source=ListSource(strips))


def test_determinism_and_resume(tmp_path):
    cfg = SMALL.replace(iterations=4, checkpoint_every=2)
    a = pretrain(cfg, tmp_path / "a")
    b = pretrain(cfg, tmp_path / "b")
    for pa, pb in zip(a.checkpoints, b.checkpoints):
        assert pa.read_bytes() == pb.read_bytes()
    resumed = pretrain(cfg, tmp_path / "c", resume=a.checkpoints[0])
    assert resumed.checkpoints[-1].read_bytes() == a.checkpoints[-1].read_bytes()
    lines = (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["iteration"] for x in lines] == [1, 2, 3, 4]
    assert (tmp_path / "a" / "config.txt").read_text() == cfg.to_text()


def test_checkpoint_round_trip_and_errors(tmp_path):
    state = new_state(SMALL)
    train_step(state, generate_strips(SMALL.data_config(), 0, 4))
    path = tmp_path / "s.rcl"
    save_checkpoint(path, state)
    back = load_checkpoint(path)
    assert back.iteration == 1 and back.config == SMALL
    assert back.pair.online.equal(state.pair.online) and back.pair.momentum.equal(state.pair.momentum)
    for lv in state.banks:
        assert np.array_equal(back.banks[lv].storage, state.banks[lv].storage)
        assert back.banks[lv].cursor == state.banks[lv].cursor
    assert load_encoder(path).equal(state.pair.online)
    with pytest.raises(DigestMismatch):
        load_checkpoint(path, SMALL.replace(lr=0.5))
    load_checkpoint(path, SMALL.replace(iterations=99))

    raw = path.read_bytes()
    for cut in (len(raw) - 1, len(raw) // 2, 7):
        path.write_bytes(raw[:cut])
        with pytest.raises(IoError):
            load_checkpoint(path)
    path.write_bytes(raw[:4] + b"\x09\x00" + raw[6:])
    with pytest.raises(VersionMismatch):
        load_checkpoint(path)


def test_store_round_trip(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.float32(3.5)}
    store.write_arrays(tmp_path / "x.rcl", arrays)
    back = store.read_arrays(tmp_path / "x.rcl")
    assert list(back) == ["a", "b"]
    assert np.array_equal(back["a"], arrays["a"]) and back["b"] == 3.5


def test_config_precedence_and_errors(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("# comment\nlr = 0.5\nbatch_size = 8  # trailing\n")
    assert read_config_file(f) == {"lr": 0.5, "batch_size": 8}
    cfg = resolve(f, ["batch_size=16"], environ={"RCLSTR_LR": "0.25", "RCLSTR_SEED": "3"})
    assert (cfg.lr, cfg.batch_size, cfg.seed) == (0.25, 16, 3)
    with pytest.raises(ConfigError, match="bogus"):
        resolve(None, ["bogus=1"])
    with pytest.raises(ConfigError, match="lr"):
        resolve(None, ["lr="])
    with pytest.raises(ConfigError):
        TrainConfig(frames=15)
    assert TrainConfig().digest() == TrainConfig(iterations=5).digest()
    assert TrainConfig().digest() != TrainConfig(lr=0.5).digest()


def test_smoothed_window():
    v = smoothed([1.0, 3.0, 5.0, 7.0], window=2)
    assert list(v) == [1.0, 2.0, 4.0, 6.0]
