import csv

import numpy as np
import pytest

from rclstr import probe as pb
from rclstr.config import TrainConfig
from rclstr.encoder import init_params
from rclstr.errors import CheckpointError, ConfigError
from rclstr.textgen import generate_strips
from rclstr.train import new_state, save_checkpoint

CFG = TrainConfig(probe_iterations=30, probe_batch=16, probe_train_strips=40, probe_eval_strips=20)


@pytest.fixture(scope="module")
def strips():
    return pb.probe_strips(CFG, "train"), pb.probe_strips(CFG, "eval")


@pytest.fixture(scope="module")
def encoder():
    return init_params(CFG.encoder_config(), 0)


def test_splits_are_disjoint(strips):
    train, ev = strips
    assert not {s.seed for s in train} & {s.seed for s in ev}
    with pytest.raises(ConfigError):
        pb.probe_strips(CFG, "test")


def test_oracle_labels_decode_to_words():
    data = generate_strips(CFG.data_config(), 5, 200)
    labels = pb.targets(data, CFG.alphabet, CFG.frames)
    assert all(pb.decode(row, CFG.alphabet) == s.text for row, s in zip(labels, data))


def test_uniform_guessing_rate():
    data = generate_strips(CFG.data_config(), 6, 700)
    truth = pb.targets(data, CFG.alphabet, CFG.frames).ravel()[:10_000]
    guess = np.random.default_rng(0).integers(0, len(CFG.alphabet) + 1, size=truth.size)
    p = 1 / 11
    sigma = np.sqrt(p * (1 - p) / truth.size)
    assert abs((guess == truth).mean() - p) < 3 * sigma


def test_frozen_probe_leaves_checkpoint_untouched(tmp_path, strips):
    state = new_state(CFG)
    path = tmp_path / "c.rcl"
    save_checkpoint(path, state)
    raw = path.read_bytes()
    probe = pb.train_probe(path, strips[0], CFG)
    pb.evaluate(path, probe, strips[1])
    assert path.read_bytes() == raw
    assert probe.encoder is None


def test_probe_deterministic(encoder, strips):
    a = pb.train_probe(encoder, strips[0], CFG)
    b = pb.train_probe(encoder, strips[0], CFG)
    assert np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)
    ra, rb = pb.evaluate(encoder, a, strips[1]), pb.evaluate(encoder, b, strips[1])
    assert ra.to_text() == rb.to_text()
    assert ra.frames == 20 * CFG.frames and ra.confusion.sum() == ra.frames
    assert ra.correct_frames == np.trace(ra.confusion)


def test_empty_eval_set(encoder, strips):
    probe = pb.train_probe(encoder, strips[0], CFG)
    r = pb.evaluate(encoder, probe, [])
    assert (r.frame_accuracy, r.word_accuracy, r.frames, r.words) == (0.0, 0.0, 0, 0)


def test_learnable_features_reach_full_accuracy(monkeypatch, encoder, strips):
    train, ev = strips
    table = {}
    for s in train + ev:
        table[s.pixels.tobytes()] = pb.targets([s], CFG.alphabet, CFG.frames)[0]

    def one_hot(enc, pixels):
        out = np.zeros((len(pixels), CFG.frames, enc.config.features), np.float32)
        for i, img in enumerate(pixels):
            out[i, np.arange(CFG.frames), table[img.astype(np.float32).tobytes()]] = 1.0
        return out

    monkeypatch.setattr(pb, "sequence_features", one_hot)
    probe = pb.train_probe(encoder, train, CFG.replace(probe_iterations=200, probe_lr=0.5))
    r = pb.evaluate(encoder, probe, ev)
    assert r.frame_accuracy == 1.0 and r.word_accuracy == 1.0


def test_labels_fraction_and_errors(encoder, strips):
    a = pb.train_probe(encoder, strips[0], CFG, labels_fraction=0.25)
    b = pb.train_probe(encoder, strips[0][:10], CFG)
    assert np.array_equal(a.weight, b.weight) and np.array_equal(a.mean, b.mean)
    with pytest.raises(ConfigError):
        pb.train_probe(encoder, strips[0], CFG, labels_fraction=0)
    with pytest.raises(ConfigError):
        pb.train_probe(encoder, strips[0], CFG, mode="linear")
    with pytest.raises(ConfigError):
        pb.train_probe(encoder, [], CFG)
    with pytest.raises(CheckpointError):
        pb.train_probe("/nonexistent/ckpt.rcl", strips[0], CFG)


def test_finetune_copies_encoder(tmp_path, encoder, strips):
    before = encoder.copy()
    cfg = CFG.replace(probe_iterations=3)
    probe = pb.train_probe(encoder, strips[0], cfg, mode="finetune")
    assert encoder.equal(before)
    assert probe.encoder is not None and not probe.encoder.equal(before)
    pb.save_probe(tmp_path / "p.rcl", probe)
    back = pb.load_probe(tmp_path / "p.rcl")
    assert back.alphabet == CFG.alphabet and back.encoder.equal(probe.encoder)
    assert np.array_equal(pb.predict(None, back, strips[1]), pb.predict(encoder, probe, strips[1]))


def test_frozen_probe_round_trip(tmp_path, encoder, strips):
    probe = pb.train_probe(encoder, strips[0], CFG)
    pb.save_probe(tmp_path / "p.rcl", probe)
    back = pb.load_probe(tmp_path / "p.rcl")
    assert back.encoder is None
    assert np.array_equal(pb.predict(encoder, back, strips[1]), pb.predict(encoder, probe, strips[1]))


def test_export_embeddings(tmp_path, encoder, strips):
    ev = strips[1][:5]
    rows = pb.export_embeddings(encoder, ev, tmp_path / "e.csv")
    assert rows == 5 * CFG.frames
    with open(tmp_path / "e.csv", newline="") as fh:
        table = list(csv.reader(fh))
    assert table[0][:3] == ["strip", "frame", "label"] and len(table[0]) == 3 + CFG.dim
    assert len(table) == rows + 1
    vecs = np.array([[float(v) for v in r[3:]] for r in table[1:]])
    assert np.allclose(np.linalg.norm(vecs, axis=1), 1, atol=1e-6)
    labels = {r[2] for r in table[1:]}
    assert labels <= set(CFG.alphabet) | {"BLANK"}
    pb.export_embeddings(encoder, ev, tmp_path / "f.csv")
    assert (tmp_path / "e.csv").read_bytes() == (tmp_path / "f.csv").read_bytes()


def test_report_text(encoder, strips):
    probe = pb.train_probe(encoder, strips[0], CFG)
    text = pb.evaluate(encoder, probe, strips[1], digest="abc", checkpoint="x.rcl").to_text()
    assert "config_digest = abc" in text and "confusion.BLANK = " in text
