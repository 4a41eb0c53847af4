import json
import subprocess
import sys

import pytest

from rclstr.cli import describe, main, row_toggles

TINY = ["--set", "batch_size=4", "--set", "bank_size=64", "--set", "iterations=2",
        "--set", "probe_iterations=5", "--set", "probe_train_strips=8", "--set", "probe_eval_strips=4"]


def test_usage_errors_exit_2(capsys):
    assert main([]) == 2
    assert main(["pretrain", "--set", "nonsense=1", "--out", "x"]) == 2
    err = capsys.readouterr().err
    assert "error kind=ConfigError" in err and "nonsense" in err
    assert main(["gradcheck", "--ops", "not_an_op"]) == 2


def test_runtime_error_exit_1(tmp_path, capsys):
    assert main(["inspect", str(tmp_path / "missing.rcl")]) == 1
    assert capsys.readouterr().err.startswith("error kind=IoError message=")


def test_gradcheck_subset(tmp_path, capsys):
    assert main(["gradcheck", "--ops", "add,softmax", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 6 and "FAIL" not in out
    assert (tmp_path / "gradcheck.txt").read_text() == out


def test_pipeline(tmp_path, capsys):
    run, probe_dir, ev = tmp_path / "run", tmp_path / "probe", tmp_path / "eval"
    assert main(["pretrain", *TINY, "--set", "checkpoint_every=1", "--out", str(run)]) == 0
    snapshot = (run / "config.txt").read_text()
    assert "batch_size = 4" in snapshot
    ckpt = run / "ckpt_000002.rcl"
    assert ckpt.exists() and (run / "metrics.jsonl").exists()

    raw = ckpt.read_bytes()
    assert main(["probe", *TINY, "--checkpoint", str(ckpt), "--embeddings", "--out", str(probe_dir)]) == 0
    assert ckpt.read_bytes() == raw
    report = (probe_dir / "report.txt").read_text()
    assert "frame_accuracy = " in report and "mode = frozen" in report
    assert len((probe_dir / "embeddings.csv").read_text().splitlines()) == 1 + 4 * 16

    assert main(["eval", *TINY, "--checkpoint", str(ckpt), "--probe", str(probe_dir / "probe.rcl"),
                 "--out", str(ev)]) == 0
    first = lambda text: text.splitlines()[:6]
    assert first((ev / "report.txt").read_text()) == first(report)

    capsys.readouterr()
    assert main(["inspect", str(ckpt)]) == 0
    listing = capsys.readouterr().out.splitlines()[1:]
    names = [line.split()[0] for line in listing]
    assert len(names) == len(set(names)) and "conv1.w" in " ".join(names)


def test_probe_random_and_gen_data(tmp_path, capsys):
    assert main(["probe", *TINY, "--checkpoint", "random", "--out", str(tmp_path / "p")]) == 0
    assert main(["gen-data", "--count", "3", "--out", str(tmp_path / "d")]) == 0
    capsys.readouterr()
    assert main(["inspect", str(tmp_path / "d" / "dataset.rcld")]) == 0
    assert "count = 3" in capsys.readouterr().out


def test_ablation_single_cell(tmp_path):
    out = tmp_path / "abl"
    assert main(["ablation", *TINY, "--rows", "none", "--seeds", "0", "--out", str(out)]) == 0
    lines = (out / "ablation.tsv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("none\t0\t")
    cells = [json.loads(x) for x in (out / "cells.jsonl").read_text().splitlines()]
    assert [(c["row"], c["seed"]) for c in cells] == [("none", 0)]


def test_row_toggles():
    assert row_toggles("none") == {"reg": False, "hier": False, "con": False}
    assert row_toggles("reg+con") == {"reg": True, "hier": False, "con": True}
    with pytest.raises(Exception):
        row_toggles("reg+foo")


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "rclstr.cli", "inspect", str(tmp_path / "nope")],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and "kind=IoError" in proc.stderr
