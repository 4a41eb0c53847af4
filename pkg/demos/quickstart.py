"""Pretrain a small encoder, then compare a frozen linear probe against random init.

    python3 demos/quickstart.py [iterations]

Runs in well under a minute at the default 200 iterations. Desk-scale
numbers are noisy; see the README for what to expect.
"""

import sys
import tempfile

from rclstr.config import TrainConfig
from rclstr.probe import evaluate, probe_strips, train_probe
from rclstr.train import load_encoder, new_state, pretrain

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 200
cfg = TrainConfig(iterations=iterations, probe_iterations=500, probe_train_strips=500, probe_eval_strips=200)

with tempfile.TemporaryDirectory() as out:
    result = pretrain(cfg, out)
    first, last = result.metrics[0]["total"], result.metrics[-1]["total"]
    print(f"pretrained {iterations} iterations, loss {first:.3f} -> {last:.3f}")
    encoders = {"random init": new_state(cfg).pair.online, "pretrained": load_encoder(result.checkpoints[-1])}
    train, ev = probe_strips(cfg, "train"), probe_strips(cfg, "eval")
    for name, enc in encoders.items():
        report = evaluate(enc, train_probe(enc, train, cfg), ev)
        print(f"{name:<12} frame accuracy {report.frame_accuracy:.3f}  word accuracy {report.word_accuracy:.3f}")
