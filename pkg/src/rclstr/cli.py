"""Command-line entry point.

    rclstr gen-data   --out DIR [--count N]
    rclstr pretrain   --out DIR [--resume CKPT]
    rclstr probe      --out DIR --checkpoint CKPT|random [--mode frozen|finetune] [--labels-fraction F]
    rclstr eval       --out DIR --checkpoint CKPT --probe PROBE [--data DATASET]
    rclstr gradcheck  [--out DIR] [--ops a,b]
    rclstr inspect    PATH
    rclstr ablation   --out DIR [--rows none,reg,reg+hier,reg+hier+con] [--seeds 0,1,2]

Every command takes ``--config FILE``, repeated ``--set key=value`` and
``--seed``. Exit status: 0 success, 1 runtime error, 2 configuration error;
failures print one ``error kind=... message=...`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import gradcheck, probe, store, textgen
from .config import TrainConfig, resolve
from .errors import ConfigError, IoError, RclstrError
from .train import load_encoder, new_state, pretrain

CANONICAL_ROWS = ("none", "reg", "reg+hier", "reg+hier+con")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    p.add_argument("--seed", type=int, help="global seed (same as --set seed=N)")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rclstr", description="Relational contrastive pre-training for text strips")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("gen-data", help="render a dataset file")
    _common(p)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--start", type=int, default=0)

    p = sub.add_parser("pretrain", help="self-supervised pre-training")
    _common(p)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("probe", help="train and evaluate a linear frame probe")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="encoder checkpoint, or 'random' for an untrained encoder")
    p.add_argument("--mode", choices=probe.MODES)
    p.add_argument("--labels-fraction", type=float)
    p.add_argument("--embeddings", action="store_true", help="also export eval-set frame embeddings")

    p = sub.add_parser("eval", help="evaluate an existing probe")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--probe", required=True)
    p.add_argument("--data", help="dataset file (default: the config's eval split)")

    p = sub.add_parser("gradcheck", help="central-difference check of every registered op")
    _common(p)
    p.add_argument("--ops", help="comma-separated subset")

    p = sub.add_parser("inspect", help="describe a checkpoint, probe or dataset file")
    p.add_argument("path")

    p = sub.add_parser("ablation", help="pretrain + probe over toggle rows and seeds")
    _common(p)
    p.add_argument("--rows", default=",".join(CANONICAL_ROWS))
    p.add_argument("--seeds", default="0,1,2")
    return parser


def _config(args) -> TrainConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return resolve(args.config, overrides)


def _out(args, config: TrainConfig | None = None) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if config is not None:
        (out / "config.txt").write_text(config.to_text())
    return out


def row_toggles(row: str) -> dict:
    names = [] if row in ("none", "baseline") else row.split("+")
    for n in names:
        if n not in ("reg", "hier", "con"):
            raise ConfigError(f"unknown toggle {n!r} in row {row!r}")
    return {k: k in names for k in ("reg", "hier", "con")}


def toggle_label(config: TrainConfig) -> str:
    on = [k for k in ("reg", "hier", "con") if getattr(config, k)]
    return "+".join(on) if on else "word-only baseline"


def _encoder(checkpoint: str, config: TrainConfig):
    if checkpoint == "random":
        return new_state(config).pair.online
    return load_encoder(checkpoint)


def cmd_gen_data(args) -> int:
    config = _config(args)
    out = _out(args, config)
    strips = textgen.generate_strips(config.data_config(), config.seed, args.count, args.start, config.workers)
    textgen.write_dataset(out / "dataset.rcld", strips)
    print(f"wrote {len(strips)} strips to {out / 'dataset.rcld'}")
    return 0


def cmd_pretrain(args) -> int:
    config = _config(args)
    out = _out(args, config)
    result = pretrain(config, out, resume=args.resume)
    last = result.metrics[-1] if result.metrics else {}
    print(f"iterations {result.state.iteration}  final loss {last.get('total', float('nan')):.4f}")
    for path in result.checkpoints:
        print(f"checkpoint {path}")
    return 0


def _probe_run(config: TrainConfig, checkpoint: str, out: Path, mode=None, fraction=None,
               embeddings=False) -> probe.EvalReport:
    encoder = _encoder(checkpoint, config)
    params = probe.train_probe(encoder, probe.probe_strips(config, "train"), config, mode, fraction)
    probe.save_probe(out / "probe.rcl", params)
    eval_strips = probe.probe_strips(config, "eval")
    report = probe.evaluate(encoder, params, eval_strips, config.digest().hex(), checkpoint)
    report.extra["mode"] = mode or config.probe_mode
    report.extra["toggles"] = toggle_label(config)
    report.extra["labels_fraction"] = config.labels_fraction if fraction is None else fraction
    report.write(out / "report.txt")
    if embeddings:
        probe.export_embeddings(params.encoder or encoder, eval_strips, out / "embeddings.csv")
    return report


def cmd_probe(args) -> int:
    config = _config(args)
    out = _out(args, config)
    report = _probe_run(config, args.checkpoint, out, args.mode, args.labels_fraction, args.embeddings)
    print(f"frame_accuracy {report.frame_accuracy:.4f}  word_accuracy {report.word_accuracy:.4f}")
    return 0


def cmd_eval(args) -> int:
    config = _config(args)
    out = _out(args, config)
    params = probe.load_probe(args.probe)
    strips = textgen.read_dataset(args.data) if args.data else probe.probe_strips(config, "eval")
    report = probe.evaluate(load_encoder(args.checkpoint), params, strips, config.digest().hex(), args.checkpoint)
    report.write(out / "report.txt")
    print(f"frame_accuracy {report.frame_accuracy:.4f}  word_accuracy {report.word_accuracy:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    config = _config(args)
    names = args.ops.split(",") if args.ops else None
    if names:
        unknown = [n for n in names if n not in gradcheck.REGISTRY]
        if unknown:
            raise ConfigError(f"unknown ops {unknown}")
    results = gradcheck.run(names, seed=config.seed)
    text = gradcheck.table(results)
    print(text, end="")
    if args.out:
        (_out(args, config) / "gradcheck.txt").write_text(text)
    return 0 if all(r.passed for r in results) else 1


def describe(path) -> str:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            magic = fh.read(4)
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from None
    if magic == textgen.MAGIC:
        head = textgen.read_header(path)
        return "".join(f"{k} = {v}\n" for k, v in head.items())
    arrays = store.read_arrays(path)
    lines = [f"{'name':<28} {'shape':<16} {'l2 norm':>12}"]
    for name, value in arrays.items():
        shape = "x".join(map(str, value.shape)) or "scalar"
        lines.append(f"{name:<28} {shape:<16} {float(np.linalg.norm(value)):12.6g}")
    return "\n".join(lines) + "\n"


def cmd_inspect(args) -> int:
    print(describe(args.path), end="")
    return 0


def cmd_ablation(args) -> int:
    base = _config(args)
    out = _out(args, base)
    rows = [r.strip() for r in args.rows.split(",") if r.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    for row in rows:
        row_toggles(row)
    table = out / "ablation.tsv"
    table.write_text("row\tseeds\tframe_accuracy\tword_accuracy\tlabel\n")
    (out / "cells.jsonl").write_text("")
    for row in rows:
        frame, word = [], []
        for seed in seeds:
            cfg = base.replace(seed=seed, **row_toggles(row))
            cell = out / f"{row}_seed{seed}"
            result = pretrain(cfg, cell / "pretrain")
            (cell / "probe").mkdir(parents=True, exist_ok=True)
            report = _probe_run(cfg, str(result.checkpoints[-1]), cell / "probe")
            frame.append(report.frame_accuracy)
            word.append(report.word_accuracy)
            with (out / "cells.jsonl").open("a") as fh:
                fh.write(json.dumps({"row": row, "seed": seed, "frame_accuracy": report.frame_accuracy,
                                     "word_accuracy": report.word_accuracy}) + "\n")
        line = f"{row}\t{','.join(map(str, seeds))}\t{np.mean(frame):.4f}\t{np.mean(word):.4f}\t{toggle_label(cfg)}\n"
        with table.open("a") as fh:
            fh.write(line)
        print(line, end="")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "probe": cmd_probe, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "inspect": cmd_inspect, "ablation": cmd_ablation}


def _fail(kind: str, message: str, status: int) -> int:
    print(f"error kind={kind} message={json.dumps(str(message))}", file=sys.stderr)
    return status


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        return _fail(type(exc).__name__, exc, 2)
    except (RclstrError, OSError) as exc:
        return _fail(type(exc).__name__, exc, 1)


if __name__ == "__main__":
    sys.exit(main())
