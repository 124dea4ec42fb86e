"""Command-line interface: generate / sweep / train / evaluate / compare."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .agent import CheckpointError, Hyperparameters
from .engine import UnschedulableError
from .harness import (
    ExperimentConfig,
    cmd_compare,
    cmd_evaluate,
    cmd_generate,
    cmd_sweep,
    cmd_train,
    comparison_table,
    schedulability_report,
    sweep_table,
)
from .model import InvariantError, ParseError, deserialize_taskset
from .workload import GenerationError

EXIT_CONFIG = 2
EXIT_UNSCHEDULABLE = 3
EXIT_IO = 4
EXIT_GENERATION = 5


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for name in ("num_runnables", "num_tasksets", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if overrides:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config file (JSON)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default="out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amcsim")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write task-set documents and a manifest")
    _add_common(g)
    g.add_argument("--num-runnables", type=int, dest="num_runnables")
    g.add_argument("--num-tasksets", type=int, dest="num_tasksets")

    s = sub.add_parser("sweep", help="schedulable fraction versus runnable count")
    _add_common(s)
    s.add_argument("--counts", type=int, nargs="+", required=True)
    s.add_argument("--sets-per-point", type=int, default=10)

    t = sub.add_parser("train", help="train one DQN model on a task set")
    _add_common(t)
    t.add_argument("taskset")
    t.add_argument("--hidden", type=float, nargs="+", default=[0.5],
                   help="hidden layer sizes as multipliers of the task count")
    t.add_argument("--batch-size", type=int, default=6)
    t.add_argument("--duration", type=float, default=100.0, help="simulated seconds")
    t.add_argument("--tag", default="model")
    t.add_argument("--no-eq5", action="store_true", help="disable the per-LO-task check")
    t.add_argument("--scope", choices=["all", "affected"], default="all")

    e = sub.add_parser("evaluate", help="evaluate baseline or a trained model")
    _add_common(e)
    e.add_argument("taskset")
    e.add_argument("--checkpoint", default=None, help="omit for the agent-less baseline")
    e.add_argument("--duration", type=float, default=1000.0, help="simulated seconds")
    e.add_argument("--out", default=None, help="write the evaluation document here")
    e.add_argument("--no-eq5", action="store_true")
    e.add_argument("--scope", choices=["all", "affected"], default="all")

    c = sub.add_parser("compare", help="ratio report over paired evaluations")
    c.add_argument("results_dir")
    c.add_argument("--out", default=None)

    a = sub.add_parser("analyze", help="design-time schedulability report")
    a.add_argument("taskset")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            cfg = _load_config(args)
            manifest = cmd_generate(cfg, args.out_dir)
            print(f"wrote {len(manifest['files'])} task sets to {args.out_dir} "
                  f"(config {manifest['config_hash']})")
        elif args.command == "sweep":
            cfg = _load_config(args)
            rows = cmd_sweep(args.counts, args.sets_per_point, cfg.seed)
            table = sweep_table(rows)
            out = Path(args.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / "sweep.tsv").write_text(table)
            (out / "sweep.json").write_text(json.dumps(rows, indent=1))
            print(table, end="")
        elif args.command == "train":
            seed = args.seed if args.seed is not None else 0
            hp = Hyperparameters(hidden_layers=tuple(args.hidden), batch_size=args.batch_size)
            ckpt = cmd_train(
                args.taskset, hp, seed, args.out_dir,
                duration_s=args.duration, tag=args.tag,
                eq5_check=not args.no_eq5, validation_scope=args.scope,
            )
            print(f"checkpoint written to {ckpt}")
        elif args.command == "evaluate":
            seed = args.seed if args.seed is not None else 0
            doc = cmd_evaluate(
                args.taskset, args.checkpoint, seed,
                duration_s=args.duration,
                eq5_check=not args.no_eq5, validation_scope=args.scope,
            )
            text = json.dumps(doc, indent=1)
            if args.out:
                Path(args.out).parent.mkdir(parents=True, exist_ok=True)
                Path(args.out).write_text(text)
            print(text)
        elif args.command == "compare":
            report = cmd_compare(args.results_dir)
            if args.out:
                Path(args.out).write_text(json.dumps(report, indent=1))
            print(comparison_table(report), end="")
        elif args.command == "analyze":
            ts = deserialize_taskset(Path(args.taskset).read_bytes())
            print(json.dumps(schedulability_report(ts), indent=1))
    except (ParseError, InvariantError, CheckpointError, ValueError) as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UnschedulableError as exc:
        print(f"error[unschedulable]: {exc}", file=sys.stderr)
        return EXIT_UNSCHEDULABLE
    except FileNotFoundError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_IO
    except GenerationError as exc:
        print(f"error[generation]: {exc}", file=sys.stderr)
        return EXIT_GENERATION
    return 0


if __name__ == "__main__":
    sys.exit(main())
