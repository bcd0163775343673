"""Command line entry point: ``speclab <command> CONFIG [flags]``.

Exit status is 0 when every pass flag of the command is true, 1 when a
check fails and 2 on configuration or model-file errors.
"""

from __future__ import annotations

import argparse
import os
import sys

from .errors import SpecLabError
from .harness import COMMANDS, SWEEP_AXES, ExperimentConfig, cmd_gen_fixtures, cmd_sweep


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", help="experiment config (JSON)")
    p.add_argument("--output", help="CSV path (default: <config>.<command>.csv next to config)")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--decoders", nargs="+", metavar="KIND")
    p.add_argument("--max-new-tokens", type=int, dest="max_new_tokens")
    p.add_argument("--gamma", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--num-beams", type=int, dest="num_beams")
    p.add_argument("--block-size", type=int, dest="block_size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="speclab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [("decode", "decode prompts and write per-run CSV rows"),
                        ("verify-dist", "check output laws against exact oracles"),
                        ("sweep", "sweep K, tau or num_beams"),
                        ("compare", "compare decoders under the cost model")]:
        p = sub.add_parser(name, help=help_)
        _add_overrides(p)
        if name == "sweep":
            p.add_argument("--axis", choices=SWEEP_AXES)
            p.add_argument("--values", nargs="+", type=float)
    g = sub.add_parser("gen-fixtures", help="write fixture models and example configs")
    g.add_argument("out_dir")
    g.add_argument("--seeds", nargs="+", type=int, default=[7])
    g.add_argument("--vocab-size", type=int, default=4, dest="vocab_size")
    g.add_argument("--order", type=int, default=1)
    g.add_argument("--divergence", type=float, default=0.5)
    return parser


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    data = cfg.to_dict()
    for key in ("output", "seed", "trials", "decoders"):
        if getattr(args, key) is not None:
            data[key] = getattr(args, key)
    decode = dict(data["decode"])
    for key in ("max_new_tokens", "gamma", "tau", "num_beams", "block_size"):
        if getattr(args, key) is not None:
            decode[key] = getattr(args, key)
    data["decode"] = decode
    if args.output is not None:
        # command-line paths are relative to the working directory
        data["output"] = os.path.abspath(args.output)
    return ExperimentConfig.from_dict(data, cfg.base_dir, cfg.name)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-fixtures":
            paths = cmd_gen_fixtures(args.out_dir, args.seeds, args.vocab_size, args.order,
                                     args.divergence)
            print(f"gen-fixtures: wrote {len(paths)} files to {args.out_dir}")
            return 0
        cfg = _load(args)
        if args.command == "sweep":
            values = args.values
            if values is not None and (args.axis or cfg.sweep.get("axis")) != "tau":
                values = [int(v) for v in values]
            result = cmd_sweep(cfg, args.axis, values)
        else:
            result = COMMANDS[args.command](cfg)
    except (SpecLabError, OSError) as exc:
        print(f"speclab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    for r in result.reports:
        print(r.line())
    print(result.summary + (f" -> {result.path}" if result.path else ""))
    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())
