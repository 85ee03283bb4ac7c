"""Command-line entry point.

Subcommands: gen-data, augment, pretrain, finetune, eval, inspect.
Exit codes: 0 success, 1 usage error, 2 runtime failure. Inputs are
validated before side effects and outputs are written atomically.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    parameter_count_formula,
    read_header,
)
from .data import (
    DatasetError,
    TaskSpec,
    hindsight_relabel,
    load_dataset,
    save_dataset,
)
from .envs import ENV_NAMES, generate_demos
from .model import ModelConfig
from .rollout import evaluate
from .trainer import ConfigError, finetune, parse_config, pretrain

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="gcdt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="roll the scripted expert and write demos")
    g.add_argument("--env", required=True, choices=ENV_NAMES)
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    a = sub.add_parser("augment", help="hindsight-relabel a demo dataset")
    a.add_argument("--in", dest="in_path", required=True)
    a.add_argument("--out", required=True)

    t = sub.add_parser("pretrain", help="multi-task multi-objective pretraining")
    t.add_argument("--config", required=True)

    f = sub.add_parser("finetune", help="single-task action-only training")
    f.add_argument("--config", required=True)
    f.add_argument("--init", default=None, help="checkpoint to start from")

    e = sub.add_parser("eval", help="success rate over an episodes x seeds grid")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--env", required=True, choices=ENV_NAMES)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated list")
    e.add_argument("--out", default=None, help="write report JSON here instead of stdout")

    i = sub.add_parser("inspect", help="print a checkpoint's manifest and specs")
    i.add_argument("--ckpt", required=True)

    return p


def _cmd_gen_data(args) -> int:
    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    report = generate_demos(args.env, args.episodes, args.seed, args.out)
    print(json.dumps(report, indent=2))
    return 0


def _cmd_augment(args) -> int:
    dataset = load_dataset(args.in_path)
    if any(tr.provenance != "original" for tr in dataset.trajectories):
        raise UsageError(
            f"{args.in_path} already carries provenance flags; refusing to "
            "augment twice"
        )
    out = hindsight_relabel(dataset)
    save_dataset(out, args.out)
    print(
        json.dumps(
            {
                "input_trajectories": len(dataset),
                "relabeled": len(out) - len(dataset),
                "output_trajectories": len(out),
            },
            indent=2,
        )
    )
    return 0


def _cmd_pretrain(args) -> int:
    config = parse_config(args.config)
    if config.mode != "pretrain":
        raise UsageError(f"config mode is {config.mode!r}, expected pretrain")
    _, log = pretrain(config)
    last = next(
        (r for r in reversed(log.records) if r.get("type") == "step"), None
    )
    print(
        json.dumps(
            {
                "checkpoint": config.checkpoint_out,
                "steps": config.steps,
                "final_losses": last["losses"] if last else {},
            },
            indent=2,
        )
    )
    return 0


def _cmd_finetune(args) -> int:
    config = parse_config(args.config)
    if config.mode != "finetune":
        raise UsageError(f"config mode is {config.mode!r}, expected finetune")
    _, log = finetune(config, init_checkpoint=args.init)
    last = next(
        (r for r in reversed(log.records) if r.get("type") == "step"), None
    )
    fresh = next(
        (r for r in log.records if r.get("type") == "finetune_summary"), {}
    )
    print(
        json.dumps(
            {
                "checkpoint": config.checkpoint_out,
                "steps": config.steps,
                "final_losses": last["losses"] if last else {},
                "fresh_adapters": fresh.get("fresh_adapters", []),
            },
            indent=2,
        )
    )
    return 0


def _cmd_eval(args) -> int:
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    except ValueError as e:
        raise UsageError(f"bad --seeds list: {e}") from e
    if args.episodes < 1 or not seeds:
        raise UsageError("--episodes must be >= 1 and --seeds non-empty")
    bundle = load_checkpoint(args.ckpt)
    report = evaluate(args.env, bundle, episodes=args.episodes, seeds=seeds)
    text = report.dumps()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


def _cmd_inspect(args) -> int:
    header = read_header(args.ckpt)
    config = ModelConfig.from_json(header["config"])
    specs = {k: TaskSpec.from_json(v) for k, v in header["task_specs"].items()}
    total = 0
    print(f"config: {json.dumps(header['config'])}")
    print("task_specs:")
    for k, v in header["task_specs"].items():
        print(f"  {k}: {json.dumps(v)}")
    print("parameters:")
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        n = 1
        for s in shape:
            n *= s
        total += n
        print(f"  {entry['name']}  shape={shape}  offset={entry['offset']}")
    print(f"total_parameters: {total}")
    print(f"closed_form_count: {parameter_count_formula(config, specs)}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "augment": _cmd_augment,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "inspect": _cmd_inspect,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR
    try:
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except (ConfigError, DatasetError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
