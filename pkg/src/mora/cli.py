"""Command-line entry point.

Subcommands: ``train``, ``eval``, ``generate``, ``parse``, ``synth``,
``ablate``. Exit codes: 0 success, 1 usage error, 2 runtime error. The
MORA_SEED environment variable overrides any configured or flag-given seed.
"""

from __future__ import annotations

import argparse
import os
import sys

from mora import data as data_mod
from mora import evaluation, smiles, training
from mora.config import RunConfig

__all__ = ["cli", "main"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage problems instead of argparse's 2
        raise _UsageError(f"{self.prog}: {message}")


def _add_config_flags(p):
    p.add_argument("--config", help="config file ('key = value' lines)")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--preset", choices=("desk", "paper"), help="built-in preset")


def _resolve_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.from_file(args.config, preset=getattr(args, "preset", None))
    else:
        cfg = RunConfig.defaults(getattr(args, "preset", None) or "desk")
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides({"seed": args.seed})
    return cfg.with_env_seed()


def build_parser() -> _Parser:
    parser = _Parser(prog="mora", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="print the adjacency listing of a SMILES string")
    p.add_argument("smiles")

    p = sub.add_parser("synth", help="generate a synthetic JSONL dataset")
    p.add_argument("--task", required=True, choices=data_mod.TASKS)
    p.add_argument("--n", required=True, type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-atoms", type=int, default=9)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the weight generator (or static baseline)")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="JSONL training set")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="loss log CSV path")
    p.add_argument("--static", action="store_true", help="train the static baseline")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a JSONL dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="directory for the report CSV and text table")
    p.add_argument("--max-new", type=int)

    p = sub.add_parser("generate", help="decode one answer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--smiles")
    p.add_argument("--max-new", type=int)

    p = sub.add_parser("ablate", help="run an ablation sweep")
    _add_config_flags(p)
    p.add_argument("--kind", required=True, choices=evaluation.ABLATION_KINDS)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="directory for per-sweep reports")
    return parser


def _run(args) -> int:
    if args.command == "parse":
        print(smiles.adjacency_text(smiles.parse_smiles(args.smiles)))
        return 0

    if args.command == "synth":
        examples = data_mod.synth_dataset(
            args.task, args.n, args.seed, max_atoms=args.max_atoms
        )
        data_mod.save_dataset(args.out, examples)
        print(f"wrote {len(examples)} examples to {args.out}")
        return 0

    if args.command == "train":
        cfg = _resolve_config(args)
        dataset = data_mod.load_dataset(args.data)
        runner = training.static_lora_train if args.static else training.train
        run = runner(cfg, dataset, checkpoint_path=args.out, log_path=args.log)
        final = run.losses[-1][2] if run.losses else float("nan")
        print(f"trained {len(run.losses)} steps; final loss {final:.6g}; saved {args.out}")
        return 0

    if args.command == "eval":
        model, _opt = training.load_model(args.checkpoint)
        dataset = data_mod.load_dataset(args.data)
        report = evaluation.evaluate(model, dataset, name="eval", max_new=args.max_new)
        text = evaluation.reports_to_text([report])
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            evaluation.reports_to_csv([report], os.path.join(args.out, "report.csv"))
            with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
                fh.write(text)
        print(text, end="")
        return 0

    if args.command == "generate":
        model, _opt = training.load_model(args.checkpoint)
        ex = data_mod.TrainingExample(args.instruction, "?", args.smiles)
        print(evaluation.decode_answer(model, ex, max_new=args.max_new))
        return 0

    if args.command == "ablate":
        cfg = _resolve_config(args)
        dataset = data_mod.load_dataset(args.data)
        reports = evaluation.run_ablation(args.kind, cfg, dataset, out_dir=args.out)
        print(evaluation.reports_to_text(reports), end="")
        return 0

    raise _UsageError(f"unknown command {args.command!r}")


def cli(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _run(args)
    except _UsageError as err:
        print(str(err), file=sys.stderr)
        return 1
    except SystemExit as err:  # -h/--help
        code = err.code or 0
        return int(code) if isinstance(code, int) else 1
    except Exception as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli(sys.argv[1:]))
