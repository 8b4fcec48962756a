"""Command-line entry point: ``ralb <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from ralb.harness import (
    DataError,
    RunManifest,
    StageError,
    UsageError,
    execute,
    make_manifest,
    resolve_config,
    study_plan,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _csv(kind=str):
    def parse(text):
        return [kind(x) for x in text.split(",") if x.strip()]

    return parse


def _pairs(text):
    """name=path,name=path -> dict"""
    out = {}
    for item in text.split(","):
        name, sep, path = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected name=path, got {item!r}")
        out[name.strip()] = path.strip()
    return out


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON config; flags override its values")
    p.add_argument("--seed", type=int, help="global seed (default: $RALB_SEED or 0)")
    p.add_argument("--workers", type=int, default=1, help="worker cap; never changes results")
    if out_required:
        p.add_argument("--out", type=Path, required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ralb", description="Adversarial fine-tuning laboratory for dual encoders.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--train-classes", dest="train_classes", type=_csv())
    p.add_argument("--zeroshot-classes", dest="zeroshot_classes", type=_csv())
    p.add_argument("--task", choices=["ObjectLabel", "AttributeLabel"])
    p.add_argument("--partition", choices=["train", "zeroshot"])
    p.add_argument("--caption-style", dest="caption_style", choices=["rich", "short", "mixed"])
    p.add_argument("--resolution", type=int)
    p.add_argument("--name")

    p = sub.add_parser("pretrain", help="clean contrastive pretraining")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="lr0", type=float)

    p = sub.add_parser("finetune", help="adversarial fine-tuning of the vision encoder")
    _common(p)
    p.add_argument("--init", help="pretrained checkpoint")
    p.add_argument("--data")
    p.add_argument("--method", choices=["qt-aft", "qt-aft-label", "fare", "tecoa"])
    p.add_argument("--lambda", dest="lambda", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="lr0", type=float)
    p.add_argument("--epsilon", help="training budget, e.g. 4/255")
    p.add_argument("--caption-mode", dest="caption_mode")

    p = sub.add_parser("attack", help="craft adversarial examples")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--attack", help="pgd10-ce, pgd10-dlr, pgd10-cw, l2-pgd10 or ce+dlr")
    p.add_argument("--epsilon")
    p.add_argument("--steps", type=int)
    p.add_argument("--step-size", dest="step_size")
    p.add_argument("--objective", help="sup-label, unsup, sup-caps, unsup+sup-label, qt-aft, dlr, cw")
    p.add_argument("--lambda", dest="lambda", type=float)
    p.add_argument("--n", type=int)

    p = sub.add_parser("eval", help="clean and robust zero-shot accuracy")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data", type=_csv(), help="comma-separated dataset directories")
    p.add_argument("--zero-shot", dest="zero_shot", type=_csv(), help="dataset names counted as zero-shot")
    p.add_argument("--attack", dest="attacks", type=_csv())
    p.add_argument("--epsilon")
    p.add_argument("--n", type=int)
    p.add_argument("--name")

    p = sub.add_parser("analyze-deviation", help="cosine deviation of adversarial embeddings")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--n", type=int)
    p.add_argument("--seeds", type=_csv(int))
    p.add_argument("--lambda", dest="lambda", type=float)
    p.add_argument("--epsilon")

    p = sub.add_parser("ablate-captions", help="word-class caption ablation")
    _common(p, out_required=False)
    p.add_argument("--mode", help="full, nouns-only, no-adj-adv, no-nouns, no-function-words, shuffle-words")
    p.add_argument("--in", dest="in", help="captions JSONL or dataset directory")
    p.add_argument("--out", help="output JSONL")

    p = sub.add_parser("caption-stats", help="caption length and image-caption similarity histograms")
    _common(p)
    p.add_argument("--captions")
    p.add_argument("--checkpoint")
    p.add_argument("--data")

    p = sub.add_parser("sweep-lambda", help="QT-AFT lambda sweep")
    _common(p)
    p.add_argument("--init")
    p.add_argument("--data")
    p.add_argument("--eval-data", dest="eval_data", type=_csv())
    p.add_argument("--lambdas", type=_csv(float))
    p.add_argument("--epochs", type=int)
    p.add_argument("--n-eval", dest="n_eval", type=int)

    p = sub.add_parser("report", help="method x dataset x attack matrix")
    _common(p)
    p.add_argument("--checkpoints", type=_pairs, help="name=path,...")
    p.add_argument("--data", type=_pairs, help="name=path,...")
    p.add_argument("--zero-shot", dest="zero_shot", type=_csv())
    p.add_argument("--attack", dest="attacks", type=_csv())
    p.add_argument("--n", type=int)

    p = sub.add_parser("full-study", help="the whole desk study, end to end")
    _common(p)
    p.add_argument("--dry-run", action="store_true", help="print the stage plan and exit")

    p = sub.add_parser("replay", help="re-run a pipeline from its run manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--workers", type=int, default=1)
    return parser


_NON_CONFIG = {"command", "config", "workers", "out", "dry_run"}


def _overrides(args: argparse.Namespace) -> dict:
    ov = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG}
    if args.command == "finetune" and ov.pop("epsilon", None) is not None:
        ov["attack"] = {"epsilon": args.epsilon}
    if args.command == "ablate-captions":
        ov["out"] = str(args.out) if args.out is not None else None
    return ov


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return cfg


def main(argv=None) -> int:
    torch.set_num_threads(1)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if getattr(args, "workers", 1) < 1:
        print("ralb: error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "replay":
            manifest = RunManifest.load(args.manifest)
            out = args.out
        else:
            cfg = resolve_config(args.command, _read_config(args.config), _overrides(args))
            if args.command == "full-study" and args.dry_run:
                for i, line in enumerate(study_plan(cfg), 1):
                    print(f"{i}. {line}")
                return EXIT_OK
            manifest = make_manifest(args.command, cfg)
            out = args.out if args.command != "ablate-captions" else None
        for path in execute(manifest, out, workers=args.workers, log=lambda m: print(m, file=sys.stderr)):
            print(path)
        return EXIT_OK
    except UsageError as e:
        print(f"ralb: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"ralb: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except StageError as e:
        print(f"ralb: {e}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(e.cause, (FloatingPointError, ArithmeticError)) else EXIT_DATA
    except (FloatingPointError, ArithmeticError) as e:
        print(f"ralb: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"ralb: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
