"""
cli.py - command-line entry point for the lab.

Subcommands:
    train          train one experiment file (plus --set overrides)
    eval           re-evaluate a checkpoint
    sweep          single-factor sweep around an experiment file
    attack         key-recovery probes against a checkpoint
    verify-theory  numerical checks; exit code 2 if any fails
    gen-data       write a synthetic dataset file

Examples:
    python -m harness train --config configs/synthetic_add.env
    python -m harness sweep --config configs/mnist_mode_b.env --factor gamma
    python -m harness attack --checkpoint runs/mnist-mode-b/checkpoint.json
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import argparse
import pathlib
import sys
from typing import Optional, Sequence

# Import functions from local modules
from harness.attacks import run_attacks
from harness.experiment import SweepSpec, load_config, parse_sweep_values
from harness.sweep import DEFAULT_SWEEP_VALUES, run_sweep
from harness.training import run_eval, run_training
from harness.verify_theory import all_passed, run_verification
from spankey.data import gen_synthetic, save_synthetic
from spankey.errors import SpanKeyError
from utils.utils_config import get_output_root
from utils.utils_logger import logger

#####################################
# Subcommands
#####################################


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.set)
    result = run_training(cfg, args.output)
    for r in result.final:
        logger.info(f"{r.split:5s} {r.protocol:7s} semantic={r.semantic_acc:.4f} reject={r.reject_mass:.4f}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    reports = run_eval(args.checkpoint, args.out)
    for r in reports:
        logger.info(f"{r.split:5s} {r.protocol:7s} top1={r.top1:.4f} semantic={r.semantic_acc:.4f} reject={r.reject_mass:.4f}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    anchor = load_config(args.config, args.set)
    values = parse_sweep_values(args.factor, args.values) if args.values else DEFAULT_SWEEP_VALUES[args.factor]
    root = args.output or get_output_root()
    table = run_sweep(SweepSpec(args.factor, tuple(values), anchor), root)
    if args.plot:
        from consumers.sweep_consumer_spankey import plot_sweep

        plot_sweep(table, pathlib.Path(root).joinpath(f"sweep_{args.factor}.png"))
    return 0


def cmd_attack(args: argparse.Namespace) -> int:
    kinds = tuple(k.strip() for k in args.kinds.split(",") if k.strip())
    out = args.out or pathlib.Path(args.checkpoint).parent.joinpath("attacks")
    run_attacks(
        args.checkpoint,
        kinds,
        budget=args.budget,
        screen_batches=args.screen_batches,
        batch_size=args.batch_size,
        steps=args.steps,
        lr=args.lr,
        n_images=args.images,
        output_path=out,
    )
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    only = tuple(args.only.split(",")) if args.only else None
    results = run_verification(args.out, args.seed, args.scale, args.workers, only)
    if not all_passed(results):
        logger.error("verify-theory: at least one check failed")
        return 2
    logger.info("verify-theory: all checks passed")
    return 0


def cmd_gen_data(args: argparse.Namespace) -> int:
    train, test = gen_synthetic(args.n, args.d, args.classes, args.separation, args.seed)
    save_synthetic(train, test, args.out)
    return 0


#####################################
# Parser
#####################################


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=pathlib.Path, help="experiment file (KEY=VALUE lines)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--output", type=pathlib.Path, help="output root (default SPANKEY_OUTPUT_ROOT)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m harness", description="Key-subspace conditioning lab.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one experiment")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="re-evaluate a checkpoint")
    p.add_argument("--checkpoint", type=pathlib.Path, required=True)
    p.add_argument("--out", type=pathlib.Path, help="report path stem (.csv/.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="single-factor sweep")
    _add_config_args(p)
    p.add_argument("--factor", choices=sorted(DEFAULT_SWEEP_VALUES), required=True)
    p.add_argument("--values", help="';'-separated values, layer sets with '+' (e.g. 0;2;0+2)")
    p.add_argument("--plot", action="store_true", help="also write the sweep figure")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("attack", help="key-recovery probes")
    p.add_argument("--checkpoint", type=pathlib.Path, required=True)
    p.add_argument("--kinds", default="adaptive,blackbox,gradient")
    p.add_argument("--budget", type=int, default=300)
    p.add_argument("--screen-batches", type=int, default=12)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.15)
    p.add_argument("--images", type=int, default=256)
    p.add_argument("--out", type=pathlib.Path, help="report path stem (default next to the checkpoint)")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("verify-theory", help="numerical checks")
    p.add_argument("--out", type=pathlib.Path, default=pathlib.Path("runs/theory"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=1.0, help="Monte Carlo sample-count multiplier")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--only", help="comma-separated check names")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gen-data", help="write a synthetic dataset file")
    p.add_argument("--n", type=int, default=4000)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--separation", type=float, default=6.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=pathlib.Path, default=pathlib.Path("data/synthetic.npz"))
    p.set_defaults(func=cmd_gen_data)
    return parser


#####################################
# Main Function
#####################################


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logger.info(f"START {args.command}")
    try:
        code = args.func(args)
    except SpanKeyError as e:
        logger.error(f"{args.command} failed: {e}")
        code = 1
    logger.info(f"EXIT {args.command} (status {code})")
    return code


#####################################
# Conditional Execution
#####################################

if __name__ == "__main__":
    sys.exit(main())
