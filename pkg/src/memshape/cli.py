"""Command-line entry point: ``memshape {train,eval,compare,curves,dump-layout}``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from .config import ExperimentConfig
from .exceptions import MemshapeError, TrainingDivergenceError
from .experiment import compare_runs, emit_curves, run_eval, run_sweep, run_train
from .gridworlds import make_env

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _seed_list(text: str) -> list[int]:
    """``"0,1,2"`` or ``"10000-10099"`` (inclusive) or a mix of both."""
    seeds = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            elif part:
                seeds.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memshape", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train one run per seed")
    train.add_argument("--config", type=Path, help="JSON config file (flat keys)")
    train.add_argument("--env", choices=("frozenlake", "doorkey"))
    train.add_argument("--size", type=int, help="DoorKey grid size N")
    train.add_argument("--seed", type=int, help="train a single seed (overrides the config's seeds)")
    train.add_argument("--seeds", type=_seed_list, help="seed list, e.g. 0-4")
    train.add_argument("--prior", help="prior memory graph (JSON)")
    train.add_argument("--shaping", type=_on_off, help="on|off")
    train.add_argument("--llm", choices=("off", "mock", "http"))
    train.add_argument("--llm-script", help="JSON list of scripted replies for --llm mock")
    train.add_argument("--total-steps", type=int)
    train.add_argument("--horizon", type=int)
    train.add_argument("--out", type=Path, required=True, help="run directory")

    ev = sub.add_parser("eval", help="greedy evaluation of a checkpoint on unseen seeds")
    ev.add_argument("checkpoint", type=Path, help="checkpoint file or run directory")
    ev.add_argument("--env", choices=("frozenlake", "doorkey"))
    ev.add_argument("--seeds", type=_seed_list, default=list(range(10_000, 10_100)))
    ev.add_argument("--episodes", type=int, default=1, help="episodes per seed")
    ev.add_argument("--out", type=Path, help="write the report as JSON")

    cmp_ = sub.add_parser("compare", help="steps-to-threshold comparison of two run sets")
    cmp_.add_argument("--a", nargs="+", required=True, type=Path, help="runs of method A")
    cmp_.add_argument("--b", nargs="+", required=True, type=Path, help="runs of method B")
    cmp_.add_argument("--threshold", type=float, default=0.5)
    cmp_.add_argument("--window", type=int, default=5)
    cmp_.add_argument("--out", type=Path, help="write the comparison as JSON")

    cur = sub.add_parser("curves", help="aggregate smoothed return curves across runs")
    cur.add_argument("runs", nargs="+", type=Path)
    cur.add_argument("--window", type=int, default=5)
    cur.add_argument("--out", type=Path, required=True, help="output CSV")

    dump = sub.add_parser("dump-layout", help="print an environment layout as text")
    dump.add_argument("--env", choices=("frozenlake", "doorkey"), default="doorkey")
    dump.add_argument("--seed", type=int, default=0)
    dump.add_argument("--size", type=int, default=6)
    dump.add_argument("--slippery", action="store_true")
    return parser


def _train(args) -> int:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    cfg = cfg.override(env=args.env, prior=args.prior, shaping=args.shaping, llm=args.llm,
                       llm_script=args.llm_script, total_steps=args.total_steps, horizon=args.horizon, size=args.size,
                       seeds=[args.seed] if args.seed is not None else args.seeds)
    cfg.validate()

    def progress(row):
        logging.getLogger("memshape").info(
            "iter %d steps %d return %.3f success %.2f", row["iteration"], row["env_steps"],
            row["mean_return"], row["success_rate"])

    if len(cfg.seeds) == 1:
        out = run_train(cfg, args.out, progress=progress)
        print(out)
    else:
        for out in run_sweep(cfg, args.out, progress=progress):
            print(out)
    return EXIT_OK


def _eval(args) -> int:
    ckpt = args.checkpoint
    if ckpt.is_dir():
        ckpt = ckpt / "checkpoint_final"
    env = make_env(args.env) if args.env else None
    report = run_eval(ckpt, args.seeds, args.episodes, env=env)
    text = json.dumps(report.to_dict(), indent=1)
    if args.out:
        args.out.write_text(text + "\n", encoding="utf-8")
    print(f"success_rate {report.success_rate:.3f} +- {report.success_std:.3f}  "
          f"mean_return {report.mean_return:.3f} +- {report.return_std:.3f}")
    return EXIT_OK


def _compare(args) -> int:
    result = compare_runs(args.a, args.b, args.threshold, args.window)
    fmt = lambda x: "never" if math.isinf(x) else str(int(x))  # noqa: E731
    for i, (sa, sb) in enumerate(zip(result.steps_a, result.steps_b)):
        print(f"run {i}: A {fmt(sa)}  B {fmt(sb)}")
    print(f"wins A {result.wins_a}  wins B {result.wins_b}  ties {result.ties}")
    if args.out:
        args.out.write_text(json.dumps(result.to_dict(), indent=1) + "\n", encoding="utf-8")
    return EXIT_OK


def _curves(args) -> int:
    emit_curves(args.runs, args.out, args.window)
    print(args.out)
    return EXIT_OK


def _dump_layout(args) -> int:
    env = make_env(args.env, size=args.size, slippery=args.slippery)
    env.reset(seed=args.seed)
    print(env.render_text())
    return EXIT_OK


COMMANDS = {"train": _train, "eval": _eval, "compare": _compare, "curves": _curves,
            "dump-layout": _dump_layout}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # ``--dump-layout`` is accepted as a flag spelling of the subcommand
    if "--dump-layout" in argv:
        argv.remove("--dump-layout")
        argv.insert(0, "dump-layout")
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except TrainingDivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (MemshapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
