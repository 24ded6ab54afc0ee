"""Command line entry point: ``warpgrad <command> ...``.

Exit codes: 0 success, 1 gradcheck failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import ConfigError, ContractError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="warpgrad", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    g.add_argument("--op", default="all", help="op name or 'all'")
    g.add_argument("--tol", type=float, default=None, help="override every op's tolerance")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--list", action="store_true", help="list op names and exit")

    for name in ("train-flow", "train-gen", "train-anim", "train-men"):
        t = sub.add_parser(name)
        t.add_argument("config", nargs="?", help="JSON config (same as --config)")
        t.add_argument("--config", dest="config_opt")
        t.add_argument("--seed", type=int)
        t.add_argument("--out")
        t.add_argument("--steps", type=int, help="override schedule.steps")
        t.add_argument("--warm-start", dest="warm_start")
        t.add_argument("--print-config", action="store_true", help="show the resolved config and exit")

    for name in ("eval", "demo"):
        e = sub.add_parser(name)
        e.add_argument("checkpoint")
        e.add_argument("taskdir")
        e.add_argument("--out", default=None)
        e.add_argument("--seed", type=int, default=0)

    m = sub.add_parser("make-task", help="generate a synthetic task directory")
    m.add_argument("kind", help="translation, rotation, affine, articulated, skeleton or clip")
    m.add_argument("--out", required=True)
    m.add_argument("--size", type=int, default=64)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--frames", type=int, default=None)
    m.add_argument("--sigma-n", dest="sigma_n", type=float, default=2.0)
    return p


def _gradcheck(args) -> int:
    from .suite import OPS, run_suite

    if args.list:
        print("\n".join(OPS))
        return EXIT_OK
    if args.op != "all" and args.op not in OPS:
        print(f"warpgrad gradcheck: unknown op {args.op!r}; known ops: {', '.join(OPS)}", file=sys.stderr)
        return EXIT_USAGE
    names = list(OPS) if args.op == "all" else [args.op]
    reports = run_suite(names, seed=args.seed, tol=args.tol)
    print(f"{'op':<28} {'max_rel_err':>12} {'tol':>8}  status")
    for r in reports:
        print(f"{r.name:<28} {r.max_rel_err:>12.3e} {r.tolerance:>8.0e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in reports if not r.passed]
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _train(args) -> int:
    from .config import config_from_dict, describe, load_config

    path = args.config_opt or args.config
    overrides = {"command": args.cmd, "seed": args.seed, "out": args.out, "warm_start": args.warm_start}
    cfg = load_config(path, overrides) if path else config_from_dict({}, overrides)
    if args.steps is not None:
        if args.steps < 0:
            raise ConfigError([f"--steps must be >= 0, got {args.steps}"])
        cfg.schedule.steps = args.steps
    if args.print_config:
        print("\n".join(describe(cfg)))
        return EXIT_OK
    from .training import run_command

    summary = run_command(cfg)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _eval(args) -> int:
    from pathlib import Path

    from .evaluation import demo, write_eval

    out = args.out or str(Path(args.checkpoint).parent / ("eval" if args.cmd == "eval" else "demo"))
    if args.cmd == "eval":
        print(json.dumps(write_eval(args.checkpoint, args.taskdir, out), indent=2, sort_keys=True))
    else:
        for d in demo(args.checkpoint, args.taskdir, out):
            print(d)
    return EXIT_OK


def _make_task(args) -> int:
    from .tasks import WARP_KINDS, gen_clip_task, gen_skeleton_task, gen_warp_task, save_task

    if args.kind in WARP_KINDS:
        task = gen_warp_task(args.kind, args.size, args.seed)
    elif args.kind == "skeleton":
        task = gen_skeleton_task(frames=args.frames or 64, sigma_n=args.sigma_n, seed=args.seed)
    elif args.kind == "clip":
        task = gen_clip_task(frames=args.frames or 4, size=args.size, seed=args.seed)
    else:
        raise ConfigError([f"unknown task kind {args.kind!r}"])
    print(save_task(task, args.out))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"gradcheck": _gradcheck, "eval": _eval, "demo": _eval, "make-task": _make_task}
    try:
        return handlers.get(args.cmd, _train)(args)
    except ConfigError as exc:
        print("configuration error:", file=sys.stderr)
        for v in exc.violations:
            print(f"  - {v}", file=sys.stderr)
        return EXIT_USAGE
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
