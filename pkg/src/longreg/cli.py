"""Command-line entry point: ``longreg {gen,train,register,ffd,eval,stats}``.

Exit codes: 0 success, 1 usage error (bad flags or missing inputs), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger("longreg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Raise instead of exiting so ``run`` owns the exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _existing_file(value: str) -> Path:
    p = Path(value)
    if not p.is_file():
        raise argparse.ArgumentTypeError(f"no such file: {value}")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="overrides the seed of the config (default: config value or 0)")
    common.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = _Parser(prog="longreg", description="Longitudinal registration toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic phantom cohort")
    p.add_argument("--config", type=_existing_file, default=None,
                   help="flat key=value phantom config (defaults when omitted)")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", parents=[common], help="train the registration network")
    p.add_argument("--manifest", type=_existing_file, required=True)
    p.add_argument("--val-manifest", type=_existing_file, default=None)
    p.add_argument("--config", type=_existing_file, default=None)
    p.add_argument("--strategy", choices=["if", "if+ib", "it+if+ib"], default=None)
    p.add_argument("--mmd", choices=["on", "off"], default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("register", parents=[common], help="register one pair with a checkpoint")
    p.add_argument("--ckpt", type=_existing_file, required=True)
    p.add_argument("--moving", type=_existing_file, required=True)
    p.add_argument("--fixed", type=_existing_file, required=True)
    p.add_argument("--moving-mask", type=_existing_file, default=None)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("ffd", parents=[common], help="iterative B-spline baseline on one pair")
    p.add_argument("--moving", type=_existing_file, required=True)
    p.add_argument("--fixed", type=_existing_file, required=True)
    _ffd_flags(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", parents=[common], help="evaluate a method over manifest pairs")
    p.add_argument("--manifest", type=_existing_file, required=True)
    p.add_argument("--pairs", choices=["if", "if+ib"], default="if")
    method = p.add_mutually_exclusive_group(required=True)
    method.add_argument("--ckpt", type=_existing_file)
    method.add_argument("--ffd", action="store_true")
    method.add_argument("--identity", action="store_true")
    _ffd_flags(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("stats", parents=[common], help="paired t-test between two reports")
    p.add_argument("--report-a", type=_existing_file, required=True)
    p.add_argument("--report-b", type=_existing_file, required=True)
    p.add_argument("--metric", default="tre_mm_mean",
                   choices=["dsc", "cd_mm", "mse", "tre_mm_mean", "tre_mm_per_landmark"])
    return parser


def _ffd_flags(p):
    from .ffdreg import FFDConfig

    d = FFDConfig()
    p.add_argument("--cp-spacing", type=int, default=d.cp_spacing)
    p.add_argument("--iters", type=int, default=d.iterations)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--gamma-be", type=float, default=d.gamma_be)


def _ffd_config(args):
    from .ffdreg import FFDConfig

    return FFDConfig(cp_spacing=args.cp_spacing, lr=args.lr, iterations=args.iters,
                     gamma_be=args.gamma_be)


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed)


# ---------------------------------------------------------------- subcommands

def cmd_gen(args) -> int:
    from .phantom import PhantomConfig, load_phantom_config, write_cohort

    cfg = load_phantom_config(args.config) if args.config else PhantomConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    paths = write_cohort(cfg, args.out)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .cohort import load_manifest
    from .trainer import TrainConfig, load_config, train

    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.strategy is not None:
        overrides["strategy"] = args.strategy
    if args.mmd is not None:
        overrides["use_mmd"] = args.mmd == "on"
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = dataclasses.replace(cfg, **overrides)
    ds = load_manifest(args.manifest)
    val = load_manifest(args.val_manifest) if args.val_manifest else None
    res = train(ds, val, cfg, args.out)
    print(f"last checkpoint: {res.checkpoint}")
    if res.best_checkpoint is not None:
        print(f"best checkpoint: {res.best_checkpoint}")
    print(f"loss log: {res.log_path}")
    return EXIT_OK


def cmd_register(args) -> int:
    from .trainer import register
    from .volgrid import Volume3D, read_vol, write_vol

    moving, fixed = read_vol(args.moving), read_vol(args.fixed)
    mask = read_vol(args.moving_mask) if args.moving_mask else None
    for name, v in (("moving", moving), ("fixed", fixed), ("moving-mask", mask)):
        if v is not None and not isinstance(v, Volume3D):
            raise ValueError(f"--{name} must be a single-channel volume")
    reg = register(args.ckpt, moving, mask, fixed)
    args.out.mkdir(parents=True, exist_ok=True)
    write_vol(args.out / "ddf.lvr", reg.ddf)
    write_vol(args.out / "warped_image.lvr", reg.warped_image)
    if reg.warped_mask is not None:
        write_vol(args.out / "warped_mask.lvr", reg.warped_mask)
    print(f"registration time: {reg.seconds:.3f} s")
    return EXIT_OK


def cmd_ffd(args) -> int:
    from .ffdreg import ffd_register
    from .volgrid import read_vol, warp_volume, write_vol

    moving, fixed = read_vol(args.moving), read_vol(args.fixed)
    t0 = time.perf_counter()
    res = ffd_register(moving, fixed, _ffd_config(args))
    seconds = time.perf_counter() - t0
    args.out.mkdir(parents=True, exist_ok=True)
    write_vol(args.out / "ddf.lvr", res.ddf)
    write_vol(args.out / "warped_image.lvr", warp_volume(moving, res.ddf))
    with open(args.out / "trace.csv", "w") as fh:
        fh.write("iteration,loss\n")
        fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(res.trace))
    print(f"loss {res.trace[0]:.6g} -> {res.trace[-1]:.6g} in {seconds:.1f} s")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .cohort import enumerate_pairs, load_manifest
    from .evalstat import evaluate_run, format_table, write_report_csv

    pairs = enumerate_pairs(load_manifest(args.manifest), args.pairs)
    if args.identity:
        fn, method = None, "identity"
    elif args.ffd:
        from .ffdreg import ffd_register

        cfg = _ffd_config(args)
        fn, method = (lambda s: ffd_register(s.moving_image, s.fixed_image, cfg).ddf), "ffd"
    else:
        from .netgrad import load_checkpoint
        from .trainer import register

        params = load_checkpoint(args.ckpt)
        fn = lambda s: register(params, s.moving_image, None, s.fixed_image).ddf  # noqa: E731
        method = str(args.ckpt)
    report = evaluate_run(fn, pairs, method)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(report, args.out)
    print(format_table([report]))
    failed = [c for c in report.cases if c.error]
    for c in failed:
        logger.warning("%s: %s", c.pair_id, c.error)
    ok = sum(1 for c in report.cases if np.isfinite(c.dsc))
    print(f"{ok}/{len(report.cases)} pairs evaluated; report: {args.out}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_stats(args) -> int:
    from .evalstat import compare_reports

    t, p, n = compare_reports(args.report_a, args.report_b, args.metric)
    print(f"metric={args.metric} n={n} t={t:.6g} p={p:.6g}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "register": cmd_register, "ffd": cmd_ffd,
            "eval": cmd_eval, "stats": cmd_stats}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    _seed_everything(0 if args.seed is None else args.seed)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
