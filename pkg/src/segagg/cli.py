"""Command-line entry point: ``segagg {gradcheck,oracle,flops,train-demo}``.

Exit codes: 0 success, 1 check failure, 2 usage or parse error.
All randomness derives from ``--seed`` through numpy's PCG64 generator.
Set ``DSA_LOG=debug`` or ``DSA_LOG=info`` for progress on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from fractions import Fraction

from . import backbone as bb
from . import cost, gradcheck, oracle
from .dsa import DsaConfig

log = logging.getLogger("segagg")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

ORACLE_TOLERANCE = 1e-12


def _fraction(text: str) -> float:
    try:
        value = float(Fraction(text))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number or fraction: {text!r}") from None
    return value


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _emit(payload: dict, table: str, fmt: str) -> None:
    if fmt == "json":
        sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write(table)


# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    seeds = [args.seed + i for i in range(args.seeds)]
    names = args.ops.split(",") if args.ops else None
    if names:
        unknown = [n for n in names if n not in gradcheck.CASES]
        if unknown:
            log.error("unknown ops: %s", ", ".join(unknown))
            return EXIT_USAGE
    results = gradcheck.run_suite(seeds, names, jobs=args.jobs)
    failed = [r for r in results if not r.passed]
    payload = {
        "step": gradcheck.STEP,
        "tolerance": gradcheck.TOLERANCE,
        "seeds": seeds,
        "ops": [
            {"op": r.name, "worst_rel_error": r.worst_error, "worst_seed": r.worst_seed, "passed": r.passed}
            for r in results
        ],
        "failed": [r.name for r in failed],
        "passed": not failed,
    }
    lines = [f"{'op':<28} {'worst rel err':>14} {'seed':>6}  status\n"]
    for r in results:
        lines.append(f"{r.name:<28} {r.worst_error:>14.3e} {r.worst_seed:>6}  {'ok' if r.passed else 'FAIL'}\n")
    for r in failed:
        lines.append(f"FAIL {r.name}: relative error {r.worst_error:.3e} at seed {r.worst_seed}\n")
    lines.append(f"{len(results) - len(failed)}/{len(results)} ops within {gradcheck.TOLERANCE:g}\n")
    _emit(payload, "".join(lines), args.format)
    return EXIT_FAIL if failed else EXIT_OK


def _oracle_cell(cell, base_seed):
    return oracle.check_cell(cell, base_seed=base_seed)


def cmd_oracle(args) -> int:
    cells = oracle.sweep_grid(max_extent=args.max_extent, seeds=range(args.draws))
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(args.jobs) as pool:
            devs = list(pool.map(_oracle_cell, cells, [args.seed] * len(cells), chunksize=8))
    else:
        devs = [_oracle_cell(c, args.seed) for c in cells]
    worst_i = max(range(len(cells)), key=lambda i: devs[i])
    worst = devs[worst_i]
    bad = [cells[i].as_tuple() for i, d in enumerate(devs) if not d < ORACLE_TOLERANCE]
    shape_keys = ["channels", "snippets", "frames", "height", "width", "draw"]
    payload = {
        "cells": len(cells),
        "max_abs_deviation": worst,
        "worst_cell": dict(zip(shape_keys, cells[worst_i].as_tuple())),
        "tolerance": ORACLE_TOLERANCE,
        "failures": [dict(zip(shape_keys, b)) for b in bad],
        "passed": not bad,
    }
    table = (
        f"segment_conv vs conv4d(embed): {len(cells)} cells, max extent {args.max_extent}\n"
        f"max |deviation| = {worst:.3e} at (C,U,T,H,W,draw)={cells[worst_i].as_tuple()}\n"
    )
    for b in bad:
        table += f"FAIL (C,U,T,H,W,draw)={b}\n"
    table += "ok\n" if not bad else f"{len(bad)} cells exceed {ORACLE_TOLERANCE:g}\n"
    _emit(payload, table, args.format)
    return EXIT_FAIL if bad else EXIT_OK


def cmd_flops(args) -> int:
    try:
        arch = cost.load_arch(args.arch)
        report = cost.arch_cost(arch, args.frames, args.res, args.u, args.classes)
        overhead = None
        if args.dsa:
            stages = args.dsa_stages.split(",")
            placement = cost.every_other_block(arch, stages)
            cfg = DsaConfig(1, args.u, args.kernel_size, args.alpha, args.beta)
            overhead = cost.dsa_overhead(arch, placement, cfg, args.frames, args.res, args.position)
    except (cost.ArchSpecError, KeyError) as e:
        log.error("%s", e)
        sys.stderr.write(f"error: {e}\n")
        return EXIT_USAGE
    payload = {"report": report.to_dict(), "gflops": report.gflops, "mparams": report.total_params / 1e6}
    if args.params:
        table = f"{arch.name} ({report.lines[-1].output[0]} classes): {report.total_params} params = {report.total_params / 1e6:.2f}M\n"
    else:
        table = cost.report_render(report)
    if overhead is not None:
        rel_macs = overhead.total_macs / report.total_macs
        rel_params = overhead.total_params / report.total_params
        payload["dsa"] = {
            "report": overhead.to_dict(),
            "relative_macs": rel_macs,
            "relative_params": rel_params,
        }
        table += cost.report_render(overhead)
        table += f"# DSA overhead: {rel_macs:.3e} of MACs, {rel_params:.3e} of params\n"
    _emit(payload, table, args.format)
    return EXIT_OK


def _train_trial(args, trial: int) -> dict:
    seed = args.seed + trial
    ds = bb.make_order_dataset(args.n, seed=seed)
    train, holdout = bb.split_dataset(ds, args.holdout)
    out = {"trial": trial, "seed": seed}
    for label, beta in (("baseline", 0.0), ("dsa", args.beta)):
        net = bb.make_toy_net(
            width=args.width,
            beta=beta,
            alpha=args.alpha,
            kernel_size=args.kernel_size,
            position=args.position,
            seed=seed,
        )
        try:
            res = bb.train_toy(net, train, holdout, args.epochs, args.lr, seed=seed, batch_size=args.batch_size)
        except bb.TrainingDiverged as e:
            out[label] = {"diverged": str(e)}
            continue
        out[label] = {
            "history": res.history,
            "holdout_acc": res.final["holdout_acc"],
            "train_acc": res.final["train_acc"],
        }
        log.info("trial %d %s holdout %.3f", trial, label, res.final["holdout_acc"])
    return out


def cmd_train_demo(args) -> int:
    if args.n % 2:
        sys.stderr.write("error: --n must be even\n")
        return EXIT_USAGE
    trials = range(args.trials)
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(args.jobs) as pool:
            runs = list(pool.map(_train_trial, [args] * len(trials), trials))
    else:
        runs = [_train_trial(args, t) for t in trials]
    diverged = [(r["trial"], k) for r in runs for k in ("baseline", "dsa") if "diverged" in r[k]]
    lines = []
    for r in runs:
        for k in ("baseline", "dsa"):
            if "diverged" in r[k]:
                lines.append(f"trial {r['trial']} {k:<8} DIVERGED: {r[k]['diverged']}\n")
                continue
            hist = " ".join(f"{h['holdout_acc']:.3f}" for h in r[k]["history"])
            lines.append(f"trial {r['trial']} {k:<8} holdout history: {hist}\n")
        if not any("diverged" in r[k] for k in ("baseline", "dsa")):
            r["gap_points"] = 100.0 * (r["dsa"]["holdout_acc"] - r["baseline"]["holdout_acc"])
            lines.append(
                f"trial {r['trial']} baseline {100 * r['baseline']['holdout_acc']:.1f}%  "
                f"dsa {100 * r['dsa']['holdout_acc']:.1f}%  gap {r['gap_points']:+.1f} points\n"
            )
    payload = {
        "config": {
            "n": args.n,
            "epochs": args.epochs,
            "lr": args.lr,
            "width": args.width,
            "beta": args.beta,
            "alpha": args.alpha,
            "kernel_size": args.kernel_size,
            "position": args.position,
            "batch_size": args.batch_size,
            "holdout": args.holdout,
        },
        "trials": runs,
        "diverged": [list(d) for d in diverged],
    }
    _emit(payload, "".join(lines), args.format)
    return EXIT_FAIL if diverged else EXIT_OK


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=_seed, default=0, help="base seed (u64)")
    shared.add_argument("--format", choices=("table", "json"), default="table")
    shared.add_argument("--jobs", type=_positive, default=1, help="worker processes")

    dsa_flags = argparse.ArgumentParser(add_help=False)
    dsa_flags.add_argument("--alpha", type=_positive, default=2, help="MLP width factor")
    dsa_flags.add_argument("--beta", type=_fraction, default=1 / 8, help="aggregated channel fraction, e.g. 1/8")
    dsa_flags.add_argument("--kernel-size", type=_positive, default=3, help="kernel taps L (odd)")
    dsa_flags.add_argument("--position", choices=bb.POSITIONS, default="II")

    p = _Parser(prog="segagg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gradcheck", parents=[shared], help="finite-difference gradient suite")
    g.add_argument("--seeds", type=_positive, default=10, help="number of seeds per op")
    g.add_argument("--ops", default="", help="comma-separated subset of ops")
    g.set_defaults(func=cmd_gradcheck)

    o = sub.add_parser("oracle", parents=[shared], help="segment_conv vs brute-force 4D convolution")
    o.add_argument("--max-extent", type=_positive, default=2, help="largest T, H, W in the sweep")
    o.add_argument("--draws", type=_positive, default=5, help="random draws per shape")
    o.set_defaults(func=cmd_oracle)

    f = sub.add_parser("flops", parents=[shared, dsa_flags], help="analytic MACs and parameters")
    f.add_argument("--arch", default="i3d_r50", help="built-in name or path to an ArchSpec JSON file")
    f.add_argument("--frames", type=_positive, default=4)
    f.add_argument("--res", type=_positive, default=224)
    f.add_argument("--u", type=_positive, default=1, help="snippets per clip")
    f.add_argument("--classes", type=_positive, default=None, help="override classifier width")
    f.add_argument("--params", action="store_true", help="print the parameter total only")
    f.add_argument("--dsa", action="store_true", help="append DSA overhead")
    f.add_argument("--dsa-stages", default="res3,res4", help="stages receiving DSA blocks")
    f.set_defaults(func=cmd_flops)

    t = sub.add_parser("train-demo", parents=[shared, dsa_flags], help="order task: baseline vs DSA")
    t.add_argument("--n", type=_positive, default=2000, help="dataset size (even)")
    t.add_argument("--holdout", type=float, default=0.25)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--batch-size", type=_positive, default=32)
    t.add_argument("--width", type=_positive, default=16)
    t.add_argument("--trials", type=_positive, default=3, help="seeds seed..seed+trials-1")
    t.set_defaults(func=cmd_train_demo)
    return p


def main(argv=None) -> int:
    level = os.environ.get("DSA_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr, format="%(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
