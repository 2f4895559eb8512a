"""Command-line pipeline: ``bitbudget {build,learn,allocate,compare,validate}``."""

from __future__ import annotations

import argparse
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import io
from .allocate import SOLVER_ALIASES, pearson_alignment
from .errors import BitBudgetError, UndefinedCorrelationError
from .masks import MODE_ALIASES, train_stage1
from .model import PROJECTIONS
from .pipeline import Artifacts, RunConfig, allocate, build_artifacts, compare, heatmap, holdout_error

CONFIG_FILE = "config.txt"
SHORT_MODE = {v: k for k, v in MODE_ALIASES.items()}


def _tag(mode, budget):
    return f"{SHORT_MODE.get(mode, mode)}_{budget:g}"


def load_config(args):
    overrides = {
        "seed": args.seed,
        "mode": getattr(args, "mode", None),
        "solver": getattr(args, "solver", None),
        "out": args.out,
    }
    if args.config:
        text = Path(args.config).read_text()
    elif args.out and (Path(args.out) / CONFIG_FILE).exists():
        text = (Path(args.out) / CONFIG_FILE).read_text()
    else:
        text = ""
    return RunConfig.parse(text, {k: v for k, v in overrides.items() if v is not None})


def open_artifacts(config, run):
    """Model and pool from ``run`` (hash-checked) plus the calibration stream."""
    model = io.model_from_bytes(run.read("model.bin"))
    pool = io.pool_from_bytes(run.read("pool.bin"), model)
    built = build_artifacts(config, model=model)
    return Artifacts(config, model, pool, built.calibration)


def cmd_build(config, run, out):
    art = build_artifacts(config)
    run.write(CONFIG_FILE, config.dumps())
    run.write("model.bin", io.model_bytes(art.model))
    run.write("pool.bin", io.pool_bytes(art.pool))
    mse = art.pool.mse_table()
    header = ["layer", "proj"] + [f"mse_{b}" for b in art.pool.bits]
    rows = [[m.layer, m.proj, *mse[m]] for m in art.modules]
    table = io.format_csv(header, rows)
    run.write("quant_error.csv", table)
    out.write(table)


def cmd_learn(config, run, out):
    art = open_artifacts(config, run)
    tag = _tag(config.mode, config.b_target)
    lines = ["step total recon deviation lam1 lam2"]

    def log(step, report, state, dual):
        lam1, lam2 = dual.values
        lines.append(f"{step} {report.total:.17g} {report.recon:.17g} {report.deviation:.17g} {lam1:.17g} {lam2:.17g}")

    result = train_stage1(art.model, art.pool, art.calibration, config.stage1(), callback=log)
    scores = result.scores
    final_dev = scores.expected_avg_bits - config.b_target
    lines.append(f"final deviation {final_dev:.17g} expected_avg_bits {scores.expected_avg_bits:.17g}")
    run.write(f"learn_{tag}.log", "\n".join(lines) + "\n")
    run.write(f"scores_{tag}.txt", io.format_scores(scores, art.model.spec.spec_hash()))
    out.write(f"scores_{tag}.txt: expected bits {scores.expected_avg_bits:.4f} (target {config.b_target:g})\n")


def cmd_allocate(config, run, out, budgets, scores_name=None):
    art = open_artifacts(config, run)
    scores_name = scores_name or f"scores_{_tag(config.mode, config.b_target)}.txt"
    scores = io.parse_scores(run.read_text(scores_name))
    if scores.meta["spec_hash"] != art.model.spec.spec_hash():
        raise BitBudgetError(f"{scores_name} was learned for a different model")
    tag = scores_name.removeprefix("scores_").removesuffix(".txt")
    budgets = budgets or config.budget_list
    L = art.model.spec.num_layers

    expected = heatmap(scores.modules, scores.expected_bits(), L)
    run.write(f"heatmap_expected_{tag}.csv", io.format_csv(PROJECTIONS, expected.tolist()))
    report = []
    for b in budgets:
        start = time.perf_counter()
        a = allocate(scores, b, config.solver)
        elapsed = time.perf_counter() - start
        if not a.feasible:
            raise BitBudgetError(f"assignment at {b:g} violates its budget")
        name = f"{tag}_at_{b:g}"
        run.write(f"assignment_{name}.txt", io.format_assignment(a, art.model.spec.spec_hash()))
        grid = heatmap(a.modules, a.as_dict(), L)
        run.write(f"heatmap_{name}.csv", io.format_csv(PROJECTIONS, grid.astype(int).tolist()))
        try:
            r = pearson_alignment(scores, a)
        except UndefinedCorrelationError:
            r = float("nan")
        err = holdout_error(art, a)
        report.append([b, a.realized_avg_bits, a.objective_value, r, err, a.solver, a.optimal])
        out.write(
            f"budget {b:g}: realized {float(a.realized_avg_bits):.4f} bits, pearson {r:.4f}, "
            f"holdout error {err:.6g}, solver {a.solver} ({elapsed * 1e3:.1f} ms)\n"
        )
    header = ["budget", "realized_bits", "objective", "pearson", "holdout_error", "solver", "optimal"]
    run.write(f"allocate_{tag}.csv", io.format_csv(header, report))
    if len(budgets) > 1:
        curve = sorted((row[0], row[4]) for row in report)
        run.write(f"budget_error_{tag}.csv", io.format_csv(["budget", "holdout_error"], curve))


def cmd_compare(config, run, out):
    art = open_artifacts(config, run)
    rows = compare(art, log=lambda msg: out.write(msg + "\n"))
    header = ["method", "budget", "realized_bits", "holdout_error"]
    table = io.format_csv(header, [[r[k] for k in header] for r in rows])
    run.write("compare.csv", table)
    out.write(table)


def cmd_validate(config, run, out):
    names = run.validate()
    if run.has("model.bin"):
        model = io.model_from_bytes(run.read("model.bin"))
        if run.has("pool.bin"):
            io.pool_from_bytes(run.read("pool.bin"), model)
    out.write(f"{len(names)} files verified in {run.root}\n")


def build_parser():
    parser = argparse.ArgumentParser(prog="bitbudget", description="Two-stage mixed-precision bit allocation.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="Stage I seed")
    common.add_argument("--out", metavar="DIR", required=True, help="run directory")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("build", parents=[common], help="build model and candidate pool")
    learn = sub.add_parser("learn", parents=[common], help="Stage I: learn soft scores")
    learn.add_argument("--budget", type=float, help="target average bits")
    learn.add_argument("--mode", choices=sorted(MODE_ALIASES))
    alloc = sub.add_parser("allocate", parents=[common], help="Stage II: solve for a discrete assignment")
    alloc.add_argument("--budget", type=float, action="append", help="target average bits (repeatable)")
    alloc.add_argument("--mode", choices=sorted(MODE_ALIASES), help="which learned scores to use")
    alloc.add_argument("--solver", choices=["auto", "dp", *sorted(SOLVER_ALIASES)])
    alloc.add_argument("--scores", help="scores file name inside the run directory")
    comp = sub.add_parser("compare", parents=[common], help="holdout error of every method")
    comp.add_argument("--solver", choices=["auto", "dp", *sorted(SOLVER_ALIASES)])
    sub.add_parser("validate", parents=[common], help="re-check every artifact against the manifest")
    return parser


def main(argv=None, out=None):
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    threads = int(os.environ.get("BITBUDGET_THREADS", "1"))
    try:
        config = load_config(args)
        if args.command == "learn" and args.budget is not None:
            config = config.replace(b_target=args.budget)
        run = io.RunDirectory(config.out, config.config_hash() if args.command == "build" else None)
        with threadpool_limits(limits=threads) if threads > 0 else nullcontext():
            if args.command == "build":
                cmd_build(config, run, out)
            elif args.command == "learn":
                cmd_learn(config, run, out)
            elif args.command == "allocate":
                cmd_allocate(config, run, out, args.budget, args.scores)
            elif args.command == "compare":
                cmd_compare(config, run, out)
            else:
                cmd_validate(config, run, out)
    except (BitBudgetError, OSError) as exc:
        print(f"bitbudget {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
