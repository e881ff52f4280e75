"""Command-line entry point: ``fedgg {run,gradcheck,partition-stats,compare}``.

Exit codes: 0 success, 1 check or run failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from fedgg import gradcheck, report
from fedgg.config import ConfigError, parse_compare, parse_config
from fedgg.data import DataError, dirichlet_partition, label_entropy, partition_stats, write_partition_stats
from fedgg.federation import build_data, run_experiment, write_metrics_csv

log = logging.getLogger("fedgg")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
OUTPUT_ENV = "FEDGG_OUTPUT_DIR"


def _output_dir(args) -> Path:
    out = Path(args.output or os.environ.get(OUTPUT_ENV) or "runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _default_jobs() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def cmd_run(args) -> int:
    config = parse_config(args.config, args.set)
    if args.timing:
        config = dataclasses.replace(config, record_timing=True)
    out = _output_dir(args)
    records = run_experiment(config, jobs=args.jobs)
    path = out / "metrics.csv"
    write_metrics_csv(records, path)
    summary = report.summarize(config.trainer.variant, records)
    print(f"wrote {path}")
    print(report.format_table([summary]))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    grad_fn = gradcheck.flipped_cosine_grad if args.inject_sign_flip else gradcheck.model_cosine_grad
    results = gradcheck.run_all(seed=args.seed, grad_fn=grad_fn)
    for res in results:
        print(res.line())
    failed = [r for r in results if not r.passed]
    if failed:
        worst = max(failed, key=lambda r: r.max_rel_err / r.tol)
        print(f"gradcheck FAILED: worst suite {worst.name}, case {worst.worst_case}, "
              f"max rel. err {worst.max_rel_err:.3e} >= {worst.tol:.0e}")
        return EXIT_FAIL
    print("gradcheck passed")
    return EXIT_OK


def cmd_partition_stats(args) -> int:
    config = parse_config(args.config, args.set)
    out = _output_dir(args)
    train, _ = build_data(config)
    plan = dirichlet_partition(train, config.num_clients, config.beta,
                               np.random.default_rng(config.seed_for("partition")))
    counts = partition_stats(plan, train)
    path = out / "partition_stats.csv"
    write_partition_stats(counts, path)
    entropy = label_entropy(counts)
    width = max(5, len(str(counts.max())))
    print("client " + " ".join(f"c{c}".rjust(width) for c in range(counts.shape[1])) + "   total  entropy")
    for i, row in enumerate(counts):
        cells = " ".join(str(v).rjust(width) for v in row)
        print(f"{i:>6} {cells} {row.sum():>7}  {entropy[i]:.3f}")
    print(f"mean label entropy {entropy.mean():.4f} nats (max {np.log(counts.shape[1]):.4f})")
    print(f"wrote {path}")
    return EXIT_OK


def compare_runs(spec, jobs: int = 1, out: Path | None = None) -> list[report.RunSummary]:
    """Run every variant x seed of a :class:`~fedgg.config.CompareSpec` and summarise.

    Accuracy curves are averaged over seeds; the target is the baseline's
    seed-averaged final accuracy.
    """
    curves: dict[str, list[list[float]]] = {}
    for name, config in spec.variants:
        curves[name] = []
        for seed in spec.seeds:
            records = run_experiment(dataclasses.replace(config, seed=seed), jobs=jobs)
            if out is not None:
                write_metrics_csv(records, out / f"metrics_{name}_seed{seed}.csv")
            curves[name].append([r.test_accuracy for r in records])
            log.info("finished %s seed %s", name, seed)

    def mean_curve(runs):
        return [report.mean_std(col)[0] for col in zip(*runs)]

    target = mean_curve(curves[spec.baseline])[-1]
    baseline_rounds = report.rounds_to_target(mean_curve(curves[spec.baseline]), target)
    summaries = []
    for name, runs in curves.items():
        best_m, best_s = report.mean_std(max(r) for r in runs)
        final_m, final_s = report.mean_std(r[-1] for r in runs)
        rtt = report.rounds_to_target(mean_curve(runs), target)
        summaries.append(report.RunSummary(
            name, best_m, final_m, rtt, report.speedup(baseline_rounds, rtt),
            best_accuracy_std=best_s, final_accuracy_std=final_s))
    return summaries


def cmd_compare(args) -> int:
    spec = parse_compare(args.config, args.set)
    out = _output_dir(args)
    summaries = compare_runs(spec, jobs=args.jobs, out=out)
    report.emit_summary(summaries, out / "summary.csv")
    print(f"wrote {out / 'summary.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedgg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("config", help="YAML experiment config")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override a config key, e.g. trainer.lr=0.1 (repeatable)")
        p.add_argument("-o", "--output", help=f"output directory (default ${OUTPUT_ENV} or ./runs)")

    p = sub.add_parser("run", help="run one federated experiment")
    common(p)
    p.add_argument("--jobs", type=int, default=_default_jobs(), help="parallel client workers")
    p.add_argument("--timing", action="store_true", help="record wall_ms (breaks byte-identical CSVs)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every analytic gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-sign-flip", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("partition-stats", help="show the client-by-class counts of a partition")
    common(p)
    p.set_defaults(func=cmd_partition_stats)

    p = sub.add_parser("compare", help="run several variants over several seeds")
    common(p)
    p.add_argument("--jobs", type=int, default=_default_jobs())
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"fedgg: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        module = type(exc).__module__.rpartition(".")[2] or "fedgg"
        print(f"fedgg: {module}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
