"""Command-line harness: run experiments, verify theory, plot, ablate."""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
from dataclasses import replace

from .environments import SCENARIO_NAMES
from .runconfig import RunConfig, load_run_config, parse_algorithms, parse_scenarios


def _build_run_config(args) -> RunConfig:
    config = load_run_config(args.config) if args.config else RunConfig()
    updates = {}
    if args.scenarios:
        updates["scenarios"] = parse_scenarios(args.scenarios)
    if args.algorithms:
        updates["algorithms"] = parse_algorithms(args.algorithms)
    if args.horizon is not None:
        updates["horizon"] = args.horizon
    if args.seeds is not None:
        updates["seeds"] = args.seeds
    if args.outdir is not None:
        updates["outdir"] = args.outdir
    if args.workers is not None:
        updates["workers"] = args.workers
    return replace(config, **updates) if updates else config


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file (see README)")
    parser.add_argument("--scenarios", help="comma list, or 'all' / 'non_adversarial'")
    parser.add_argument("--algorithms", help="comma list from: rasp,nomem,random,cma,gp")
    parser.add_argument("--horizon", type=int, help="steps per run (default 100)")
    parser.add_argument("--seeds", type=int, help="number of seeds (default 5)")
    parser.add_argument("--outdir", help="output directory")
    parser.add_argument("--workers", type=int, help="parallel cell workers (default 1)")


def cmd_run(args) -> int:
    from .harness import run_experiment

    config = _build_run_config(args)
    paths = run_experiment(config)
    print(f"wrote {len(paths['data'])} data files under {paths['outdir']}")
    if paths["summary"]:
        print(f"summary: {paths['summary']}")
    if paths["significance"]:
        print(f"paired tests: {paths['significance']}")
    return 0


def cmd_theory(args) -> int:
    from .theory import run_theory_suite

    checks = run_theory_suite(seed=args.seed, quick=args.quick)
    width = max(len(c.check_id) for c in checks)
    print(f"{'check':<{width}}  {'bound':>12}  {'observed':>12}  {'margin':>12}  status")
    failures = 0
    for c in checks:
        status = "pass" if c.passed else "FAIL"
        failures += 0 if c.passed else 1
        print(f"{c.check_id:<{width}}  {c.bound:>12.4g}  {c.observed:>12.4g}  "
              f"{c.margin:>12.4g}  {status}   {c.detail}")
    print(f"{len(checks) - failures}/{len(checks)} checks passed")
    return 0 if failures == 0 else 1


def cmd_plot(args) -> int:
    from .plots import emit_plots

    written = emit_plots(args.rundir)
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_ablate(args) -> int:
    """Run the tuner with and without context masking and compare regrets."""
    from .harness import run_cell, terminal_regrets
    from .runconfig import scenario_step_scale
    from .tuner import TunerConfig

    scenarios = parse_scenarios(args.scenarios) if args.scenarios else (
        "5_Switching_LQR", "7_Regime_Switch_Simple")
    seeds = list(range(args.seeds))
    outdir = args.outdir or "runs/ablation"
    os.makedirs(os.path.join(outdir, "memory"), exist_ok=True)
    print(f"{'scenario':<24} {'full-mean':>12} {'masked-mean':>12} {'masked - full':>14}")
    for scenario in scenarios:
        cfg = TunerConfig(base_step_scale=scenario_step_scale(scenario))
        finals = {}
        for algorithm in ("rasp", "nomem"):
            per_seed = []
            for seed in seeds:
                rows, agent = run_cell(scenario, algorithm, seed, args.horizon, cfg,
                                       collect_agent=True)
                per_seed.append(rows[-1]["cum_regret"])
                snap_path = os.path.join(outdir, "memory",
                                         f"{scenario}__{algorithm}__seed{seed}.json")
                with open(snap_path, "w") as handle:
                    json.dump(agent.memory.snapshot(), handle, indent=1)
            finals[algorithm] = per_seed
        full = statistics.fmean(finals["rasp"])
        masked = statistics.fmean(finals["nomem"])
        print(f"{scenario:<24} {full:>12.4f} {masked:>12.4f} {masked - full:>14.4f}")
    print(f"memory snapshots under {outdir}/memory")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rasptuner",
        description="Online black-box tuning benchmark harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run scenario x algorithm x seed experiments")
    _add_run_flags(run_p)
    run_p.set_defaults(func=cmd_run)

    theory_p = sub.add_parser("theory", help="numeric verification of the regret-model bounds")
    theory_p.add_argument("--seed", type=int, default=0)
    theory_p.add_argument("--quick", action="store_true", help="smaller spec/draw counts")
    theory_p.set_defaults(func=cmd_theory)

    plot_p = sub.add_parser("plot", help="emit SVG figures from a run directory")
    plot_p.add_argument("rundir", help="directory produced by 'run'")
    plot_p.set_defaults(func=cmd_plot)

    ablate_p = sub.add_parser("ablate", help="context-masking ablation of the tuner")
    ablate_p.add_argument("--scenarios", help="comma list (default: the two switching scenarios)")
    ablate_p.add_argument("--horizon", type=int, default=100)
    ablate_p.add_argument("--seeds", type=int, default=5)
    ablate_p.add_argument("--outdir")
    ablate_p.set_defaults(func=cmd_ablate)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
