"""Experiment runner: seeds x scenarios x algorithms, metrics, and stats.

One (scenario, algorithm, seed) cell is an independent job: it constructs
its own environment and agent, enforces the one-evaluation-per-step
protocol, and yields one row per step. Rows are written to per-cell CSV
files (the single source of truth), and summary statistics are recomputed
from those rows. Latency columns time the agent's own work, never the
environment evaluation.
"""

from __future__ import annotations

import csv
import json
import math
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats as scipy_stats

from .baselines import CmaEsAgent, GpUcbAgent, RandomSearchAgent
from .environments import ExperimentDomain, make_domain, step_env
from .runconfig import RunConfig
from .sizing import deep_size_bytes
from .tuner import RaspTuner, TunerConfig

ROW_FIELDS = (
    "scenario",
    "algorithm",
    "seed",
    "step",
    "true_loss",
    "oracle_min",
    "regret",
    "cum_regret",
    "e_t",
    "latency_ns",
    "escalated",
    "z_err",
    "variance",
    "novelty",
    "k_t",
)

# Columns guaranteed byte-identical across reruns of the same config; the
# latency column is wall-clock and excluded by definition.
DETERMINISTIC_FIELDS = tuple(f for f in ROW_FIELDS if f != "latency_ns")


def make_agent(algorithm: str, domain: ExperimentDomain, seed: int,
               tuner_config: TunerConfig, metric_specs=()):
    bounds, context_dim = domain.bounds, domain.context_dim
    if algorithm == "rasp":
        return RaspTuner(bounds, context_dim, tuner_config, seed=seed, metric_specs=metric_specs)
    if algorithm == "nomem":
        return RaspTuner(bounds, context_dim, tuner_config.with_masked_context(),
                         seed=seed, metric_specs=metric_specs)
    if algorithm == "random":
        return RandomSearchAgent(bounds, context_dim, seed=seed, metric_specs=metric_specs)
    if algorithm == "cma":
        return CmaEsAgent(bounds, context_dim, seed=seed, metric_specs=metric_specs)
    if algorithm == "gp":
        return GpUcbAgent(bounds, context_dim, seed=seed, metric_specs=metric_specs)
    raise ValueError(f"unknown algorithm {algorithm!r}")


class _SingleEvaluation:
    """Wraps step_env so an agent can evaluate exactly once per step."""

    def __init__(self, domain: ExperimentDomain, state):
        self.domain = domain
        self.state = state
        self.result = None

    def __call__(self, theta):
        if self.result is not None:
            raise RuntimeError("agents get one environment evaluation per step")
        metrics, context_next, loss, state_next = step_env(self.domain, self.state, theta)
        self.result = (context_next, loss, state_next)
        return metrics


def run_cell(scenario: str, algorithm: str, seed: int, horizon: int,
             tuner_config: TunerConfig, noise_scale: float = 0.05,
             metric_specs=(), collect_agent: bool = False):
    """Run one cell and return its rows (plus the agent when asked)."""
    domain = make_domain(scenario, seed, horizon=horizon, noise_scale=noise_scale)
    agent = make_agent(algorithm, domain, seed, tuner_config, metric_specs)
    state = domain.initial_state()
    context = domain.context_fn(state.t, state.omega)
    rows = []
    cum_regret = 0.0
    for step in range(horizon):
        oracle = domain.oracle_min(state.omega)
        evaluate = _SingleEvaluation(domain, state)
        theta, info = agent.step(context, evaluate)
        if evaluate.result is None:
            raise RuntimeError(f"agent {algorithm!r} did not evaluate the environment")
        context, loss, state = evaluate.result
        regret = loss - oracle
        cum_regret += regret
        rows.append({
            "scenario": scenario,
            "algorithm": algorithm,
            "seed": seed,
            "step": step,
            "true_loss": float(loss),
            "oracle_min": float(oracle),
            "regret": float(regret),
            "cum_regret": float(cum_regret),
            "e_t": float(info.e_t),
            "latency_ns": int(info.latency_ns),
            "escalated": bool(info.escalated),
            "z_err": float(info.z_err),
            "variance": float(info.variance),
            "novelty": float(info.novelty),
            "k_t": int(info.k_t),
        })
    if collect_agent:
        return rows, agent
    return rows


def _run_cell_job(args):
    scenario, algorithm, seed, horizon, tuner_config, noise_scale, metric_specs = args
    return run_cell(scenario, algorithm, seed, horizon, tuner_config, noise_scale, metric_specs)


def write_rows_csv(path: str, rows) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=ROW_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_rows_csv(path: str) -> list[dict]:
    out = []
    with open(path, newline="") as handle:
        for row in csv.DictReader(handle):
            parsed = dict(row)
            for key in ("seed", "step", "latency_ns", "k_t"):
                parsed[key] = int(row[key])
            for key in ("true_loss", "oracle_min", "regret", "cum_regret", "e_t",
                        "z_err", "variance", "novelty"):
                parsed[key] = float(row[key])
            parsed["escalated"] = row["escalated"] == "True"
            out.append(parsed)
    return out


def adaptation_speed(losses, window: int, alpha: float, best_loss: float):
    """Smallest 1-based step whose trailing window mean is at or below
    alpha * best_loss; None when no window qualifies."""
    if window < 1:
        raise ValueError("window must be >= 1")
    losses = list(losses)
    if window > len(losses):
        return None
    threshold = alpha * best_loss
    acc = sum(losses[:window])
    if acc / window <= threshold:
        return window
    for t in range(window, len(losses)):
        acc += losses[t] - losses[t - window]
        if acc / window <= threshold:
            return t + 1
    return None


@dataclass(frozen=True)
class PairedTResult:
    t_stat: float
    p_value: float
    degenerate: bool


def paired_t_test(a, b) -> PairedTResult:
    """Two-sided paired t-test on per-seed values.

    Zero-variance differences are flagged degenerate: p=1 for an all-zero
    difference, p=0 for a constant non-zero one.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("need two equal-length vectors with at least 2 entries")
    diff = a - b
    n = diff.size
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return PairedTResult(0.0, 1.0, True)
        return PairedTResult(math.copysign(math.inf, mean), 0.0, True)
    t_stat = mean / (sd / math.sqrt(n))
    p_value = 2.0 * float(scipy_stats.t.sf(abs(t_stat), df=n - 1))
    return PairedTResult(float(t_stat), p_value, False)


def mean_ci95(values) -> tuple[float, float]:
    """Mean and normal-approximation 95% half-width (1.96 * SE) across seeds."""
    values = [float(v) for v in values]
    mean = statistics.fmean(values)
    if len(values) < 2:
        return mean, 0.0
    half = 1.96 * statistics.stdev(values) / math.sqrt(len(values))
    return mean, half


def run_experiment(config: RunConfig) -> dict:
    """Execute every (scenario, algorithm, seed) cell and write the run log.

    Produces one data CSV per (scenario, algorithm), a summary CSV, a
    paired-test CSV, and a scenario-constants JSON per (scenario, seed).
    IO failures are collected and reported at the end so already-written
    results survive.
    """
    outdir = config.outdir
    data_dir = os.path.join(outdir, "data")
    const_dir = os.path.join(outdir, "constants")
    os.makedirs(data_dir, exist_ok=True)
    os.makedirs(const_dir, exist_ok=True)

    jobs = []
    for scenario in config.scenarios:
        tuner_config = config.tuner_config(scenario)
        for algorithm in config.algorithms:
            for seed in config.seed_list():
                jobs.append((scenario, algorithm, seed, config.horizon, tuner_config,
                             config.noise_scale, config.metric_specs))

    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_run_cell_job, jobs))
    else:
        results = [_run_cell_job(job) for job in jobs]

    cells: dict[tuple[str, str], list[dict]] = {}
    for (scenario, algorithm, seed, *_), rows in zip(jobs, results):
        cells.setdefault((scenario, algorithm), []).extend(rows)

    io_errors = []
    paths = {"outdir": outdir, "data": [], "summary": None, "significance": None}
    for (scenario, algorithm), rows in sorted(cells.items()):
        rows.sort(key=lambda r: (r["seed"], r["step"]))
        path = os.path.join(data_dir, f"{scenario}__{algorithm}.csv")
        try:
            write_rows_csv(path, rows)
            paths["data"].append(path)
        except OSError as exc:
            io_errors.append(f"{path}: {exc}")

    for scenario in config.scenarios:
        for seed in config.seed_list():
            path = os.path.join(const_dir, f"{scenario}__seed{seed}.json")
            try:
                domain = make_domain(scenario, seed, config.horizon, config.noise_scale)
                with open(path, "w") as handle:
                    json.dump(domain.constants(), handle, indent=1)
            except OSError as exc:
                io_errors.append(f"{path}: {exc}")

    summary_rows = summarize_cells(cells, config)
    summary_path = os.path.join(outdir, "summary.csv")
    try:
        with open(summary_path, "w", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=list(summary_rows[0].keys()))
            writer.writeheader()
            writer.writerows(summary_rows)
        paths["summary"] = summary_path
    except OSError as exc:
        io_errors.append(f"{summary_path}: {exc}")

    significance_rows = significance_table(cells, config)
    if significance_rows:
        sig_path = os.path.join(outdir, "significance.csv")
        try:
            with open(sig_path, "w", newline="") as handle:
                writer = csv.DictWriter(handle, fieldnames=list(significance_rows[0].keys()))
                writer.writeheader()
                writer.writerows(significance_rows)
            paths["significance"] = sig_path
        except OSError as exc:
            io_errors.append(f"{sig_path}: {exc}")

    if io_errors:
        raise RuntimeError(
            "run completed but some outputs failed to write:\n  " + "\n  ".join(io_errors)
        )
    return paths


def terminal_regrets(rows, seeds) -> list[float]:
    """Final cumulative regret per seed, in seed order."""
    final: dict[int, float] = {}
    for row in rows:
        final[row["seed"]] = row["cum_regret"]  # rows are step-ordered per seed
    return [final[seed] for seed in seeds]


def summarize_cells(cells, config: RunConfig) -> list[dict]:
    seeds = config.seed_list()
    out = []
    for (scenario, algorithm), rows in sorted(cells.items()):
        finals = terminal_regrets(rows, seeds)
        mean, half = mean_ci95(finals)
        speeds = []
        latencies = []
        for seed in seeds:
            series = [r["true_loss"] for r in rows if r["seed"] == seed]
            latencies.extend(r["latency_ns"] for r in rows if r["seed"] == seed)
            speed = adaptation_speed(series, config.adapt_window, config.adapt_alpha, min(series))
            if speed is not None:
                speeds.append(speed)
        out.append({
            "scenario": scenario,
            "algorithm": algorithm,
            "terminal_regret_mean": mean,
            "terminal_regret_ci95": half,
            "adaptation_speed_mean": statistics.fmean(speeds) if speeds else float("nan"),
            "latency_ns_median": int(statistics.median(latencies)) if latencies else 0,
            "seeds": len(seeds),
        })
    return out


def significance_table(cells, config: RunConfig) -> list[dict]:
    """Paired t-tests of the tuner against each baseline, per scenario."""
    seeds = config.seed_list()
    out = []
    for scenario in config.scenarios:
        rasp_rows = cells.get((scenario, "rasp"))
        if rasp_rows is None:
            continue
        rasp_final = terminal_regrets(rasp_rows, seeds)
        for algorithm in config.algorithms:
            if algorithm == "rasp":
                continue
            rows = cells.get((scenario, algorithm))
            if rows is None:
                continue
            other_final = terminal_regrets(rows, seeds)
            result = paired_t_test(rasp_final, other_final)
            out.append({
                "scenario": scenario,
                "baseline": algorithm,
                "rasp_mean": statistics.fmean(rasp_final),
                "baseline_mean": statistics.fmean(other_final),
                "t_stat": result.t_stat,
                "p_value": result.p_value,
                "degenerate": result.degenerate,
            })
    return out


# --------------------------------------------------------------------- #
# efficiency measurements


@dataclass
class LatencyStats:
    median_ns: float
    mean_ns: float
    series: np.ndarray  # all steps, warm-up included; stats exclude it


def measure_latency(agent, domain: ExperimentDomain, steps: int = 500,
                    warmup: int = 10) -> LatencyStats:
    """Per-step agent latency over a live run; the first ``warmup`` steps are
    excluded from the statistics and environment time never counts."""
    state = domain.initial_state()
    context = domain.context_fn(state.t, state.omega)
    series = np.empty(steps)
    for step in range(steps):
        evaluate = _SingleEvaluation(domain, state)
        _, info = agent.step(context, evaluate)
        context, _, state = evaluate.result
        series[step] = info.latency_ns
    tail = series[warmup:]
    return LatencyStats(float(np.median(tail)), float(tail.mean()), series)


@dataclass
class MemoryStats:
    growth_bytes: int
    probes: list[tuple[int, int]]  # (step, bytes)


def measure_memory_growth(agent, domain: ExperimentDomain, steps: int = 500,
                          probe_step: int = 10, probe_every: int | None = None) -> MemoryStats:
    """Byte-counter growth of the agent between ``probe_step`` and the end."""
    state = domain.initial_state()
    context = domain.context_fn(state.t, state.omega)
    probes: list[tuple[int, int]] = []
    baseline = None
    for step in range(steps):
        evaluate = _SingleEvaluation(domain, state)
        agent.step(context, evaluate)
        context, _, state = evaluate.result
        if step == probe_step:
            baseline = deep_size_bytes(agent)
            probes.append((step, baseline))
        elif probe_every is not None and step > probe_step and step % probe_every == 0:
            probes.append((step, deep_size_bytes(agent)))
    final = deep_size_bytes(agent)
    probes.append((steps - 1, final))
    if baseline is None:
        baseline = probes[0][1]
    return MemoryStats(final - baseline, probes)
