"""Run configuration: dataclass, INI-style file loading, tuner overrides.

The config file is a plain key=value file with three sections::

    [run]
    scenarios = 5_Switching_LQR, 7_Regime_Switch_Simple   ; or "all"
    algorithms = rasp, random, cma
    horizon = 100
    seeds = 5

    [tuner]
    kappa = 2.0
    top_k = 3

    [metrics]
    latency = lower_is_better, 1.0

Every tuner field can be overridden; fields absent from the file keep
their defaults. CLI flags win over file values.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields

from .composer import MetricSpec
from .environments import NON_ADVERSARIAL, SCENARIO_NAMES
from .tuner import TunerConfig

ALGORITHMS = ("rasp", "nomem", "random", "cma", "gp")


@dataclass
class RunConfig:
    scenarios: tuple[str, ...] = SCENARIO_NAMES
    algorithms: tuple[str, ...] = ("rasp", "random", "cma")
    horizon: int = 100
    seeds: int = 5
    base_seed: int = 0
    outdir: str = "runs/latest"
    noise_scale: float = 0.05
    workers: int = 1
    adapt_window: int = 10
    adapt_alpha: float = 1.2
    tuner_overrides: dict = field(default_factory=dict)
    metric_specs: tuple[MetricSpec, ...] = ()

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.seeds < 2:
            raise ValueError("need at least 2 seeds for paired tests")
        for name in self.scenarios:
            if name not in SCENARIO_NAMES:
                raise ValueError(f"unknown scenario {name!r}")
        for algo in self.algorithms:
            if algo not in ALGORITHMS:
                raise ValueError(f"unknown algorithm {algo!r}")

    def seed_list(self) -> list[int]:
        return [self.base_seed + i for i in range(self.seeds)]

    def tuner_config(self, scenario: str) -> TunerConfig:
        """TunerConfig for a scenario: defaults, the per-scenario step scale,
        then explicit overrides (which always win)."""
        values = dict(self.tuner_overrides)
        if "base_step_scale" not in values:
            values["base_step_scale"] = scenario_step_scale(scenario)
        return TunerConfig(**values)


def scenario_step_scale(scenario: str) -> float:
    """Default candidate step scale: 0.25 on the two fast-moving scenarios."""
    return 0.25 if scenario in ("3_Robot_ISP_Tuning", "8_Server_Flash_Crowd") else 0.15


def parse_scenarios(text: str) -> tuple[str, ...]:
    text = text.strip()
    if text == "all":
        return SCENARIO_NAMES
    if text == "non_adversarial":
        return NON_ADVERSARIAL
    return tuple(part.strip() for part in text.split(",") if part.strip())


def parse_algorithms(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


_TUNER_FIELDS = {f.name: f for f in fields(TunerConfig)}


def _coerce_tuner_value(name: str, raw: str):
    if name not in _TUNER_FIELDS:
        raise ValueError(f"unknown tuner option {name!r}")
    default = _TUNER_FIELDS[name].default
    raw = raw.strip()
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(part) for part in raw.replace("(", "").replace(")", "").split(",") if part.strip())
    return raw


def load_run_config(path: str) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    with open(path) as handle:
        parser.read_file(handle)
    kwargs: dict = {}
    if parser.has_section("run"):
        section = parser["run"]
        if "scenarios" in section:
            kwargs["scenarios"] = parse_scenarios(section["scenarios"])
        if "algorithms" in section:
            kwargs["algorithms"] = parse_algorithms(section["algorithms"])
        for key, cast in (
            ("horizon", int), ("seeds", int), ("base_seed", int), ("workers", int),
            ("adapt_window", int), ("noise_scale", float), ("adapt_alpha", float),
            ("outdir", str),
        ):
            if key in section:
                kwargs[key] = cast(section[key])
    if parser.has_section("tuner"):
        kwargs["tuner_overrides"] = {
            name: _coerce_tuner_value(name, raw) for name, raw in parser["tuner"].items()
        }
    if parser.has_section("metrics"):
        specs = []
        for key, raw in parser["metrics"].items():
            polarity, _, weight = raw.partition(",")
            specs.append(MetricSpec(key, polarity.strip(), float(weight or 1.0)))
        kwargs["metric_specs"] = tuple(specs)
    return RunConfig(**kwargs)
