"""Scalarizes heterogeneous metric dictionaries into one error in [0, 1].

Each metric key keeps its own running mean/variance. A new value is folded
into those statistics first, standardized against them, squashed through a
logistic, flipped for higher-is-better metrics, and the per-metric badness
scores are averaged under positive weights. A second EMA over the composed
error supplies the anomaly z-score that triggers emergency model updates;
that score is always taken against the statistics *before* the current
error was folded in, so a spike cannot partially mask itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .params import EPS, RunningEMA, logistic

LOWER_IS_BETTER = "lower_is_better"
HIGHER_IS_BETTER = "higher_is_better"
_POLARITIES = (LOWER_IS_BETTER, HIGHER_IS_BETTER)


@dataclass(frozen=True)
class MetricSpec:
    """Polarity and weight attached to one metric key."""

    key: str
    polarity: str = LOWER_IS_BETTER
    weight: float = 1.0

    def __post_init__(self) -> None:
        if self.polarity not in _POLARITIES:
            raise ValueError(f"unknown polarity {self.polarity!r}")
        if not self.weight > 0.0:
            raise ValueError("metric weight must be positive")


class ErrorComposer:
    """Stateful metric-to-error scalarizer with anomaly scoring.

    Unknown keys are registered on first sight with a default spec
    (lower-is-better, weight 1), so environments may expose arbitrary
    metric dictionaries without per-scenario wiring.
    """

    def __init__(self, specs=(), momentum: float = 0.97, eps: float = EPS):
        self._momentum = momentum
        self.eps = eps
        self._specs: dict[str, MetricSpec] = {}
        self._stats: dict[str, RunningEMA] = {}
        for spec in specs:
            self.register(spec)
        self.error_ema = RunningEMA(momentum)
        # Snapshot of the error EMA before the most recent compose() folded
        # its e in; anomaly_score() standardizes against this.
        self._error_prev = self.error_ema.copy()

    def register(self, spec: MetricSpec) -> None:
        if spec.key in self._specs:
            raise ValueError(f"duplicate metric spec for {spec.key!r}")
        self._specs[spec.key] = spec

    def spec_for(self, key: str) -> MetricSpec:
        spec = self._specs.get(key)
        if spec is None:
            spec = MetricSpec(key)
            self._specs[key] = spec
        return spec

    def stats_for(self, key: str) -> RunningEMA:
        stats = self._stats.get(key)
        if stats is None:
            stats = RunningEMA(self._momentum)
            self._stats[key] = stats
        return stats

    @staticmethod
    def _validate(metrics) -> None:
        if not metrics:
            raise ValueError("metric map must be non-empty")
        for key, value in metrics.items():
            if not math.isfinite(float(value)):
                raise ValueError(f"metric {key!r} is not finite: {value!r}")

    def _badness(self, key: str, value: float, stats: RunningEMA) -> float:
        z = stats.z(value, self.eps)
        s = float(logistic(z))
        spec = self.spec_for(key)
        return s if spec.polarity == LOWER_IS_BETTER else 1.0 - s

    def score(self, metrics) -> tuple[float, dict[str, float]]:
        """Compose with the current (frozen) statistics; mutates nothing.

        Used for property checks where the EMA state must be held fixed.
        """
        self._validate(metrics)
        badness: dict[str, float] = {}
        num = den = 0.0
        for key in sorted(metrics):
            stats = self._stats.get(key, RunningEMA(self._momentum))
            b = self._badness(key, float(metrics[key]), stats)
            badness[key] = b
            w = self.spec_for(key).weight
            num += w * b
            den += w
        return num / den, badness

    def compose(self, metrics) -> tuple[float, dict[str, float]]:
        """Fold a metric map into the state and return (e, per-key badness).

        Per key the EMA is updated first and the z-score is taken against
        the just-updated statistics.
        """
        self._validate(metrics)
        badness: dict[str, float] = {}
        num = den = 0.0
        for key in sorted(metrics):
            value = float(metrics[key])
            stats = self.stats_for(key)
            stats.update(value)
            b = self._badness(key, value, stats)
            badness[key] = b
            w = self.spec_for(key).weight
            num += w * b
            den += w
        e = num / den
        self._error_prev = self.error_ema.copy()
        self.error_ema.update(e)
        return e, badness

    def anomaly_score(self, e: float) -> float:
        """z-score of ``e`` against the error EMA before ``e`` was folded in.

        Meant to be called with the error the latest compose() returned:
        the baseline is the state in effect before that compose updated it.
        Returns 0.0 while no baseline exists (fewer than one prior error).
        """
        if self._error_prev.update_count < 1:
            return 0.0
        return self._error_prev.z(e, self.eps)

    def bound_check(self, metrics) -> bool:
        """True iff the composed error for ``metrics`` lies in [0, 1]."""
        e, _ = self.score(metrics)
        return 0.0 <= e <= 1.0
