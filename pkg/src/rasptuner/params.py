"""Box-constrained parameter handling and the shared streaming EMA statistic.

Every component downstream works either on raw parameter vectors inside a
box or on their [0, 1]-normalized image; ``ParamBounds`` owns that mapping.
``RunningEMA`` is the single streaming mean/variance estimator reused across
the agent: metric standardization, retrieval novelty, surrogate uncertainty
and the escalation baselines all z-score against one of these.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

# Default guard added to standard deviations before dividing in z-scores.
EPS = 1e-8


def logistic(z):
    """Map z-scores into (0, 1); thin alias so call sites read like the math."""
    return expit(z)


@dataclass(frozen=True, eq=False)
class ParamBounds:
    """Axis-aligned box ``lower <= theta <= upper`` with clip/normalize helpers."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self) -> None:
        lower = np.asarray(self.lower, dtype=float)
        upper = np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        if lower.ndim != 1 or lower.shape != upper.shape or lower.size < 1:
            raise ValueError("bounds must be two 1-d vectors of equal length >= 1")
        if not (np.isfinite(lower).all() and np.isfinite(upper).all()):
            raise ValueError("bounds must be finite")
        if not (lower < upper).all():
            raise ValueError("every dimension needs lower[i] < upper[i]")

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def _check_dim(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1] != self.dim:
            raise ValueError(f"expected dimension {self.dim}, got {theta.shape[-1]}")
        return theta

    def clip(self, theta) -> np.ndarray:
        """Componentwise clamp into the box. Idempotent."""
        return np.clip(self._check_dim(theta), self.lower, self.upper)

    def normalize(self, theta) -> np.ndarray:
        """Affine map of an in-box vector to [0, 1]^d. Callers clip first."""
        return (self._check_dim(theta) - self.lower) / self.width

    def denormalize(self, theta_norm) -> np.ndarray:
        """Inverse of :meth:`normalize`; out-of-range inputs are clamped first."""
        unit = np.clip(self._check_dim(theta_norm), 0.0, 1.0)
        return self.lower + unit * self.width

    def contains(self, theta) -> bool:
        theta = self._check_dim(theta)
        return bool((theta >= self.lower).all() and (theta <= self.upper).all())


@dataclass
class RunningEMA:
    """Exponential moving mean/variance with momentum ``m`` in (0, 1).

    Initialized at (mean 0, var 1). The variance recursion uses the freshly
    updated mean, so a constant stream drives var monotonically to zero.
    """

    momentum: float = 0.97
    mean: float = 0.0
    var: float = 1.0
    update_count: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if self.var < 0.0:
            raise ValueError("variance must be non-negative")

    def update(self, value: float) -> "RunningEMA":
        value = float(value)
        if not math.isfinite(value):
            raise ValueError("EMA update requires a finite value")
        m = self.momentum
        self.mean = m * self.mean + (1.0 - m) * value
        self.var = m * self.var + (1.0 - m) * (value - self.mean) ** 2
        self.update_count += 1
        return self

    def z(self, value: float, eps: float = EPS) -> float:
        """Standardized score of ``value`` against the current statistics."""
        return (float(value) - self.mean) / (math.sqrt(self.var) + eps)

    def copy(self) -> "RunningEMA":
        return RunningEMA(self.momentum, self.mean, self.var, self.update_count)
