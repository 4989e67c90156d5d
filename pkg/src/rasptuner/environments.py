"""Synthetic non-stationary benchmark environments.

Ten scenarios share one interface: a latent condition per step (regime
index, wear level, drawn features, trace row), a context vector observed
before deployment, a metric dictionary returned after deployment, a
closed-form true loss, and a per-step oracle minimum so instantaneous
regret is exact. Everything is a pure function of (seed, t): metric noise
and context noise come from per-step derived generators, never from call
order, so runs are reproducible bit for bit.

Structural parameters follow the scenario definitions; numeric targets
the definitions leave open (mode optima, cluster centers, mixing matrices,
per-axis weights) are drawn once from the environment's seeded generator
at construction and exposed via ``constants()`` for auditing.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .params import ParamBounds

SCENARIO_NAMES = (
    "1_LLM_Inference",
    "2_AutoML_HPO",
    "3_Robot_ISP_Tuning",
    "4_Wafer_Etching_Drift",
    "5_Switching_LQR",
    "6_Smooth_Quadratic",
    "7_Regime_Switch_Simple",
    "8_Server_Flash_Crowd",
    "9_Real_Trace_Replay",
    "A1_Adversarial_Context",
)
NON_ADVERSARIAL = SCENARIO_NAMES[:9]

_METRIC_STREAM = 17
_CONTEXT_STREAM = 29
_LATENT_STREAM = 13


def _name_salt(name: str) -> int:
    return zlib.crc32(name.encode())


@dataclass
class EnvState:
    """Step index plus the latent condition active at that step."""

    t: int
    omega: object


def weighted_quadratic_box_min(weights: np.ndarray, target: np.ndarray, bounds: ParamBounds) -> float:
    """Exact min over the box of sum_i w_i (theta_i - target_i)^2.

    Separable, so the minimizer is the componentwise projection of the
    target; zero whenever the target lies inside the box.
    """
    projected = bounds.clip(target)
    return float(np.sum(weights * (projected - target) ** 2))


class ExperimentDomain:
    """Base class wiring per-step generators, noise scales, and the oracle."""

    metric_name = "loss"

    def __init__(self, name: str, seed: int, horizon: int, bounds: ParamBounds,
                 context_dim: int, noise_scale: float = 0.05):
        self.name = name
        self.seed = int(seed)
        self.horizon = int(horizon)
        self.bounds = bounds
        self.context_dim = context_dim
        self.noise_scale = float(noise_scale)
        self._salt = _name_salt(name)
        self._construct(np.random.default_rng([self.seed, self._salt]))
        self.noise_sigma = self.noise_scale * self._loss_scale()

    # -- hooks scenarios implement ------------------------------------- #

    def _construct(self, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def latent(self, t: int):
        raise NotImplementedError

    def true_loss(self, theta, omega):
        """Loss of theta under omega; broadcasts over leading axes of theta."""
        raise NotImplementedError

    def oracle_min(self, omega) -> float:
        raise NotImplementedError

    def _context_clean(self, t: int, omega) -> np.ndarray:
        raise NotImplementedError

    def _context_noise_sigma(self) -> float:
        return 0.0

    # -- shared machinery ------------------------------------------------ #

    def _step_rng(self, t: int, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, self._salt, int(t), stream])

    def _loss_scale(self) -> float:
        """Typical loss magnitude: mean over random box points at the first latent."""
        rng = np.random.default_rng([self.seed, self._salt, 997])
        thetas = rng.uniform(self.bounds.lower, self.bounds.upper, size=(64, self.bounds.dim))
        losses = np.asarray(self.true_loss(thetas, self.latent(0)), dtype=float)
        return float(np.mean(np.abs(losses)))

    def context_fn(self, t: int, omega) -> np.ndarray:
        clean = self._context_clean(t, omega)
        sigma = self._context_noise_sigma()
        if sigma > 0.0:
            clean = clean + sigma * self._step_rng(t, _CONTEXT_STREAM).standard_normal(clean.size)
        return clean

    def metric_fn(self, theta, t: int, omega) -> dict[str, float]:
        loss = float(self.true_loss(theta, omega))
        if self.noise_sigma > 0.0:
            loss += self.noise_sigma * float(self._step_rng(t, _METRIC_STREAM).standard_normal())
        return {self.metric_name: loss}

    def build_sequence(self, horizon: int) -> list:
        return [self.latent(t) for t in range(horizon)]

    def initial_state(self) -> EnvState:
        return EnvState(t=0, omega=self.latent(0))

    def constants(self) -> dict:
        """Drawn scenario constants, JSON-serializable, for the run log."""
        out = {"name": self.name, "seed": self.seed, "horizon": self.horizon,
               "noise_sigma": self.noise_sigma,
               "bounds_lower": self.bounds.lower.tolist(),
               "bounds_upper": self.bounds.upper.tolist()}
        out.update(self._constants())
        return out

    def _constants(self) -> dict:
        return {}


def step_env(domain: ExperimentDomain, state: EnvState, theta) -> tuple[dict, np.ndarray, float, EnvState]:
    """Evaluate theta at the current latent and advance one step.

    Returns (metric map, context for the next step, true loss, next state).
    Deployed parameters must already be inside the box; agents clip.
    """
    theta = np.asarray(theta, dtype=float)
    if not domain.bounds.contains(theta):
        raise ValueError(f"theta outside bounds for {domain.name}")
    metrics = domain.metric_fn(theta, state.t, state.omega)
    loss = float(domain.true_loss(theta, state.omega))
    t_next = state.t + 1
    omega_next = domain.latent(t_next)
    context_next = domain.context_fn(t_next, omega_next)
    return metrics, context_next, loss, EnvState(t=t_next, omega=omega_next)


def _draw_inside(bounds: ParamBounds, rng: np.random.Generator, margin: float = 0.1) -> np.ndarray:
    unit = rng.uniform(margin, 1.0 - margin, size=bounds.dim)
    return bounds.lower + unit * bounds.width


# --------------------------------------------------------------------- #
# scenarios


class _WeightedDistanceDomain(ExperimentDomain):
    """Shared loss shape: per-axis weighted squared distance to a moving target,
    normalized by box width so scales stay comparable across scenarios."""

    def _target(self, omega) -> np.ndarray:
        raise NotImplementedError

    def _axis_weights(self) -> np.ndarray:
        return self._weights

    def true_loss(self, theta, omega):
        theta = np.asarray(theta, dtype=float)
        delta = (theta - self._target(omega)) / self.bounds.width
        return np.sum(self._axis_weights() * delta**2, axis=-1)

    def oracle_min(self, omega) -> float:
        return weighted_quadratic_box_min(
            self._axis_weights() / self.bounds.width**2, self._target(omega), self.bounds
        )


class LlmInferenceDomain(_WeightedDistanceDomain):
    """Three recurring workload clusters keyed by high-dimensional embeddings.

    The schedule walks the clusters over the first three quarters of the
    horizon and returns to the first cluster in the last quarter.
    """

    metric_name = "neg_reward"

    def _construct(self, rng: np.random.Generator) -> None:
        self.num_clusters = 3
        centers = rng.standard_normal((self.num_clusters, self.context_dim))
        self.centers = centers / np.linalg.norm(centers, axis=1, keepdims=True)
        self.optima = np.stack([_draw_inside(self.bounds, rng) for _ in range(self.num_clusters)])
        self._weights = rng.uniform(0.5, 1.5, self.bounds.dim)
        self.context_sigma = 0.01

    def latent(self, t: int) -> int:
        quarter = max(1, self.horizon // 4)
        if t >= 3 * quarter:
            return 0
        return min(t // quarter, self.num_clusters - 1)

    def _target(self, omega) -> np.ndarray:
        return self.optima[omega]

    def _context_clean(self, t: int, omega) -> np.ndarray:
        return self.centers[omega].copy()

    def _context_noise_sigma(self) -> float:
        return self.context_sigma

    def _constants(self) -> dict:
        return {"optima": self.optima.tolist(), "axis_weights": self._weights.tolist(),
                "context_sigma": self.context_sigma}


class AutoMlDomain(ExperimentDomain):
    """A stream of datasets: features redrawn every 100 steps, each inducing
    a different optimum of a shifted valley-shaped (Rosenbrock-like) loss."""

    metric_name = "val_err"

    def _construct(self, rng: np.random.Generator) -> None:
        self.feature_map = rng.normal(0.0, 0.4, size=(self.bounds.dim, self.context_dim))

    def _features(self, window: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, self._salt, _LATENT_STREAM, int(window)])
        return rng.standard_normal(self.context_dim)

    def latent(self, t: int) -> np.ndarray:
        return self._features(t // 100)

    def optimum_for(self, features: np.ndarray) -> np.ndarray:
        # Sigmoid keeps the optimum strictly inside the unit box.
        return 1.0 / (1.0 + np.exp(-(self.feature_map @ features)))

    def true_loss(self, theta, omega):
        theta = np.asarray(theta, dtype=float)
        y = theta - self.optimum_for(omega)
        head, tail = y[..., :-1], y[..., 1:]
        return np.sum(100.0 * (tail - head**2) ** 2 + head**2, axis=-1)

    def oracle_min(self, omega) -> float:
        # The constructed optimum lies inside the box, so the minimum is zero.
        return 0.0

    def _context_clean(self, t: int, omega) -> np.ndarray:
        return np.asarray(omega, dtype=float).copy()

    def _constants(self) -> dict:
        return {"feature_map": self.feature_map.tolist()}


class RobotIspDomain(_WeightedDistanceDomain):
    """Five driving segments (day, tunnel, day, fog, night) with noisy
    per-mode context embeddings and mode-specific optimal pipelines."""

    metric_name = "image_quality_loss"
    SEGMENTS = (0, 1, 0, 2, 3)  # day, tunnel, day, fog, night

    def _construct(self, rng: np.random.Generator) -> None:
        self.num_modes = 4
        self.mode_embeddings = rng.standard_normal((self.num_modes, self.context_dim))
        self.optima = np.stack([_draw_inside(self.bounds, rng) for _ in range(self.num_modes)])
        self._weights = rng.uniform(0.5, 1.5, self.bounds.dim)
        self.context_sigma = 0.1

    def latent(self, t: int) -> int:
        segment = max(1, self.horizon // len(self.SEGMENTS))
        return self.SEGMENTS[min(t // segment, len(self.SEGMENTS) - 1)]

    def _target(self, omega) -> np.ndarray:
        return self.optima[omega]

    def _context_clean(self, t: int, omega) -> np.ndarray:
        return self.mode_embeddings[omega].copy()

    def _context_noise_sigma(self) -> float:
        return self.context_sigma

    def _constants(self) -> dict:
        return {"optima": self.optima.tolist(), "axis_weights": self._weights.tolist(),
                "mode_embeddings": self.mode_embeddings.tolist()}


class WaferDriftDomain(_WeightedDistanceDomain):
    """Optimal process settings drift linearly with a wear indicator that
    rises from 0 to 1 over the horizon; the context is that scalar."""

    metric_name = "bias"

    def _construct(self, rng: np.random.Generator) -> None:
        self.start = _draw_inside(self.bounds, rng)
        self.end = _draw_inside(self.bounds, rng)
        self._weights = rng.uniform(0.5, 1.5, self.bounds.dim)

    def latent(self, t: int) -> float:
        if self.horizon <= 1:
            return 0.0
        return min(t / (self.horizon - 1), 1.0)

    def _target(self, omega) -> np.ndarray:
        return self.start + float(omega) * (self.end - self.start)

    def _context_clean(self, t: int, omega) -> np.ndarray:
        return np.array([float(omega)])

    def _constants(self) -> dict:
        return {"start": self.start.tolist(), "end": self.end.tolist(),
                "axis_weights": self._weights.tolist()}


class SwitchingLqrDomain(ExperimentDomain):
    """Two controller regimes alternating every 100 steps; the context is
    the integer mode indicator and the cost metric is noise-free."""

    metric_name = "cost"

    def _construct(self, rng: np.random.Generator) -> None:
        self.optima = np.stack([_draw_inside(self.bounds, rng) for _ in range(2)])
        self.noise_scale = 0.0  # cost is observed exactly

    def latent(self, t: int) -> int:
        return (t // 100) % 2

    def true_loss(self, theta, omega):
        theta = np.asarray(theta, dtype=float)
        return np.mean((theta - self.optima[omega]) ** 2, axis=-1)

    def oracle_min(self, omega) -> float:
        return 0.0

    def _context_clean(self, t: int, omega) -> np.ndarray:
        return np.array([float(omega)])

    def _constants(self) -> dict:
        return {"optima": self.optima.tolist()}


class SmoothQuadraticDomain(ExperimentDomain):
    """Convex sanity check: fresh Gaussian context each step, optimum is an
    affine image of the context, and the mse metric is exactly the loss."""

    metric_name = "mse"

    def _construct(self, rng: np.random.Generator) -> None:
        self.mixing = rng.normal(0.0, 0.3, size=(self.bounds.dim, self.context_dim))
        self.noise_scale = 0.0  # mse is observed exactly

    def latent(self, t: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, self._salt, _LATENT_STREAM, int(t)])
        return rng.standard_normal(self.context_dim)

    def optimum_for(self, context: np.ndarray) -> np.ndarray:
        return self.mixing @ np.asarray(context, dtype=float)

    def true_loss(self, theta, omega):
        theta = np.asarray(theta, dtype=float)
        return np.sum((theta - self.optimum_for(omega)) ** 2, axis=-1)

    def oracle_min(self, omega) -> float:
        # The affine optimum can land outside the box; project if so.
        return weighted_quadratic_box_min(
            np.ones(self.bounds.dim), self.optimum_for(omega), self.bounds
        )

    def _context_clean(self, t: int, omega) -> np.ndarray:
        return np.asarray(omega, dtype=float).copy()

    def _constants(self) -> dict:
        return {"mixing": self.mixing.tolist()}


class RegimeSwitchDomain(ExperimentDomain):
    """Two prototypes; the second replaces the first halfway through. The
    context carries three one-hot distractor symbols plus the regime bit."""

    metric_name = "err"

    def _construct(self, rng: np.random.Generator) -> None:
        self.prototypes = np.stack([_draw_inside(self.bounds, rng) for _ in range(2)])

    def latent(self, t: int) -> int:
        return int(t >= self.horizon // 2)

    def true_loss(self, theta, omega):
        theta = np.asarray(theta, dtype=float)
        return np.sum((theta - self.prototypes[omega]) ** 2, axis=-1)

    def oracle_min(self, omega) -> float:
        return 0.0

    def _context_clean(self, t: int, omega) -> np.ndarray:
        symbol = np.zeros(3)
        symbol[t % 3] = 1.0
        return np.concatenate([symbol, [float(omega)]])

    def _constants(self) -> dict:
        return {"prototypes": self.prototypes.tolist()}


class FlashCrowdDomain(ExperimentDomain):
    """Sinusoidal baseline load with two inserted panic windows; panic mode
    has its own target and a steeper cost scale."""

    metric_name = "latency"

    def _construct(self, rng: np.random.Generator) -> None:
        self.targets = np.stack([_draw_inside(self.bounds, rng) for _ in range(2)])
        self.scales = np.array([1.0, 3.0])
        self.panic_length = 10

    def _load(self, t: int) -> float:
        # phase from t % 50 keeps the revisit structure exact in floats
        return 0.5 + 0.4 * math.sin(2.0 * math.pi * (t % 50) / 50.0)

    def _panic(self, t: int) -> int:
        for start_frac in (0.3, 0.7):
            start = int(self.horizon * start_frac)
            if start <= t < start + self.panic_length:
                return 1
        return 0

    def latent(self, t: int) -> tuple[int, float]:
        return (self._panic(t), self._load(t))

    def true_loss(self, theta, omega):
        mode, _ = omega
        theta = np.asarray(theta, dtype=float)
        return self.scales[mode] * np.sum((theta - self.targets[mode]) ** 2, axis=-1)

    def oracle_min(self, omega) -> float:
        return 0.0

    def _context_clean(self, t: int, omega) -> np.ndarray:
        mode, load = omega
        return np.array([load, float(mode)])

    def _context_noise_sigma(self) -> float:
        return 0.02

    def _constants(self) -> dict:
        return {"targets": self.targets.tolist(), "scales": self.scales.tolist(),
                "panic_length": self.panic_length}


class TraceReplayDomain(ExperimentDomain):
    """A pre-generated length-2000 optimum trace (AR(1) walk plus two
    sinusoids, rescaled to stay inside the box) replayed cyclically."""

    metric_name = "log_latency"
    TRACE_LENGTH = 2000

    def _construct(self, rng: np.random.Generator) -> None:
        d = self.bounds.dim
        steps = rng.normal(0.0, 0.03, size=(self.TRACE_LENGTH, d))
        walk = np.empty_like(steps)
        state = np.zeros(d)
        for t in range(self.TRACE_LENGTH):
            state = 0.95 * state + steps[t]
            walk[t] = state
        phases = rng.uniform(0.0, 2.0 * math.pi, size=(2, d))
        tt = np.arange(self.TRACE_LENGTH)[:, None]
        raw = walk + 0.1 * np.sin(2.0 * math.pi * tt / 73.0 + phases[0])
        raw += 0.05 * np.sin(2.0 * math.pi * tt / 311.0 + phases[1])
        lo, hi = raw.min(axis=0), raw.max(axis=0)
        unit = (raw - lo) / np.maximum(hi - lo, 1e-12)
        self.trace = self.bounds.lower + (0.05 + 0.9 * unit) * self.bounds.width
        self.context_map = rng.standard_normal((self.context_dim, d))
        self.loss_gain = 5.0

    def latent(self, t: int) -> int:
        return t % self.TRACE_LENGTH

    def target_for(self, omega) -> np.ndarray:
        return self.trace[omega]

    def true_loss(self, theta, omega):
        theta = np.asarray(theta, dtype=float)
        return self.loss_gain * np.mean((theta - self.trace[omega]) ** 2, axis=-1)

    def oracle_min(self, omega) -> float:
        return 0.0

    def _context_clean(self, t: int, omega) -> np.ndarray:
        return self.context_map @ self.trace[omega]

    def _context_noise_sigma(self) -> float:
        return 0.02

    def _constants(self) -> dict:
        return {"trace_rows": self.TRACE_LENGTH, "loss_gain": self.loss_gain,
                "context_map": self.context_map.tolist()}


class AdversarialContextDomain(ExperimentDomain):
    """Stationary quadratic with its optimum at the box center; the context
    is fresh Gaussian noise each step and carries no information."""

    metric_name = "loss"

    def _construct(self, rng: np.random.Generator) -> None:
        self.optimum = np.full(self.bounds.dim, 0.5)

    def latent(self, t: int):
        return None

    def true_loss(self, theta, omega):
        theta = np.asarray(theta, dtype=float)
        return np.sum((theta - self.optimum) ** 2, axis=-1)

    def oracle_min(self, omega) -> float:
        return 0.0

    def _context_clean(self, t: int, omega) -> np.ndarray:
        return self._step_rng(t, _CONTEXT_STREAM).standard_normal(self.context_dim)

    def _constants(self) -> dict:
        return {"optimum": self.optimum.tolist()}


_SPECS: dict[str, tuple] = {
    # name -> (class, lower, upper, context_dim)
    "1_LLM_Inference": (LlmInferenceDomain, [0.1, 1.0, 1.0, 0.0], [2.0, 100.0, 64.0, 8.0], 768),
    "2_AutoML_HPO": (AutoMlDomain, [0.0] * 6, [1.0] * 6, 10),
    "3_Robot_ISP_Tuning": (RobotIspDomain, [0.0] * 8, [1.0] * 8, 4),
    "4_Wafer_Etching_Drift": (WaferDriftDomain, [50.0, 100.0, 10.0, 20.0, 0.5], [150.0, 500.0, 100.0, 80.0, 5.0], 1),
    "5_Switching_LQR": (SwitchingLqrDomain, [-5.0] * 6, [5.0] * 6, 1),
    "6_Smooth_Quadratic": (SmoothQuadraticDomain, [-2.0] * 5, [2.0] * 5, 3),
    "7_Regime_Switch_Simple": (RegimeSwitchDomain, [-2.0] * 5, [2.0] * 5, 4),
    "8_Server_Flash_Crowd": (FlashCrowdDomain, [0.0] * 5, [1.0] * 5, 2),
    "9_Real_Trace_Replay": (TraceReplayDomain, [0.0] * 5, [1.0] * 5, 3),
    "A1_Adversarial_Context": (AdversarialContextDomain, [0.0] * 5, [1.0] * 5, 5),
}


def make_domain(name: str, seed: int, horizon: int = 100, noise_scale: float = 0.05) -> ExperimentDomain:
    """Construct a scenario by name; raises on unknown names."""
    spec = _SPECS.get(name)
    if spec is None:
        raise ValueError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIO_NAMES)}")
    cls, lower, upper, context_dim = spec
    bounds = ParamBounds(np.asarray(lower), np.asarray(upper))
    return cls(name=name, seed=seed, horizon=horizon, bounds=bounds,
               context_dim=context_dim, noise_scale=noise_scale)
