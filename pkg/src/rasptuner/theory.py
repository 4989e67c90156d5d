"""Numeric verification of the idealized regime-model guarantees.

The idealized model: finitely many regimes, each with a strongly convex
smooth quadratic loss over a box, cluster-separated context centers, and a
per-regime projected-gradient learner that identifies the active regime by
nearest-neighbor lookup on the observed context. This module simulates
that learner and checks, trajectory by trajectory, the closed-form
statements the design leans on: geometric per-visit contraction, a
horizon-independent regret bound that is additive across regimes, the
additive regret decomposition under forced misidentifications, the
bounded extra regret under norm-bounded gradient perturbations, and the
chi-square tail bound on Gaussian misretrieval probability.

Quadratics are generated with a controlled spectrum (a diagonal in a
random rotation), so the strong-convexity and smoothness constants are
exact by construction rather than estimated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .params import ParamBounds


@dataclass
class QuadraticRegime:
    """f(theta) = 0.5 (theta - opt)^T A (theta - opt), minimized inside the box."""

    matrix: np.ndarray
    optimum: np.ndarray

    def value(self, theta: np.ndarray) -> float:
        delta = theta - self.optimum
        return 0.5 * float(delta @ self.matrix @ delta)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.matrix @ (theta - self.optimum)


@dataclass
class RegimeSpec:
    """A finite-regime problem instance with exact curvature constants."""

    bounds: ParamBounds
    regimes: list[QuadraticRegime]
    centers: np.ndarray
    mu: float
    lipschitz: float
    radius: float
    context_noise: float = 0.0

    @property
    def num_regimes(self) -> int:
        return len(self.regimes)

    @property
    def separation(self) -> float:
        deltas = [
            float(np.linalg.norm(self.centers[i] - self.centers[j]))
            for i in range(self.num_regimes)
            for j in range(i + 1, self.num_regimes)
        ]
        return min(deltas) if deltas else math.inf

    def gradient_bound(self) -> float:
        """max over the box and regimes of the gradient norm (exact for d <= 8
        via vertex enumeration, conservative operator-norm bound otherwise)."""
        d = self.bounds.dim
        if d <= 8:
            corners = np.array(list(product(*zip(self.bounds.lower, self.bounds.upper))))
            return max(
                float(np.linalg.norm(regime.grad(corner)))
                for regime in self.regimes
                for corner in corners
            )
        radius = float(np.linalg.norm(self.bounds.width))
        return max(float(np.linalg.norm(r.matrix, 2)) for r in self.regimes) * radius

    def delta_max(self) -> float:
        """max over the box and regimes of f_r - f_r(opt); the quadratic is
        convex so the maximum sits at a box vertex for d <= 8."""
        d = self.bounds.dim
        if d <= 8:
            corners = np.array(list(product(*zip(self.bounds.lower, self.bounds.upper))))
            return max(regime.value(corner) for regime in self.regimes for corner in corners)
        radius = float(np.linalg.norm(self.bounds.width))
        return 0.5 * self.lipschitz * radius**2


@dataclass
class RegretTrace:
    per_step: np.ndarray
    visits: np.ndarray
    identified: np.ndarray
    per_regime_regret: np.ndarray

    @property
    def cumulative(self) -> float:
        return float(self.per_step.sum())

    def tail_increment(self, window: int = 1000) -> float:
        if len(self.per_step) <= window:
            return self.cumulative
        return float(self.per_step[-window:].sum())


def random_spec(
    rng: np.random.Generator,
    max_regimes: int = 5,
    max_dim: int = 8,
    context_dim: int = 4,
    mu_range=(0.3, 1.0),
    lipschitz_range=(1.5, 4.0),
) -> RegimeSpec:
    """Random instance: exact (mu, L) spectrum, optima inside the box, and
    context centers rescaled so separation strictly exceeds twice the radius."""
    d = int(rng.integers(2, max_dim + 1))
    num_regimes = int(rng.integers(2, max_regimes + 1))
    half = rng.uniform(1.5, 3.0)
    bounds = ParamBounds(-half * np.ones(d), half * np.ones(d))
    mu = float(rng.uniform(*mu_range))
    lipschitz = float(rng.uniform(*lipschitz_range))
    regimes = []
    for _ in range(num_regimes):
        eigs = np.concatenate([[mu, lipschitz], rng.uniform(mu, lipschitz, size=d - 2)])
        basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
        matrix = (basis * eigs) @ basis.T
        matrix = 0.5 * (matrix + matrix.T)
        optimum = bounds.lower + rng.uniform(0.15, 0.85, size=d) * bounds.width
        regimes.append(QuadraticRegime(matrix=matrix, optimum=optimum))
    centers = rng.standard_normal((num_regimes, context_dim))
    deltas = [
        np.linalg.norm(centers[i] - centers[j])
        for i in range(num_regimes)
        for j in range(i + 1, num_regimes)
    ]
    separation_target = rng.uniform(4.0, 8.0)
    centers *= separation_target / max(min(deltas), 1e-9)
    radius = 0.45 * separation_target  # strictly below half the separation
    return RegimeSpec(bounds=bounds, regimes=regimes, centers=centers,
                      mu=mu, lipschitz=lipschitz, radius=radius)


def alternating_schedule(num_regimes: int, horizon: int) -> np.ndarray:
    return np.arange(horizon) % num_regimes


def contraction_factor(mu: float, lipschitz: float, eta: float) -> float:
    """Per-visit squared-distance decay q = 1 - mu * eta * (2 - eta * L)."""
    if not 0.0 < eta < 2.0 / lipschitz:
        raise ValueError("step size must lie in (0, 2/L)")
    q = 1.0 - mu * eta * (2.0 - eta * lipschitz)
    if not 0.0 <= q < 1.0:
        raise AssertionError(f"contraction factor {q} outside [0, 1)")
    return q


def regret_bound(spec: RegimeSpec, init_states: np.ndarray, eta: float) -> tuple[np.ndarray, float]:
    """Per-regime constants C_r = (L/2) ||w0 - opt||^2 / (mu eta (2 - eta L))."""
    contraction_factor(spec.mu, spec.lipschitz, eta)  # validates eta
    denom = spec.mu * eta * (2.0 - eta * spec.lipschitz)
    per_regime = np.array(
        [
            0.5 * spec.lipschitz * float(np.sum((w0 - regime.optimum) ** 2)) / denom
            for w0, regime in zip(init_states, spec.regimes)
        ]
    )
    return per_regime, float(per_regime.sum())


def _sample_in_ball(rng: np.random.Generator, dim: int, radius: float) -> np.ndarray:
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    return radius * rng.uniform() ** (1.0 / dim) * direction


def _simulate(
    spec: RegimeSpec,
    schedule: np.ndarray,
    eta: float,
    rng: np.random.Generator,
    forced_mistakes: set[int] | None = None,
    epsilons: np.ndarray | None = None,
    gaussian_contexts: bool = False,
    adversarial_perturbation: bool = False,
) -> RegretTrace:
    contraction_factor(spec.mu, spec.lipschitz, eta)
    num_regimes = spec.num_regimes
    states = np.tile(spec.bounds.midpoint, (num_regimes, 1))
    per_step = np.empty(len(schedule))
    visits = np.zeros(num_regimes, dtype=int)
    identified = np.empty(len(schedule), dtype=int)
    per_regime_regret = np.zeros(num_regimes)
    forced = forced_mistakes or set()
    for t, true_regime in enumerate(schedule):
        true_regime = int(true_regime)
        if t in forced:
            wrong = [r for r in range(num_regimes) if r != true_regime]
            r_hat = wrong[int(rng.integers(len(wrong)))]
        else:
            if gaussian_contexts:
                noise = spec.context_noise * rng.standard_normal(spec.centers.shape[1])
            else:
                noise = _sample_in_ball(rng, spec.centers.shape[1], spec.radius)
            context = spec.centers[true_regime] + noise
            r_hat = int(np.argmin(np.linalg.norm(spec.centers - context, axis=1)))
        identified[t] = r_hat
        theta = states[r_hat]
        regret = spec.regimes[true_regime].value(theta)
        per_step[t] = regret
        per_regime_regret[true_regime] += regret
        visits[true_regime] += 1
        # The learner always updates the state it retrieved with that
        # regime's own (surrogate) gradient; misidentified steps therefore
        # give the wrong state an extra contraction step of its own
        # objective rather than corrupting it with a foreign gradient.
        grad = spec.regimes[r_hat].grad(theta)
        if epsilons is not None:
            eps_t = float(epsilons[t])
            if eps_t > 0.0:
                if adversarial_perturbation:
                    norm = float(np.linalg.norm(grad))
                    direction = -grad / norm if norm > 0.0 else _sample_in_ball(rng, len(grad), 1.0)
                    direction = direction / max(float(np.linalg.norm(direction)), 1e-300)
                else:
                    direction = _sample_in_ball(rng, len(grad), 1.0)
                    nrm = float(np.linalg.norm(direction))
                    direction = direction / nrm if nrm > 0 else direction
                grad = grad + eps_t * direction
        states[r_hat] = spec.bounds.clip(theta - eta * grad)
    return RegretTrace(per_step=per_step, visits=visits, identified=identified,
                       per_regime_regret=per_regime_regret)


def ra_gd_run(spec: RegimeSpec, schedule: np.ndarray, eta: float,
              rng: np.random.Generator) -> RegretTrace:
    """Per-regime projected gradient descent with nearest-neighbor regime
    identification from contexts drawn inside the cluster radius."""
    return _simulate(spec, schedule, eta, rng)


def misretrieval_run(spec: RegimeSpec, schedule: np.ndarray, eta: float,
                     rng: np.random.Generator, forced_mistakes) -> RegretTrace:
    """RA-GD with forced wrong-regime retrievals on the given step set."""
    return _simulate(spec, schedule, eta, rng, forced_mistakes=set(int(t) for t in forced_mistakes))


def noisy_gradient_run(spec: RegimeSpec, schedule: np.ndarray, eta: float,
                       rng: np.random.Generator, epsilons,
                       adversarial: bool = False) -> RegretTrace:
    """RA-GD with per-step gradient perturbations of norm at most eps_t."""
    return _simulate(
        spec, schedule, eta, rng,
        epsilons=np.asarray(epsilons, dtype=float),
        adversarial_perturbation=adversarial,
    )


def gradient_error_budget(spec: RegimeSpec, eta: float, epsilons, c: float = 2.0) -> float:
    """Extra regret allowance (eta / (1 - q)) * sum c * eps_t^2."""
    q = contraction_factor(spec.mu, spec.lipschitz, eta)
    eps = np.asarray(epsilons, dtype=float)
    return float(eta / (1.0 - q) * np.sum(c * eps**2))


def chi2_misretrieval_bound(context_noise: float, context_dim: int, separation: float) -> float:
    """Tail bound on Gaussian misretrieval: solve sigma (sqrt(d) + sqrt(2u)) =
    separation / 2 for u and return exp(-u); 1.0 when unsolvable, 0.0 for
    noiseless contexts."""
    if separation <= 0.0:
        raise ValueError("separation must be positive")
    if context_noise == 0.0:
        return 0.0
    root = separation / (2.0 * context_noise) - math.sqrt(context_dim)
    if root <= 0.0:
        return 1.0
    return math.exp(-0.5 * root * root)


def misretrieval_rate(rng: np.random.Generator, centers: np.ndarray, context_noise: float,
                      draws: int) -> float:
    """Monte-Carlo frequency of nearest-center misidentification under
    isotropic Gaussian context noise (keys sit exactly at the centers)."""
    num_regimes, dim = centers.shape
    mistakes = 0
    per_regime = draws // num_regimes + 1
    total = 0
    for r in range(num_regimes):
        noise = context_noise * rng.standard_normal((per_regime, dim))
        contexts = centers[r] + noise
        d2 = np.sum((contexts[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        mistakes += int(np.sum(np.argmin(d2, axis=1) != r))
        total += per_regime
        if total >= draws:
            break
    return mistakes / total


# --------------------------------------------------------------------- #
# report table for the CLI


@dataclass
class TheoryCheck:
    check_id: str
    bound: float
    observed: float
    passed: bool
    detail: str = ""

    @property
    def margin(self) -> float:
        return self.bound - self.observed


def run_theory_suite(seed: int = 0, specs: int = 50, horizon: int = 10_000,
                     quick: bool = False) -> list[TheoryCheck]:
    """Full verification battery; returns one row per check."""
    rng = np.random.default_rng([seed, 31])
    checks: list[TheoryCheck] = []
    if quick:
        specs, horizon = max(5, specs // 10), max(2000, horizon // 5)

    # Horizon-independent regret bound plus tail flatness over random specs.
    worst_gap = -math.inf
    worst_tail = 0.0
    violations = 0
    for _ in range(specs):
        spec = random_spec(rng)
        eta = 0.9 / spec.lipschitz
        schedule = alternating_schedule(spec.num_regimes, horizon)
        trace = ra_gd_run(spec, schedule, eta, rng)
        init = np.tile(spec.bounds.midpoint, (spec.num_regimes, 1))
        _, total_bound = regret_bound(spec, init, eta)
        gap = trace.cumulative - total_bound
        worst_gap = max(worst_gap, gap)
        worst_tail = max(worst_tail, trace.tail_increment(1000))
        if gap > 0.0:
            violations += 1
    checks.append(TheoryCheck("bounded-regret", 0.0, worst_gap, violations == 0,
                              f"{specs} specs, worst regret minus bound"))
    checks.append(TheoryCheck("regret-plateau", 1e-9, worst_tail, worst_tail < 1e-9,
                              "worst last-1000-step regret increment"))

    # Perfect retrieval under separated clusters.
    spec = random_spec(rng)
    schedule = alternating_schedule(spec.num_regimes, 10_000)
    trace = ra_gd_run(spec, schedule, 1.0 / spec.lipschitz, rng)
    mistakes = int(np.sum(trace.identified != schedule))
    checks.append(TheoryCheck("separated-retrieval", 0.0, float(mistakes), mistakes == 0,
                              "identification mistakes over 10k separated queries"))

    # Misretrieval decomposition.
    worst = -math.inf
    ok = True
    for _ in range(20):
        spec = random_spec(rng)
        eta = 0.9 / spec.lipschitz
        horizon_m = 2000
        schedule = alternating_schedule(spec.num_regimes, horizon_m)
        forced = rng.choice(horizon_m, size=50, replace=False)
        trace = misretrieval_run(spec, schedule, eta, rng, forced)
        init = np.tile(spec.bounds.midpoint, (spec.num_regimes, 1))
        _, base = regret_bound(spec, init, eta)
        bound = base + 50 * spec.delta_max()
        gap = trace.cumulative - bound
        worst = max(worst, gap)
        ok = ok and gap <= 0.0
    checks.append(TheoryCheck("misretrieval-decomposition", 0.0, worst, ok,
                              "20 seeds, worst regret minus (bound + mistakes * max gap)"))

    # Gradient-error bound (eta <= 1/L keeps the stated constant valid).
    worst = -math.inf
    ok = True
    for _ in range(20):
        spec = random_spec(rng)
        eta = 0.8 / spec.lipschitz
        horizon_g = 2000
        schedule = alternating_schedule(spec.num_regimes, horizon_g)
        eps = np.full(horizon_g, 0.1)
        trace = noisy_gradient_run(spec, schedule, eta, rng, eps)
        init = np.tile(spec.bounds.midpoint, (spec.num_regimes, 1))
        _, base = regret_bound(spec, init, eta)
        bound = base + gradient_error_budget(spec, eta, eps)
        gap = trace.cumulative - bound
        worst = max(worst, gap)
        ok = ok and gap <= 0.0
    checks.append(TheoryCheck("gradient-error", 0.0, worst, ok,
                              "20 seeds, constant 0.1 perturbations"))

    # Chi-square misretrieval tail at a solvable operating point.
    centers_rng = np.random.default_rng([seed, 37])
    centers = centers_rng.standard_normal((4, 5))
    deltas = [np.linalg.norm(centers[i] - centers[j]) for i in range(4) for j in range(i + 1, 4)]
    centers *= 7.0 / min(deltas)
    bound = chi2_misretrieval_bound(1.0, 5, 7.0)
    draws = 100_000 if not quick else 20_000
    rate = misretrieval_rate(centers_rng, centers, 1.0, draws)
    se = math.sqrt(max(rate * (1.0 - rate), 1e-12) / draws)
    checks.append(TheoryCheck("chi2-tail", bound + 3.0 * se, rate, rate <= bound + 3.0 * se,
                              f"{draws} Gaussian draws vs tail bound"))
    return checks
