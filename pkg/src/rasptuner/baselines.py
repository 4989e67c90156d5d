"""Baseline optimizers behind the same one-evaluation-per-step interface.

Random search samples the box uniformly. The evolution strategy is the
standard rank-one plus rank-mu covariance adaptation with cumulative
step-size control, driven one population member per environment step. The
GP baseline keeps a sliding window of at most 200 observations, fits a
Matern-5/2 ARD kernel plus learned white noise by multi-start local search
on the log marginal likelihood, and acquires by minimizing a lower
confidence bound with five random restarts of the same local search.

Each agent scalarizes the returned metric dictionary with its own
composer, so every algorithm optimizes the same observed signal.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .composer import ErrorComposer, MetricSpec
from .params import ParamBounds
from .tuner import RaspTuner, StepInfo


def rs_step(bounds: ParamBounds, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the box."""
    return rng.uniform(bounds.lower, bounds.upper)


class RandomSearchAgent:
    def __init__(self, bounds: ParamBounds, context_dim: int, seed: int = 0,
                 metric_specs: tuple[MetricSpec, ...] = ()):
        self.bounds = bounds
        self.context_dim = context_dim
        self.rng = np.random.default_rng([seed, 211])
        self.composer = ErrorComposer(metric_specs)

    def step(self, context, evaluate) -> tuple[np.ndarray, StepInfo]:
        t0 = time.perf_counter_ns()
        theta = rs_step(self.bounds, self.rng)
        t_env = time.perf_counter_ns()
        metrics = evaluate(theta)
        env_ns = time.perf_counter_ns() - t_env
        e_t, _ = self.composer.compose(metrics)
        return theta, StepInfo(e_t=e_t, latency_ns=(time.perf_counter_ns() - t0) - env_ns)


# --------------------------------------------------------------------- #
# covariance matrix adaptation


@dataclass
class CmaState:
    mean: np.ndarray
    sigma: float
    cov: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    generation: int


class CmaEs:
    """Rank-one + rank-mu covariance adaptation with cumulative step-size
    control; the covariance is kept symmetric positive definite by flooring
    its eigenvalues after every update."""

    def __init__(self, mean0: np.ndarray, sigma0: float, rng: np.random.Generator,
                 population: int | None = None):
        mean0 = np.asarray(mean0, dtype=float)
        n = mean0.size
        self.n = n
        self.rng = rng
        self.lam = population if population is not None else 4 + int(3 * math.log(n))
        self.mu = self.lam // 2
        raw = math.log(self.mu + 0.5) - np.log(np.arange(1, self.mu + 1))
        self.weights = raw / raw.sum()
        self.mu_eff = 1.0 / float(self.weights @ self.weights)
        self.c_sigma = (self.mu_eff + 2.0) / (n + self.mu_eff + 5.0)
        self.d_sigma = 1.0 + 2.0 * max(0.0, math.sqrt((self.mu_eff - 1.0) / (n + 1.0)) - 1.0) + self.c_sigma
        self.c_c = (4.0 + self.mu_eff / n) / (n + 4.0 + 2.0 * self.mu_eff / n)
        self.c_1 = 2.0 / ((n + 1.3) ** 2 + self.mu_eff)
        self.c_mu = min(
            1.0 - self.c_1,
            2.0 * (self.mu_eff - 2.0 + 1.0 / self.mu_eff) / ((n + 2.0) ** 2 + self.mu_eff),
        )
        self.chi_n = math.sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n))
        self.state = CmaState(
            mean=mean0.copy(),
            sigma=float(sigma0),
            cov=np.eye(n),
            p_sigma=np.zeros(n),
            p_c=np.zeros(n),
            generation=0,
        )
        self._refresh_eigen()

    def _refresh_eigen(self) -> None:
        cov = 0.5 * (self.state.cov + self.state.cov.T)
        evals, evecs = np.linalg.eigh(cov)
        floor = max(float(evals.max()) * 1e-14, 1e-30)
        evals = np.maximum(evals, floor)
        self.state.cov = (evecs * evals) @ evecs.T
        self._B = evecs
        self._D = np.sqrt(evals)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(0.5 * (self.state.cov + self.state.cov.T)).min())

    def ask(self) -> np.ndarray:
        z = self.rng.standard_normal((self.lam, self.n))
        y = z * self._D @ self._B.T
        return self.state.mean + self.state.sigma * y

    def tell(self, population: np.ndarray, errors) -> None:
        errors = np.asarray(errors, dtype=float)
        if not np.isfinite(errors).all():
            raise ValueError("covariance update requires finite errors")
        if len(population) != self.lam or len(errors) != self.lam:
            raise ValueError("population does not match the matching ask()")
        st = self.state
        order = np.argsort(errors, kind="stable")
        selected = np.asarray(population, dtype=float)[order[: self.mu]]
        y_sel = (selected - st.mean) / st.sigma
        y_w = self.weights @ y_sel
        st.mean = st.mean + st.sigma * y_w

        inv_sqrt = (self._B / self._D) @ self._B.T
        st.p_sigma = (1.0 - self.c_sigma) * st.p_sigma + math.sqrt(
            self.c_sigma * (2.0 - self.c_sigma) * self.mu_eff
        ) * (inv_sqrt @ y_w)
        st.generation += 1
        norm_ps = float(np.linalg.norm(st.p_sigma))
        denom = math.sqrt(1.0 - (1.0 - self.c_sigma) ** (2 * st.generation))
        h_sigma = 1.0 if norm_ps / denom < (1.4 + 2.0 / (self.n + 1.0)) * self.chi_n else 0.0
        st.p_c = (1.0 - self.c_c) * st.p_c + h_sigma * math.sqrt(
            self.c_c * (2.0 - self.c_c) * self.mu_eff
        ) * y_w

        delta_h = (1.0 - h_sigma) * self.c_c * (2.0 - self.c_c)
        rank_mu = (y_sel.T * self.weights) @ y_sel
        st.cov = (
            (1.0 - self.c_1 - self.c_mu) * st.cov
            + self.c_1 * (np.outer(st.p_c, st.p_c) + delta_h * st.cov)
            + self.c_mu * rank_mu
        )
        st.sigma = st.sigma * math.exp((self.c_sigma / self.d_sigma) * (norm_ps / self.chi_n - 1.0))
        self._refresh_eigen()


class CmaEsAgent:
    """Drives the strategy one population member per environment step and
    feeds ranked composed errors back after each full population."""

    def __init__(self, bounds: ParamBounds, context_dim: int, seed: int = 0,
                 metric_specs: tuple[MetricSpec, ...] = ()):
        self.bounds = bounds
        self.context_dim = context_dim
        self.composer = ErrorComposer(metric_specs)
        sigma0 = 0.2 * float(np.mean(bounds.width))
        self.es = CmaEs(bounds.midpoint, sigma0, np.random.default_rng([seed, 223]))
        self._pending: list[np.ndarray] = []
        self._errors: list[float] = []

    def step(self, context, evaluate) -> tuple[np.ndarray, StepInfo]:
        t0 = time.perf_counter_ns()
        if not self._pending:
            self._pending = [self.bounds.clip(x) for x in self.es.ask()]
            self._errors = []
        theta = self._pending[len(self._errors)]
        t_env = time.perf_counter_ns()
        metrics = evaluate(theta)
        env_ns = time.perf_counter_ns() - t_env
        e_t, _ = self.composer.compose(metrics)
        self._errors.append(e_t)
        if len(self._errors) == len(self._pending):
            self.es.tell(np.stack(self._pending), self._errors)
            self._pending = []
            self._errors = []
        return theta, StepInfo(e_t=e_t, latency_ns=(time.perf_counter_ns() - t0) - env_ns)


# --------------------------------------------------------------------- #
# sliding-window GP with lower-confidence-bound acquisition


def coordinate_search(objective, x0, step0: float, tol: float,
                      lower=None, upper=None, max_sweeps: int = 40):
    """Adaptive-step coordinate descent accepting improvements only.

    Probes +-step along each axis (a one-sided numerical slope), expands
    the per-axis step on success and halves it otherwise; terminates once
    every step falls below ``tol``. Monotone by construction.
    """
    x = np.asarray(x0, dtype=float).copy()
    fx = float(objective(x))
    steps = np.full(x.size, float(step0))
    for _ in range(max_sweeps):
        for i in range(x.size):
            moved = False
            for sign in (1.0, -1.0):
                trial = x.copy()
                value = trial[i] + sign * steps[i]
                if lower is not None:
                    value = max(value, lower[i])
                if upper is not None:
                    value = min(value, upper[i])
                trial[i] = value
                ft = float(objective(trial))
                if ft < fx:
                    x, fx = trial, ft
                    steps[i] *= 1.6
                    moved = True
                    break
            if not moved:
                steps[i] *= 0.5
        if steps.max() < tol:
            break
    return x, fx


def matern52(X1: np.ndarray, X2: np.ndarray, length_scales: np.ndarray, signal_var: float) -> np.ndarray:
    """Matern-5/2 kernel with per-dimension length scales."""
    A = X1 / length_scales
    B = X2 / length_scales
    sq = np.maximum(
        np.sum(A**2, axis=1)[:, None] + np.sum(B**2, axis=1)[None, :] - 2.0 * A @ B.T, 0.0
    )
    r = np.sqrt(sq)
    s5r = math.sqrt(5.0) * r
    return signal_var * (1.0 + s5r + 5.0 * sq / 3.0) * np.exp(-s5r)


class GpModel:
    """Windowed GP regression: constant mean, Matern-5/2 ARD plus white noise."""

    def __init__(self, input_dim: int, window: int = 200, jitter: float = 1e-10):
        self.input_dim = input_dim
        self.window = window
        self.jitter = jitter
        self._x: list[np.ndarray] = []
        self._y: list[float] = []
        self.log_ls = np.zeros(input_dim)
        self.log_sf = 0.0
        self.log_sn = math.log(0.1)
        self._factor = None
        self._alpha = None
        self._mean = 0.0
        self._Xcache = None

    def __len__(self) -> int:
        return len(self._y)

    def add(self, x: np.ndarray, y: float) -> None:
        self._x.append(np.asarray(x, dtype=float))
        self._y.append(float(y))
        if len(self._y) > self.window:
            self._x.pop(0)
            self._y.pop(0)
        self._factor = None

    def _hyper(self):
        return np.concatenate([self.log_ls, [self.log_sf, self.log_sn]])

    def _set_hyper(self, h: np.ndarray) -> None:
        self.log_ls = np.asarray(h[: self.input_dim], dtype=float).copy()
        self.log_sf = float(h[self.input_dim])
        self.log_sn = float(h[self.input_dim + 1])
        self._factor = None

    def _factorize(self, X: np.ndarray, noise_var: float, signal_var: float, ls: np.ndarray):
        K = matern52(X, X, ls, signal_var)
        jitter = self.jitter
        max_jitter = max(signal_var, 1.0) * 1e-2
        while jitter <= max_jitter:
            try:
                return cho_factor(K + (noise_var + jitter) * np.eye(len(X)), lower=True)
            except np.linalg.LinAlgError:
                jitter = max(jitter * 10.0, 1e-12)
        raise RuntimeError(
            f"kernel matrix not factorizable: n={len(X)}, "
            f"signal_var={signal_var:.3g}, noise_var={noise_var:.3g}, "
            f"jitter reached {jitter:.3g}"
        )

    def log_marginal_likelihood(self, hyper: np.ndarray | None = None) -> float:
        if len(self._y) < 1:
            return 0.0
        h = self._hyper() if hyper is None else np.asarray(hyper, dtype=float)
        ls = np.exp(h[: self.input_dim])
        signal_var = math.exp(2.0 * h[self.input_dim])
        noise_var = math.exp(2.0 * h[self.input_dim + 1])
        X = np.stack(self._x)
        y = np.asarray(self._y) - float(np.mean(self._y))
        factor = self._factorize(X, noise_var, signal_var, ls)
        alpha = cho_solve(factor, y)
        log_det = float(np.sum(np.log(np.diag(factor[0]))))
        return float(-0.5 * y @ alpha - log_det - 0.5 * len(y) * math.log(2.0 * math.pi))

    def fit(self, rng: np.random.Generator, starts: int = 5) -> float:
        """Maximize the log marginal likelihood by multi-start local search.

        Start 1 warm-starts from the current hyperparameters, the rest are
        random draws; the search only ever accepts improvements, so the
        fitted likelihood dominates every start's initial value.
        """
        if len(self._y) < 2:
            raise ValueError("need at least 2 window points to fit")
        candidates = [self._hyper()]
        for _ in range(starts - 1):
            log_ls = rng.uniform(math.log(0.1), math.log(3.0), size=self.input_dim)
            log_sf = rng.uniform(math.log(0.1), math.log(2.0))
            log_sn = rng.uniform(math.log(1e-3), math.log(0.3))
            candidates.append(np.concatenate([log_ls, [log_sf, log_sn]]))
        best_h, best_val = None, math.inf
        for h0 in candidates:
            h, val = coordinate_search(
                lambda h: -self.log_marginal_likelihood(h), h0,
                step0=0.5, tol=1e-2, max_sweeps=8,
            )
            if val < best_val:
                best_h, best_val = h, val
        self._set_hyper(best_h)
        return -best_val

    def _ensure_factor(self) -> None:
        if self._factor is not None:
            return
        ls = np.exp(self.log_ls)
        signal_var = math.exp(2.0 * self.log_sf)
        noise_var = math.exp(2.0 * self.log_sn)
        X = np.stack(self._x)
        self._mean = float(np.mean(self._y))
        y = np.asarray(self._y) - self._mean
        self._factor = self._factorize(X, noise_var, signal_var, ls)
        self._alpha = cho_solve(self._factor, y)
        self._Xcache = X

    def posterior(self, x: np.ndarray) -> tuple[float, float]:
        """Posterior mean and (non-negative) latent variance at one input."""
        if len(self._y) < 1:
            return 0.0, math.exp(2.0 * self.log_sf)
        self._ensure_factor()
        ls = np.exp(self.log_ls)
        signal_var = math.exp(2.0 * self.log_sf)
        k_star = matern52(self._Xcache, np.asarray(x, dtype=float)[None, :], ls, signal_var)[:, 0]
        mean = self._mean + float(k_star @ self._alpha)
        v = solve_triangular(self._factor[0], k_star, lower=True)
        var = signal_var - float(v @ v)
        return mean, max(var, 0.0)


class GpUcbAgent:
    """Sliding-window GP with LCB acquisition over theta at the observed context.

    Contexts wider than ``context_cap`` dimensions are reduced by a fixed
    seeded random projection before entering the kernel. Hyperparameters
    are refit on a small cadence to keep per-step cost bounded; acquisition
    runs five random restarts of the coordinate local search at 1e-4 step
    tolerance.
    """

    def __init__(self, bounds: ParamBounds, context_dim: int, seed: int = 0,
                 metric_specs: tuple[MetricSpec, ...] = (), kappa: float = 2.0,
                 window: int = 200, design_steps: int = 5, fit_every: int = 5,
                 restarts: int = 5, context_cap: int = 32):
        self.bounds = bounds
        self.context_dim = context_dim
        self.kappa = kappa
        self.design_steps = design_steps
        self.fit_every = fit_every
        self.restarts = restarts
        self.rng = np.random.default_rng([seed, 227])
        self.composer = ErrorComposer(metric_specs)
        if context_dim > context_cap:
            proj_rng = np.random.default_rng([seed, 229])
            self.projection = proj_rng.normal(0.0, 1.0 / math.sqrt(context_dim),
                                              size=(context_cap, context_dim))
            reduced = context_cap
        else:
            self.projection = None
            reduced = context_dim
        self.model = GpModel(bounds.dim + reduced, window=window)
        self._t = 0
        self._fitted = False

    def _features(self, theta_norm: np.ndarray, context: np.ndarray) -> np.ndarray:
        ctx = context if self.projection is None else self.projection @ context
        return np.concatenate([theta_norm, ctx])

    def _acquire(self, context: np.ndarray) -> np.ndarray:
        ctx = context if self.projection is None else self.projection @ context

        def lcb(theta_norm: np.ndarray) -> float:
            mean, var = self.model.posterior(np.concatenate([theta_norm, ctx]))
            return mean - self.kappa * math.sqrt(var)

        d = self.bounds.dim
        best_x, best_val = None, math.inf
        for _ in range(self.restarts):
            x0 = self.rng.uniform(0.0, 1.0, size=d)
            x, val = coordinate_search(lcb, x0, step0=0.25, tol=1e-4,
                                       lower=np.zeros(d), upper=np.ones(d))
            if val < best_val:
                best_x, best_val = x, val
        return best_x

    def step(self, context, evaluate) -> tuple[np.ndarray, StepInfo]:
        t0 = time.perf_counter_ns()
        context = np.asarray(context, dtype=float)
        if self._t < self.design_steps or len(self.model) < 2:
            theta = rs_step(self.bounds, self.rng)
        else:
            if not self._fitted or self._t % self.fit_every == 0:
                self.model.fit(self.rng, starts=self.restarts)
                self._fitted = True
            theta = self.bounds.clip(self.bounds.denormalize(self._acquire(context)))
        t_env = time.perf_counter_ns()
        metrics = evaluate(theta)
        env_ns = time.perf_counter_ns() - t_env
        e_t, _ = self.composer.compose(metrics)
        theta_norm = self.bounds.normalize(self.bounds.clip(theta))
        self.model.add(self._features(theta_norm, context), e_t)
        self._t += 1
        return theta, StepInfo(e_t=e_t, latency_ns=(time.perf_counter_ns() - t0) - env_ns)


def nomem_wrap(agent: RaspTuner) -> RaspTuner:
    """Fresh copy of a tuner with every context masked to zero before use."""
    return RaspTuner(
        bounds=agent.bounds,
        context_dim=agent.context_dim,
        config=agent.cfg.with_masked_context(),
        seed=agent.seed,
    )
