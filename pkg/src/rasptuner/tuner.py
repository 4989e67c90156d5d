"""The online tuning agent: candidate generation, LCB selection, one-step loop.

Per step the agent retrieves a prompt and parameter hint for the observed
context, proposes a small candidate set around a blend of the current
iterate and the hint (one surrogate-gradient step, a handful of uniform
perturbations, and the hint itself), scores candidates with the top-k
surrogate lower confidence bound, deploys the winner, scalarizes the
returned metrics, and then either nudges the retrieved prompts (fast path)
or runs an anchored full update (slow path) depending on the anomaly and
uncertainty triggers.

All candidate work happens in normalized [0, 1] coordinates so the step
scale is unitless across environments. Durable agent state is mutated only
after the environment evaluation returns, so a failed evaluation leaves
the agent consistent.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .adaptation import AnchorSnapshot, ReplayBuffer, should_escalate, update_full_emergency, update_prompts_only
from .composer import ErrorComposer, MetricSpec
from .memory import PromptMemory
from .params import ParamBounds, RunningEMA
from .surrogate import MoESurrogate

# Canonical per-step phase order; the trace hook receives these labels.
PHASES = (
    "context",
    "retrieve",
    "propose",
    "select",
    "deploy",
    "compose",
    "replay",
    "memory",
    "adapt",
    "advance",
)

CANDIDATE_GRADIENT = "gradient"
CANDIDATE_PERTURBATION = "perturbation"
CANDIDATE_HINT = "hint"


@dataclass(frozen=True)
class TunerConfig:
    """All agent hyperparameters; defaults are the benchmark-wide settings."""

    memory_size: int = 200
    top_k: int = 3
    temperature: float = 1.0
    novelty_threshold: float = 0.7
    prompt_dim: int = 32
    num_experts: int = 6
    expert_hidden: tuple[int, ...] = (48, 24)
    gate_hidden: tuple[int, ...] = (48,)
    ema_momentum: float = 0.97
    kappa: float = 2.0
    prompt_lr: float = 5e-3
    prompt_l2: float = 1e-4
    full_lr: float = 1e-4
    anchor_penalty: float = 3e-4
    base_step_scale: float = 0.15
    k_min: int = 2
    k_max: int = 6
    z_trigger: float = 2.0
    var_trigger: float = 2.0
    replay_capacity: int = 256
    batch_size: int = 16
    emergency_steps: int = 5
    n_perturb: int = 6
    blend_current: float = 0.65
    uncertainty_mix: float = 0.55
    eps: float = 1e-8
    mask_context: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.blend_current <= 1.0:
            raise ValueError("blend_current must lie in (0, 1]")
        if self.kappa < 0.0:
            raise ValueError("kappa must be non-negative")
        if self.n_perturb < 0 or self.memory_size < 1 or self.top_k < 1:
            raise ValueError("invalid candidate/memory configuration")

    def with_masked_context(self) -> "TunerConfig":
        return replace(self, mask_context=True)


@dataclass
class StepInfo:
    """Per-step diagnostics row; baselines fill the fields they have."""

    chosen_kind: str = ""
    chosen_index: int = -1
    lcb_values: list[float] = field(default_factory=list)
    novelty: float = float("nan")
    confidence: float = float("nan")
    entropy: float = float("nan")
    k_t: int = 0
    escalated: bool = False
    e_t: float = float("nan")
    z_err: float = float("nan")
    variance: float = float("nan")
    update_loss: float = float("nan")
    latency_ns: int = 0


def propose_candidates(
    theta_norm: np.ndarray,
    hint_norm: np.ndarray,
    grad: np.ndarray,
    cfg: TunerConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, list[str]]:
    """Candidate list in normalized coordinates, clipped into [0, 1]^d.

    The search center blends the current iterate with the retrieved hint.
    The gradient candidate steps a fixed normalized distance along the
    unit-normalized surrogate gradient (a zero gradient degenerates to the
    center itself); perturbations are uniform in a +-scale box around the
    center; the hint is always included verbatim.
    """
    base = cfg.blend_current * theta_norm + (1.0 - cfg.blend_current) * hint_norm
    scale = cfg.base_step_scale
    gnorm = float(np.linalg.norm(grad))
    grad_candidate = base - scale * (grad / gnorm) if gnorm > 0.0 else base.copy()
    perturbations = base + rng.uniform(-scale, scale, size=(cfg.n_perturb, base.size))
    candidates = np.vstack([grad_candidate, perturbations, hint_norm])
    kinds = [CANDIDATE_GRADIENT] + [CANDIDATE_PERTURBATION] * cfg.n_perturb + [CANDIDATE_HINT]
    return np.clip(candidates, 0.0, 1.0), kinds


def select_lcb(
    candidates_norm: np.ndarray,
    moe: MoESurrogate,
    context: np.ndarray,
    prompt: np.ndarray,
    kappa: float,
    k: int,
) -> tuple[int, np.ndarray, np.ndarray, np.ndarray]:
    """Score candidates with mean - kappa * sqrt(var); ties keep list order."""
    if len(candidates_norm) == 0:
        raise ValueError("candidate list must be non-empty")
    X = np.hstack(
        [
            candidates_norm,
            np.tile(context, (len(candidates_norm), 1)),
            np.tile(prompt, (len(candidates_norm), 1)),
        ]
    )
    means, variances = moe.forward_topk_batch(X, k)
    lcb = means - kappa * np.sqrt(np.maximum(variances, 0.0))
    return int(np.argmin(lcb)), lcb, means, variances


class RaspTuner:
    """Retrieval-augmented soft-prompt tuner behind the one-evaluation-per-step
    agent interface: ``step(context, evaluate) -> (theta, StepInfo)``."""

    def __init__(
        self,
        bounds: ParamBounds,
        context_dim: int,
        config: TunerConfig | None = None,
        seed: int = 0,
        metric_specs: tuple[MetricSpec, ...] = (),
        trace_hook=None,
    ):
        cfg = config if config is not None else TunerConfig()
        self.bounds = bounds
        self.context_dim = context_dim
        self.cfg = cfg
        self.seed = seed
        self.rng = np.random.default_rng([seed, 101])
        self.composer = ErrorComposer(metric_specs, momentum=cfg.ema_momentum, eps=cfg.eps)
        self.memory = PromptMemory(
            context_dim=context_dim,
            prompt_dim=cfg.prompt_dim,
            max_size=cfg.memory_size,
            top_k=cfg.top_k,
            temperature=cfg.temperature,
            novelty_threshold=cfg.novelty_threshold,
            momentum=cfg.ema_momentum,
            eps=cfg.eps,
        )
        self.moe = MoESurrogate(
            theta_dim=bounds.dim,
            context_dim=context_dim,
            prompt_dim=cfg.prompt_dim,
            num_experts=cfg.num_experts,
            expert_hidden=cfg.expert_hidden,
            gate_hidden=cfg.gate_hidden,
            k_min=cfg.k_min,
            k_max=cfg.k_max,
            momentum=cfg.ema_momentum,
            eps=cfg.eps,
            rng=np.random.default_rng([seed, 103]),
        )
        self.anchor = AnchorSnapshot.of(self.moe)
        self.replay = ReplayBuffer(cfg.replay_capacity)
        self.variance_ema = RunningEMA(cfg.ema_momentum)
        self.theta = bounds.midpoint
        self._prev_variance = 0.0
        self._trace_hook = trace_hook

    # ------------------------------------------------------------------ #

    def _trace(self, phase: str) -> None:
        if self._trace_hook is not None:
            self._trace_hook(phase, self)

    def prompt_fingerprint(self) -> bytes:
        import hashlib

        h = hashlib.sha256()
        for entry in self.memory.entries:
            h.update(entry.prompt.tobytes())
        return h.digest()

    def backbone_fingerprint(self) -> bytes:
        return self.moe.backbone_fingerprint()

    # ------------------------------------------------------------------ #

    def step(self, context, evaluate) -> tuple[np.ndarray, StepInfo]:
        """Run one tuning step; ``evaluate(theta) -> metric map`` is called once.

        Durable state (memory, composer, replay, network parameters, EMA
        statistics) is only mutated after ``evaluate`` returns, so an
        evaluation failure propagates without leaving partial updates.
        """
        cfg = self.cfg
        t_start = time.perf_counter_ns()

        self._trace("context")
        context = np.asarray(context, dtype=float)
        if context.shape != (self.context_dim,):
            raise ValueError(f"expected context of shape ({self.context_dim},), got {context.shape}")
        c = np.zeros_like(context) if cfg.mask_context else context

        self._trace("retrieve")
        theta_norm = self.bounds.normalize(self.bounds.clip(self.theta))
        retrieval = self.memory.retrieve(c, theta_norm, update_stats=False)

        self._trace("propose")
        x_now = np.concatenate([theta_norm, c, retrieval.prompt_mix])
        k_t = self.moe.active_expert_count(
            self._prev_variance, retrieval.novelty, mix=cfg.uncertainty_mix, update_stats=False
        )
        pred_now = self.moe.forward_topk(x_now, k_t)
        grad_theta = self.moe.grad_input(x_now, active=pred_now.active_set)[: self.bounds.dim]
        candidates, kinds = propose_candidates(theta_norm, retrieval.theta_hint, grad_theta, cfg, self.rng)

        self._trace("select")
        idx, lcb, _, variances = select_lcb(candidates, self.moe, c, retrieval.prompt_mix, cfg.kappa, k_t)
        chosen_norm = candidates[idx]
        theta_next = self.bounds.clip(self.bounds.denormalize(chosen_norm))

        self._trace("deploy")
        t_env = time.perf_counter_ns()
        metrics = evaluate(theta_next)
        env_ns = time.perf_counter_ns() - t_env

        self._trace("compose")
        e_t, _ = self.composer.compose(metrics)
        z_err = self.composer.anomaly_score(e_t)

        # Deferred statistic commits now that the evaluation succeeded.
        if not retrieval.empty:
            self.memory.note_distance(retrieval.d_min)
        self.moe.commit_uncertainty(self._prev_variance)

        self._trace("replay")
        self.replay.push(chosen_norm, c, e_t)

        self._trace("memory")
        inserted = self.memory.maybe_insert(c, chosen_norm, e_t, retrieval.novelty)
        if not inserted and not retrieval.empty:
            self.memory.update_best(retrieval.indices[0], chosen_norm, e_t)

        self._trace("adapt")
        v_sel = float(variances[idx])
        escalated = should_escalate(
            z_err, v_sel, self.variance_ema, cfg.z_trigger, cfg.var_trigger, cfg.eps
        )
        if escalated:
            update_loss = update_full_emergency(
                self.moe,
                self.replay,
                self.anchor,
                chosen_norm,
                c,
                e_t,
                self.rng,
                lr=cfg.full_lr,
                anchor_penalty=cfg.anchor_penalty,
                batch_size=cfg.batch_size,
                steps=cfg.emergency_steps,
            )
        else:
            update_loss = update_prompts_only(
                self.moe,
                self.memory,
                retrieval,
                chosen_norm,
                c,
                e_t,
                lr=cfg.prompt_lr,
                l2=cfg.prompt_l2,
            )
        self.variance_ema.update(v_sel)
        self._prev_variance = v_sel

        self._trace("advance")
        self.theta = theta_next
        info = StepInfo(
            chosen_kind=kinds[idx],
            chosen_index=idx,
            lcb_values=[float(v) for v in lcb],
            novelty=retrieval.novelty,
            confidence=retrieval.confidence,
            entropy=retrieval.entropy,
            k_t=k_t,
            escalated=escalated,
            e_t=e_t,
            z_err=z_err,
            variance=v_sel,
            update_loss=update_loss,
            latency_ns=(time.perf_counter_ns() - t_start) - env_ns,
        )
        return theta_next, info
