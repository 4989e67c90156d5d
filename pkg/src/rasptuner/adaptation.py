"""Two-timescale learning: cheap prompt-only steps, rare full updates.

The fast path backpropagates a robust regression loss into the K retrieved
prompt vectors only (through their softmax mixing weights) and never
touches expert or gate parameters. The slow path runs a few replay
minibatch steps on the full backbone with an L2 pull toward a frozen
anchor copy of the initial parameters, and never touches prompts. A pure
threshold rule on the error-anomaly and variance z-scores decides which
path runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .memory import PromptMemory, RetrievalResult
from .params import EPS, RunningEMA
from .surrogate import MoESurrogate


class ReplayBuffer:
    """Fixed-capacity ring of (theta, context, error) observations, FIFO overwrite."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: list[tuple[np.ndarray, np.ndarray, float]] = []
        self._cursor = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, theta, context, error: float) -> None:
        item = (np.asarray(theta, float).copy(), np.asarray(context, float).copy(), float(error))
        if len(self._items) < self.capacity:
            self._items.append(item)
        else:
            self._items[self._cursor] = item
            self._cursor = (self._cursor + 1) % self.capacity

    def items(self):
        return list(self._items)

    def sample(self, rng: np.random.Generator, n: int):
        """n uniform items; sampled with replacement only when the buffer is short."""
        if not self._items or n <= 0:
            return []
        replace = len(self._items) < n
        idx = rng.choice(len(self._items), size=n, replace=replace)
        return [self._items[i] for i in idx]


@dataclass(frozen=True)
class AnchorSnapshot:
    """Immutable copy of the backbone parameters taken at agent construction."""

    flat: np.ndarray

    def __post_init__(self) -> None:
        frozen = np.asarray(self.flat, dtype=float).copy()
        frozen.setflags(write=False)
        object.__setattr__(self, "flat", frozen)

    @classmethod
    def of(cls, moe: MoESurrogate) -> "AnchorSnapshot":
        return cls(moe.flat_params())


def smooth_l1(residual: float, beta: float = 1.0) -> float:
    r = abs(float(residual))
    return 0.5 * r * r / beta if r < beta else r - 0.5 * beta


def smooth_l1_grad(residual: float, beta: float = 1.0) -> float:
    r = float(residual)
    return r / beta if abs(r) < beta else math.copysign(1.0, r)


def update_prompts_only(
    moe: MoESurrogate,
    memory: PromptMemory,
    retrieval: RetrievalResult,
    theta_norm: np.ndarray,
    context: np.ndarray,
    error: float,
    lr: float = 5e-3,
    l2: float = 1e-4,
) -> float:
    """One SGD step on the retrieved prompts; backbone stays bitwise intact.

    Loss is SmoothL1(prediction, error) plus an L2 penalty on the retrieved
    prompts. The chain rule through the mixed prompt gives each retrieved
    prompt the shared input-gradient block scaled by its own alpha.
    Returns the loss value; a retrieval from empty memory is a no-op.
    """
    if retrieval.empty or not retrieval.entries:
        return 0.0
    prompts = [entry.prompt for entry in retrieval.entries]
    prompt_mix = retrieval.alphas @ np.stack(prompts)
    x = np.concatenate([theta_norm, context, prompt_mix])
    pred = moe.forward_full(x)
    residual = pred.mean - float(error)
    loss = smooth_l1(residual) + l2 * sum(float(p @ p) for p in prompts)
    grad_x = moe.grad_input(x)
    prompt_block = grad_x[-moe.prompt_dim :] * smooth_l1_grad(residual)
    for alpha, entry in zip(retrieval.alphas, retrieval.entries):
        grad_p = alpha * prompt_block + 2.0 * l2 * entry.prompt
        entry.prompt = entry.prompt - lr * grad_p
    return float(loss)


def update_full_emergency(
    moe: MoESurrogate,
    buffer: ReplayBuffer,
    anchor: AnchorSnapshot,
    theta_norm: np.ndarray,
    context: np.ndarray,
    error: float,
    rng: np.random.Generator,
    lr: float = 1e-4,
    anchor_penalty: float = 3e-4,
    batch_size: int = 16,
    steps: int = 5,
) -> float:
    """Replay-minibatch steps on experts and gate; prompts are never touched.

    Each batch stacks the current observation with uniformly drawn replay
    items. Replay entries carry no prompt, so surrogate inputs are rebuilt
    at the zero prompt for every batch row (prompts are zero-initialized,
    making that the natural prompt-agnostic operating point of the
    backbone). The loss is batch MSE plus an L2 pull toward the anchor;
    the full ensemble is used, not top-k. Returns the last pre-step loss.
    """
    zero_prompt = np.zeros(moe.prompt_dim)
    current = (np.asarray(theta_norm, float), np.asarray(context, float), float(error))
    loss = 0.0
    for _ in range(max(1, steps)):
        batch = [current] + buffer.sample(rng, batch_size - 1)
        X = np.stack([np.concatenate([th, c, zero_prompt]) for th, c, _ in batch])
        targets = np.array([e for _, _, e in batch])
        means, _ = moe.forward_topk_batch(X, moe.num_experts)
        flat = moe.flat_params()
        anchor_gap = flat - anchor.flat
        loss = float(np.mean((means - targets) ** 2) + anchor_penalty * (anchor_gap @ anchor_gap))
        loss_grad = 2.0 * (means - targets) / len(batch)
        expert_grads, gate_grads = moe.grad_params(X, loss_grad)
        total_grad = moe.flatten_grads(expert_grads, gate_grads) + 2.0 * anchor_penalty * anchor_gap
        moe.load_flat(flat - lr * total_grad)
    return loss


def should_escalate(
    z_err: float,
    variance: float,
    variance_ema: RunningEMA,
    z_trigger: float = 2.0,
    var_trigger: float = 2.0,
    eps: float = EPS,
) -> bool:
    """True when the error anomaly or the variance z-score crosses its trigger."""
    return float(z_err) > z_trigger or variance_ema.z(variance, eps) > var_trigger
