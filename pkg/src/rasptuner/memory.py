"""Capped context-indexed memory with softmax top-K retrieval.

Entries pair a context key with the best parameters seen under it, the
error those parameters achieved, and a trainable prompt vector. Retrieval
scans all keys (the cap is small, a linear scan is fine), softmax-weights
the K nearest by negative distance, and reports a novelty score: the
logistic z-score of the nearest-neighbor distance against its running EMA.
Slots are created when novelty exceeds a threshold and evicted strictly
FIFO once the cap is reached.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .params import EPS, RunningEMA, logistic


@dataclass
class MemoryEntry:
    key: np.ndarray
    theta_best: np.ndarray
    best_error: float
    prompt: np.ndarray
    insert_seq: int


@dataclass
class RetrievalResult:
    """Outcome of one lookup; ``entries`` holds live references so prompt
    updates stay valid even if a later insertion evicts the oldest slot."""

    indices: list[int]
    alphas: np.ndarray
    prompt_mix: np.ndarray
    theta_hint: np.ndarray
    confidence: float
    entropy: float
    d_min: float
    novelty: float
    empty: bool
    entries: list[MemoryEntry] = field(default_factory=list, repr=False)


class PromptMemory:
    def __init__(
        self,
        context_dim: int,
        prompt_dim: int,
        max_size: int = 200,
        top_k: int = 3,
        temperature: float = 1.0,
        novelty_threshold: float = 0.7,
        momentum: float = 0.97,
        eps: float = EPS,
    ):
        if max_size < 1 or top_k < 1 or temperature <= 0.0:
            raise ValueError("need max_size >= 1, top_k >= 1, temperature > 0")
        self.context_dim = context_dim
        self.prompt_dim = prompt_dim
        self.max_size = max_size
        self.top_k = top_k
        self.temperature = temperature
        self.novelty_threshold = novelty_threshold
        self.eps = eps
        self.entries: list[MemoryEntry] = []
        self.distance_ema = RunningEMA(momentum)
        self._next_seq = 0

    def __len__(self) -> int:
        return len(self.entries)

    def _check_context(self, context) -> np.ndarray:
        context = np.asarray(context, dtype=float)
        if context.shape != (self.context_dim,):
            raise ValueError(f"expected context of shape ({self.context_dim},), got {context.shape}")
        return context

    def retrieve(self, context, fallback_theta, update_stats: bool = True) -> RetrievalResult:
        """Top-K lookup for ``context``.

        On an empty memory the prompt mix is zero, the hint is the caller's
        current theta and novelty is forced to 1.0 so the first slot is
        always created. Otherwise alphas are softmax(-d / tau) over the K
        nearest keys; the distance EMA sees d_min only after novelty was
        computed, so a first visit to a new regime registers as novel.
        """
        context = self._check_context(context)
        fallback_theta = np.asarray(fallback_theta, dtype=float)
        if not self.entries:
            return RetrievalResult(
                indices=[],
                alphas=np.zeros(0),
                prompt_mix=np.zeros(self.prompt_dim),
                theta_hint=fallback_theta.copy(),
                confidence=0.0,
                entropy=0.0,
                d_min=math.inf,
                novelty=1.0,
                empty=True,
            )
        keys = np.stack([entry.key for entry in self.entries])
        dists = np.linalg.norm(keys - context, axis=1)
        order = np.argsort(dists, kind="stable")[: min(self.top_k, len(self.entries))]
        logits = -dists[order] / self.temperature
        logits -= logits.max()
        alphas = np.exp(logits)
        alphas /= alphas.sum()
        picked = [self.entries[i] for i in order]
        prompt_mix = alphas @ np.stack([e.prompt for e in picked])
        theta_hint = alphas @ np.stack([e.theta_best for e in picked])
        d_min = float(dists[order[0]])
        novelty = float(logistic(self.distance_ema.z(d_min, self.eps)))
        if update_stats:
            self.distance_ema.update(d_min)
        entropy = float(-np.sum(alphas * np.log(np.maximum(alphas, 1e-300))))
        return RetrievalResult(
            indices=[int(i) for i in order],
            alphas=alphas,
            prompt_mix=prompt_mix,
            theta_hint=theta_hint,
            confidence=float(alphas.max()),
            entropy=entropy,
            d_min=d_min,
            novelty=novelty,
            empty=False,
            entries=picked,
        )

    def note_distance(self, d_min: float) -> None:
        """Commit a nearest-neighbor distance deferred by retrieve(..., update_stats=False)."""
        self.distance_ema.update(d_min)

    def maybe_insert(self, context, theta, error: float, novelty: float) -> bool:
        """Create a zero-prompt slot when ``novelty`` exceeds the threshold.

        Evicts the oldest entry (FIFO by insert_seq) once the cap is hit.
        """
        if novelty <= self.novelty_threshold:
            return False
        context = self._check_context(context)
        entry = MemoryEntry(
            key=context.copy(),
            theta_best=np.asarray(theta, dtype=float).copy(),
            best_error=float(error),
            prompt=np.zeros(self.prompt_dim),
            insert_seq=self._next_seq,
        )
        self._next_seq += 1
        self.entries.append(entry)
        if len(self.entries) > self.max_size:
            oldest = min(range(len(self.entries)), key=lambda i: self.entries[i].insert_seq)
            self.entries.pop(oldest)
        return True

    def update_best(self, index: int, theta, error: float) -> bool:
        """Replace an entry's best parameters on strict improvement only."""
        if not 0 <= index < len(self.entries):
            raise IndexError(f"memory index {index} out of range")
        entry = self.entries[index]
        if float(error) < entry.best_error:
            entry.theta_best = np.asarray(theta, dtype=float).copy()
            entry.best_error = float(error)
            return True
        return False

    def snapshot(self) -> dict:
        """JSON-serializable dump for inspection (keys, bests, prompt norms)."""
        return {
            "entry_count": len(self.entries),
            "keys": [entry.key.tolist() for entry in self.entries],
            "theta_best": [entry.theta_best.tolist() for entry in self.entries],
            "best_error": [entry.best_error for entry in self.entries],
            "prompt_norm": [float(np.linalg.norm(entry.prompt)) for entry in self.entries],
            "insert_seq": [entry.insert_seq for entry in self.entries],
        }
