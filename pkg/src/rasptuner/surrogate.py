"""Gated mixture-of-experts error surrogate with hand-rolled backprop.

The architecture is fixed and small (dense ReLU experts with a linear
scalar head, one dense gate emitting expert logits), so reverse-mode
gradients are derived by hand instead of pulling in an autodiff framework.
Predictions combine expert outputs under softmax gate weights; the
weighted spread of expert outputs doubles as an uncertainty estimate, and
an adaptive top-k rule recruits more experts when uncertainty or retrieval
novelty is high.

Gradient conventions: the top-k active set is treated as constant (the
selection is a discontinuous argmax), and gradients flow through both the
expert outputs and the gate softmax, including the renormalization over
the active subset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .params import EPS, RunningEMA, logistic


class DenseNet:
    """Fully connected net, ReLU hidden layers, linear output layer."""

    def __init__(self, sizes, rng: np.random.Generator):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            scale = math.sqrt(2.0 / fan_in)
            self.weights.append(rng.normal(0.0, scale, size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def forward(self, x: np.ndarray, cache: list | None = None) -> np.ndarray:
        """Evaluate a batch ``x`` of shape (B, in); optionally fill ``cache``
        with (layer inputs, pre-activations) for a later backward pass."""
        a = x
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            if cache is not None:
                cache.append((a, z))
            a = z if layer == self.num_layers - 1 else np.maximum(z, 0.0)
        return a

    def backward(self, cache, grad_out: np.ndarray):
        """Return (grad wrt input, [(dW, db)] per layer), summed over the batch."""
        grads = [None] * self.num_layers
        g = grad_out
        for layer in reversed(range(self.num_layers)):
            inputs, _ = cache[layer]
            grads[layer] = (g.T @ inputs, g.sum(axis=0))
            g = g @ self.weights[layer]
            if layer > 0:
                g = g * (cache[layer - 1][1] > 0.0)
        return g, grads

    def zero_grads(self):
        return [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(self.weights, self.biases)]


@dataclass
class MoEPrediction:
    mean: float
    variance: float
    per_expert: np.ndarray
    gate_weights: np.ndarray
    active_set: np.ndarray


def expert_count_from_mix(eta: float, k_min: int, k_max: int) -> int:
    """round(k_min + (k_max - k_min) * eta), half away from zero for determinism."""
    k = int(math.floor(k_min + (k_max - k_min) * float(eta) + 0.5))
    return max(k_min, min(k_max, k))


class MoESurrogate:
    """E experts plus a gate over the concatenated [theta_norm; context; prompt] input."""

    def __init__(
        self,
        theta_dim: int,
        context_dim: int,
        prompt_dim: int,
        num_experts: int = 6,
        expert_hidden=(48, 24),
        gate_hidden=(48,),
        k_min: int = 2,
        k_max: int | None = None,
        momentum: float = 0.97,
        eps: float = EPS,
        rng: np.random.Generator | None = None,
    ):
        self.theta_dim = theta_dim
        self.context_dim = context_dim
        self.prompt_dim = prompt_dim
        self.input_dim = theta_dim + context_dim + prompt_dim
        self.num_experts = num_experts
        self.k_min = k_min
        self.k_max = num_experts if k_max is None else k_max
        if not 1 <= self.k_min <= self.k_max <= num_experts:
            raise ValueError("need 1 <= k_min <= k_max <= num_experts")
        self.eps = eps
        rng = rng if rng is not None else np.random.default_rng(0)
        self.experts = [
            DenseNet((self.input_dim, *expert_hidden, 1), rng) for _ in range(num_experts)
        ]
        self.gate = DenseNet((self.input_dim, *gate_hidden, num_experts), rng)
        self.uncertainty_ema = RunningEMA(momentum)

    # ------------------------------------------------------------------ #
    # forward passes

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected input dim {self.input_dim}, got {x.shape[-1]}")
        return x

    def _raw(self, X: np.ndarray):
        """Per-expert outputs (B, E) and gate softmax (B, E) for a batch."""
        outputs = np.column_stack([net.forward(X)[:, 0] for net in self.experts])
        logits = self.gate.forward(X)
        logits = logits - logits.max(axis=1, keepdims=True)
        pi = np.exp(logits)
        pi /= pi.sum(axis=1, keepdims=True)
        return outputs, pi

    @staticmethod
    def _topk_indices(pi_row: np.ndarray, k: int) -> np.ndarray:
        # Stable sort on -pi: equal gate weights resolve to the lower index.
        return np.argsort(-pi_row, kind="stable")[:k]

    def forward_full(self, x) -> MoEPrediction:
        x = self._check_input(x)
        outputs, pi = self._raw(x[None, :])
        y, p = outputs[0], pi[0]
        mean = float(p @ y)
        variance = float(p @ (y - mean) ** 2)
        if not (math.isfinite(mean) and math.isfinite(variance)):
            raise ValueError("surrogate produced a non-finite prediction; parameters corrupt?")
        return MoEPrediction(
            mean=mean,
            variance=variance,
            per_expert=y,
            gate_weights=p,
            active_set=np.arange(self.num_experts),
        )

    def forward_topk(self, x, k: int) -> MoEPrediction:
        if not 1 <= k <= self.num_experts:
            raise ValueError(f"k must lie in [1, {self.num_experts}]")
        if k == self.num_experts:
            return self.forward_full(x)
        x = self._check_input(x)
        outputs, pi = self._raw(x[None, :])
        y, p = outputs[0], pi[0]
        active = self._topk_indices(p, k)
        rho = p[active] / p[active].sum()
        mean = float(rho @ y[active])
        variance = float(rho @ (y[active] - mean) ** 2)
        if not (math.isfinite(mean) and math.isfinite(variance)):
            raise ValueError("surrogate produced a non-finite prediction; parameters corrupt?")
        weights = np.zeros(self.num_experts)
        weights[active] = rho
        return MoEPrediction(
            mean=mean,
            variance=variance,
            per_expert=y,
            gate_weights=weights,
            active_set=active,
        )

    def forward_topk_batch(self, X, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Means and variances for a batch of inputs; used for candidate scoring."""
        if not 1 <= k <= self.num_experts:
            raise ValueError(f"k must lie in [1, {self.num_experts}]")
        X = np.atleast_2d(self._check_input(X))
        outputs, pi = self._raw(X)
        if k == self.num_experts:
            means = np.einsum("be,be->b", pi, outputs)
            variances = np.einsum("be,be->b", pi, (outputs - means[:, None]) ** 2)
            return means, variances
        means = np.empty(len(X))
        variances = np.empty(len(X))
        for row in range(len(X)):
            active = self._topk_indices(pi[row], k)
            rho = pi[row, active] / pi[row, active].sum()
            means[row] = rho @ outputs[row, active]
            variances[row] = rho @ (outputs[row, active] - means[row]) ** 2
        return means, variances

    # ------------------------------------------------------------------ #
    # adaptive expert count

    def active_expert_count(self, variance: float, novelty: float, mix: float = 0.55,
                            update_stats: bool = True) -> int:
        """Blend normalized uncertainty with novelty and map into [k_min, k_max]."""
        u_tilde = float(logistic(self.uncertainty_ema.z(variance, self.eps)))
        eta = mix * u_tilde + (1.0 - mix) * float(novelty)
        if update_stats:
            self.uncertainty_ema.update(variance)
        return expert_count_from_mix(eta, self.k_min, self.k_max)

    def commit_uncertainty(self, variance: float) -> None:
        self.uncertainty_ema.update(variance)

    # ------------------------------------------------------------------ #
    # gradients

    def _gate_upstream(self, y: np.ndarray, pi: np.ndarray, active: np.ndarray | None):
        """d(mean)/d(gate logits) rows plus the expert mixing weights rho.

        Full ensemble: d mean / d g_i = pi_i (y_i - mean).
        Top-k with renormalization S = sum_A pi: d mean / d g_i is
        pi_i (y_i - mean) / S on the active set and exactly zero elsewhere
        (the off-set terms cancel because sum_A rho_j (y_j - mean) = 0).
        """
        B, E = y.shape
        rho = np.zeros_like(pi)
        if active is None:
            rho[:] = pi
            mean = np.einsum("be,be->b", pi, y)
            gbar = pi * (y - mean[:, None])
        else:
            gbar = np.zeros_like(pi)
            s = pi[:, active].sum(axis=1)
            rho[:, active] = pi[:, active] / s[:, None]
            mean = np.einsum("be,be->b", rho, y)
            gbar[:, active] = pi[:, active] * (y[:, active] - mean[:, None]) / s[:, None]
        return rho, gbar, mean

    def _forward_cached(self, X: np.ndarray):
        expert_caches = []
        outputs = []
        for net in self.experts:
            cache: list = []
            outputs.append(net.forward(X, cache)[:, 0])
            expert_caches.append(cache)
        gate_cache: list = []
        logits = self.gate.forward(X, gate_cache)
        logits = logits - logits.max(axis=1, keepdims=True)
        pi = np.exp(logits)
        pi /= pi.sum(axis=1, keepdims=True)
        return np.column_stack(outputs), pi, expert_caches, gate_cache

    def grad_input(self, x, active=None) -> np.ndarray:
        """Exact gradient of the (optionally top-k renormalized) mean wrt the input."""
        x = self._check_input(x)
        X = x[None, :]
        y, pi, expert_caches, gate_cache = self._forward_cached(X)
        active_idx = None if active is None else np.asarray(active, dtype=int)
        rho, gbar, _ = self._gate_upstream(y, pi, active_idx)
        grad = np.zeros(self.input_dim)
        live = range(self.num_experts) if active_idx is None else active_idx
        for e in live:
            if rho[0, e] == 0.0:
                continue
            gx, _ = self.experts[e].backward(expert_caches[e], np.array([[rho[0, e]]]))
            grad += gx[0]
        gx_gate, _ = self.gate.backward(gate_cache, gbar)
        grad += gx_gate[0]
        return grad

    def grad_params(self, X, loss_grad, active=None):
        """Parameter gradients of sum_b loss_grad[b] * mean_b over a batch.

        Returns (expert_grads, gate_grads) shaped like the parameters;
        experts outside ``active`` receive exactly zero gradients.
        """
        X = np.atleast_2d(self._check_input(X))
        loss_grad = np.atleast_1d(np.asarray(loss_grad, dtype=float))
        y, pi, expert_caches, gate_cache = self._forward_cached(X)
        active_idx = None if active is None else np.asarray(active, dtype=int)
        rho, gbar, _ = self._gate_upstream(y, pi, active_idx)
        expert_grads = []
        for e, net in enumerate(self.experts):
            upstream = (rho[:, e] * loss_grad)[:, None]
            if active_idx is not None and e not in active_idx:
                expert_grads.append(net.zero_grads())
                continue
            _, grads = net.backward(expert_caches[e], upstream)
            expert_grads.append(grads)
        _, gate_grads = self.gate.backward(gate_cache, gbar * loss_grad[:, None])
        return expert_grads, gate_grads

    # ------------------------------------------------------------------ #
    # parameter snapshots

    def _nets(self):
        return [*self.experts, self.gate]

    def flat_params(self) -> np.ndarray:
        chunks = []
        for net in self._nets():
            for w, b in zip(net.weights, net.biases):
                chunks.append(w.ravel())
                chunks.append(b.ravel())
        return np.concatenate(chunks)

    def shape_manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        manifest = []
        for i, net in enumerate(self._nets()):
            name = f"expert{i}" if i < self.num_experts else "gate"
            for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
                manifest.append((f"{name}.w{layer}", w.shape))
                manifest.append((f"{name}.b{layer}", b.shape))
        return manifest

    def load_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        offset = 0
        for net in self._nets():
            for layer in range(net.num_layers):
                for arr_list, idx in ((net.weights, layer), (net.biases, layer)):
                    arr = arr_list[idx]
                    n = arr.size
                    arr_list[idx] = flat[offset : offset + n].reshape(arr.shape).copy()
                    offset += n
        if offset != flat.size:
            raise ValueError(f"flat vector has {flat.size} entries, expected {offset}")

    def flatten_grads(self, expert_grads, gate_grads) -> np.ndarray:
        chunks = []
        for grads in [*expert_grads, gate_grads]:
            for dw, db in grads:
                chunks.append(dw.ravel())
                chunks.append(db.ravel())
        return np.concatenate(chunks)

    def backbone_fingerprint(self) -> bytes:
        import hashlib

        return hashlib.sha256(self.flat_params().tobytes()).digest()
