from __future__ import annotations

import numpy as np
import pytest

from rasptuner.surrogate import DenseNet, MoESurrogate, expert_count_from_mix


def make_moe(theta_dim=3, context_dim=2, prompt_dim=4, num_experts=3,
             expert_hidden=(8, 6), gate_hidden=(8,), seed=0, **kwargs):
    return MoESurrogate(
        theta_dim=theta_dim,
        context_dim=context_dim,
        prompt_dim=prompt_dim,
        num_experts=num_experts,
        expert_hidden=expert_hidden,
        gate_hidden=gate_hidden,
        rng=np.random.default_rng(seed),
        **kwargs,
    )


def zero_out(moe, expert_biases=None, gate_bias=None):
    """Zero every parameter; optionally pin constant expert outputs / gate logits."""
    for net in [*moe.experts, moe.gate]:
        for w in net.weights:
            w[:] = 0.0
        for b in net.biases:
            b[:] = 0.0
    if expert_biases is not None:
        for net, value in zip(moe.experts, expert_biases):
            net.biases[-1][:] = value
    if gate_bias is not None:
        moe.gate.biases[-1][:] = gate_bias


def test_identical_expert_outputs_collapse_variance():
    moe = make_moe()
    zero_out(moe, expert_biases=[1.7, 1.7, 1.7])
    pred = moe.forward_full(np.zeros(moe.input_dim))
    assert pred.mean == pytest.approx(1.7)
    assert pred.variance == pytest.approx(0.0, abs=1e-15)
    assert np.allclose(pred.gate_weights, 1.0 / 3.0)


def test_two_expert_disagreement_variance():
    moe = make_moe(num_experts=2)
    zero_out(moe, expert_biases=[0.0, 1.0])
    pred = moe.forward_full(np.zeros(moe.input_dim))
    assert pred.mean == pytest.approx(0.5)
    assert pred.variance == pytest.approx(0.25)


def test_one_hot_gate_selects_single_expert():
    moe = make_moe()
    zero_out(moe, expert_biases=[0.2, 0.8, -0.4], gate_bias=np.array([0.0, 60.0, 0.0]))
    pred = moe.forward_full(np.zeros(moe.input_dim))
    assert pred.mean == pytest.approx(0.8, abs=1e-12)
    assert pred.variance == pytest.approx(0.0, abs=1e-12)


def test_topk_full_is_bitwise_forward_full():
    moe = make_moe(seed=3)
    rng = np.random.default_rng(1)
    for _ in range(10):
        x = rng.normal(size=moe.input_dim)
        full = moe.forward_full(x)
        topk = moe.forward_topk(x, moe.num_experts)
        assert topk.mean == full.mean
        assert topk.variance == full.variance
        assert np.array_equal(topk.gate_weights, full.gate_weights)


def test_top1_variance_is_zero():
    moe = make_moe(seed=5)
    rng = np.random.default_rng(2)
    for _ in range(10):
        pred = moe.forward_topk(rng.normal(size=moe.input_dim), 1)
        assert pred.variance == 0.0
        assert len(pred.active_set) == 1


def test_topk_renormalization_hand_case():
    moe = make_moe()
    logits = np.log(np.array([0.5, 0.3, 0.2]))
    zero_out(moe, expert_biases=[1.0, 0.0, 7.0], gate_bias=logits)
    pred = moe.forward_topk(np.zeros(moe.input_dim), 2)
    assert np.array_equal(np.sort(pred.active_set), np.array([0, 1]))
    assert pred.gate_weights[0] == pytest.approx(0.625)
    assert pred.gate_weights[1] == pytest.approx(0.375)
    assert pred.gate_weights[2] == 0.0
    assert pred.mean == pytest.approx(0.625)


def test_topk_tie_breaks_to_lower_index():
    moe = make_moe()
    zero_out(moe, expert_biases=[0.1, 0.2, 0.3])  # uniform gate: full tie
    pred = moe.forward_topk(np.zeros(moe.input_dim), 2)
    assert np.array_equal(pred.active_set, np.array([0, 1]))


def test_topk_batch_matches_single():
    moe = make_moe(seed=11)
    rng = np.random.default_rng(4)
    X = rng.normal(size=(7, moe.input_dim))
    for k in (1, 2, moe.num_experts):
        means, variances = moe.forward_topk_batch(X, k)
        for i, x in enumerate(X):
            pred = moe.forward_topk(x, k)
            assert means[i] == pytest.approx(pred.mean, rel=1e-12)
            assert variances[i] == pytest.approx(pred.variance, rel=1e-12, abs=1e-15)


def test_k_out_of_range_rejected():
    moe = make_moe()
    with pytest.raises(ValueError):
        moe.forward_topk(np.zeros(moe.input_dim), 0)
    with pytest.raises(ValueError):
        moe.forward_topk(np.zeros(moe.input_dim), moe.num_experts + 1)


def test_variance_matches_two_pass_computation_fuzz():
    moe = make_moe(seed=13)
    rng = np.random.default_rng(6)
    for _ in range(50):
        x = rng.normal(size=moe.input_dim)
        pred = moe.forward_full(x)
        direct = float(np.sum(pred.gate_weights * (pred.per_expert - pred.mean) ** 2))
        assert pred.variance == pytest.approx(direct, rel=1e-10, abs=1e-14)
        assert pred.variance >= 0.0
        assert pred.gate_weights.sum() == pytest.approx(1.0)


def test_expert_count_formula():
    assert expert_count_from_mix(0.0, 2, 6) == 2
    assert expert_count_from_mix(1.0, 2, 6) == 6
    assert expert_count_from_mix(0.5, 2, 6) == 4


def test_active_expert_count_updates_ema():
    moe = make_moe(num_experts=6, k_min=2)
    # Fresh EMA stats (0, 1): variance 0 standardizes to 0, logistic gives 0.5.
    k = moe.active_expert_count(variance=0.0, novelty=1.0)
    # eta = 0.55 * 0.5 + 0.45 * 1.0 = 0.725 -> round(2 + 4 * 0.725) = 5
    assert k == 5
    assert moe.uncertainty_ema.update_count == 1
    k2 = moe.active_expert_count(variance=0.0, novelty=0.0, update_stats=False)
    assert moe.uncertainty_ema.update_count == 1
    assert 2 <= k2 <= 6


def test_nan_parameters_raise():
    moe = make_moe()
    moe.experts[0].weights[0][0, 0] = np.nan
    with pytest.raises(ValueError):
        moe.forward_full(np.zeros(moe.input_dim))


# --------------------------------------------------------------------- #
# gradients


def fd_grad_input(moe, x, k, h=1e-5):
    grad = np.zeros_like(x)
    for i in range(x.size):
        hi = x.copy()
        lo = x.copy()
        hi[i] += h
        lo[i] -= h
        grad[i] = (moe.forward_topk(hi, k).mean - moe.forward_topk(lo, k).mean) / (2 * h)
    return grad


def test_constant_network_has_zero_gradient():
    moe = make_moe()
    zero_out(moe, expert_biases=[0.4, 0.4, 0.4])
    grad = moe.grad_input(np.zeros(moe.input_dim))
    assert np.allclose(grad, 0.0)


def test_linear_experts_uniform_gate_gradient_is_average_row():
    moe = make_moe(expert_hidden=(), gate_hidden=())
    zero_out(moe)
    rng = np.random.default_rng(8)
    for net in moe.experts:
        net.weights[0][:] = rng.normal(size=net.weights[0].shape)
    x = rng.normal(size=moe.input_dim)
    grad = moe.grad_input(x)
    expected = np.mean([net.weights[0][0] for net in moe.experts], axis=0)
    assert np.allclose(grad, expected, rtol=1e-12)


def test_grad_input_matches_finite_differences_full():
    rng = np.random.default_rng(15)
    for trial in range(12):
        moe = make_moe(theta_dim=2 + trial % 3, context_dim=1 + trial % 2,
                       prompt_dim=3, num_experts=2 + trial % 3, seed=100 + trial)
        x = rng.normal(size=moe.input_dim)
        analytic = moe.grad_input(x)
        numeric = fd_grad_input(moe, x, moe.num_experts)
        denom = max(float(np.linalg.norm(numeric)), 1e-12)
        assert np.linalg.norm(analytic - numeric) / denom < 1e-4


def test_grad_input_matches_finite_differences_topk():
    # Bias the gate so top-k membership is stable under the probe step.
    rng = np.random.default_rng(16)
    for trial in range(10):
        moe = make_moe(num_experts=4, seed=200 + trial)
        moe.gate.biases[-1][:] = np.array([3.0, 1.5, -1.5, -3.0])
        x = 0.1 * rng.normal(size=moe.input_dim)
        k = 2
        pred = moe.forward_topk(x, k)
        analytic = moe.grad_input(x, active=pred.active_set)
        numeric = fd_grad_input(moe, x, k)
        denom = max(float(np.linalg.norm(numeric)), 1e-12)
        assert np.linalg.norm(analytic - numeric) / denom < 1e-4


def test_grad_params_matches_finite_differences():
    rng = np.random.default_rng(17)
    moe = make_moe(seed=300)
    x = rng.normal(size=moe.input_dim)
    loss_grad = 1.37  # d(loss)/d(mean)
    expert_grads, gate_grads = moe.grad_params(x, loss_grad)
    h = 1e-6
    nets = [*moe.experts, moe.gate]
    grads = [*expert_grads, gate_grads]
    for _ in range(10):
        net_idx = int(rng.integers(len(nets)))
        net, net_grads = nets[net_idx], grads[net_idx]
        layer = int(rng.integers(net.num_layers))
        w = net.weights[layer]
        i, j = int(rng.integers(w.shape[0])), int(rng.integers(w.shape[1]))
        original = w[i, j]
        w[i, j] = original + h
        up = moe.forward_full(x).mean
        w[i, j] = original - h
        down = moe.forward_full(x).mean
        w[i, j] = original
        numeric = loss_grad * (up - down) / (2 * h)
        assert net_grads[layer][0][i, j] == pytest.approx(numeric, rel=1e-4, abs=1e-9)


def test_grad_params_zero_loss_grad_gives_zeros():
    moe = make_moe(seed=21)
    expert_grads, gate_grads = moe.grad_params(np.ones(moe.input_dim), 0.0)
    for grads in [*expert_grads, gate_grads]:
        for dw, db in grads:
            assert not dw.any() and not db.any()


def test_masked_expert_receives_zero_gradient():
    moe = make_moe(seed=23)
    x = np.ones(moe.input_dim)
    pred = moe.forward_topk(x, 2)
    expert_grads, _ = moe.grad_params(x, 1.0, active=pred.active_set)
    inactive = set(range(moe.num_experts)) - set(int(i) for i in pred.active_set)
    assert inactive
    for e in inactive:
        for dw, db in expert_grads[e]:
            assert not dw.any() and not db.any()


def test_flat_roundtrip_and_manifest():
    moe = make_moe(seed=29)
    flat = moe.flat_params()
    manifest = moe.shape_manifest()
    assert flat.size == sum(int(np.prod(shape)) for _, shape in manifest)
    before = moe.forward_full(np.ones(moe.input_dim)).mean
    moe.load_flat(flat * 1.0)
    assert moe.forward_full(np.ones(moe.input_dim)).mean == before
    with pytest.raises(ValueError):
        moe.load_flat(flat[:-1])


def test_dense_net_batch_forward_matches_single():
    rng = np.random.default_rng(31)
    net = DenseNet((4, 6, 2), rng)
    X = rng.normal(size=(5, 4))
    batch = net.forward(X)
    for i in range(5):
        assert np.allclose(batch[i], net.forward(X[i : i + 1])[0])
