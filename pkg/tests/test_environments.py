from __future__ import annotations

import numpy as np
import pytest

from rasptuner.environments import (
    NON_ADVERSARIAL,
    SCENARIO_NAMES,
    make_domain,
    step_env,
    weighted_quadratic_box_min,
)
from rasptuner.params import ParamBounds

EXPECTED_METRIC = {
    "1_LLM_Inference": "neg_reward",
    "2_AutoML_HPO": "val_err",
    "3_Robot_ISP_Tuning": "image_quality_loss",
    "4_Wafer_Etching_Drift": "bias",
    "5_Switching_LQR": "cost",
    "6_Smooth_Quadratic": "mse",
    "7_Regime_Switch_Simple": "err",
    "8_Server_Flash_Crowd": "latency",
    "9_Real_Trace_Replay": "log_latency",
    "A1_Adversarial_Context": "loss",
}


def test_unknown_scenario_rejected():
    with pytest.raises(ValueError):
        make_domain("nope", seed=0)


def test_every_scenario_constructs_and_steps():
    for name in SCENARIO_NAMES:
        domain = make_domain(name, seed=0, horizon=50)
        state = domain.initial_state()
        theta = domain.bounds.midpoint
        metrics, context, loss, state2 = step_env(domain, state, theta)
        assert set(metrics) == {EXPECTED_METRIC[name]}
        assert context.shape == (domain.context_dim,)
        assert np.isfinite(loss)
        assert state2.t == 1


def test_adversarial_optimum_has_zero_loss():
    domain = make_domain("A1_Adversarial_Context", seed=3)
    assert float(domain.true_loss(np.full(5, 0.5), domain.latent(0))) == 0.0
    assert domain.oracle_min(domain.latent(0)) == 0.0


def test_adversarial_contexts_are_independent_draws():
    domain = make_domain("A1_Adversarial_Context", seed=4, horizon=10_000)
    series = np.array([domain.context_fn(t, None)[0] for t in range(10_000)])
    corr = np.corrcoef(series[:-1], series[1:])[0, 1]
    assert abs(corr) < 0.03


def test_adversarial_loss_ignores_context():
    domain = make_domain("A1_Adversarial_Context", seed=5)
    theta = np.full(5, 0.3)
    assert domain.true_loss(theta, domain.latent(0)) == domain.true_loss(theta, domain.latent(99))


def test_smooth_quadratic_minimizer_and_exact_metric():
    domain = make_domain("6_Smooth_Quadratic", seed=1)
    omega = domain.latent(7)
    optimum = domain.optimum_for(omega)
    assert float(domain.true_loss(optimum, omega)) == pytest.approx(0.0, abs=1e-24)
    state = domain.initial_state()
    theta = domain.bounds.midpoint
    metrics, _, loss, _ = step_env(domain, state, theta)
    assert metrics["mse"] == loss  # noise-free by construction


def test_switching_lqr_mode_flips_every_100_steps():
    domain = make_domain("5_Switching_LQR", seed=2, horizon=300)
    assert domain.latent(0) == 0
    assert domain.latent(99) == 0
    assert domain.latent(100) == 1
    assert domain.latent(200) == 0  # recurrence
    metrics, _, loss, _ = step_env(domain, domain.initial_state(), domain.bounds.midpoint)
    assert metrics["cost"] == loss  # noise-free


def test_wafer_wear_runs_zero_to_one():
    horizon = 80
    domain = make_domain("4_Wafer_Etching_Drift", seed=3, horizon=horizon)
    assert domain.latent(0) == 0.0
    assert domain.latent(horizon - 1) == 1.0
    assert domain.latent(horizon) == 1.0  # clamped past the horizon
    assert domain.context_fn(0, domain.latent(0))[0] == 0.0


def test_automl_features_redraw_every_100_steps():
    domain = make_domain("2_AutoML_HPO", seed=4, horizon=250)
    assert np.array_equal(domain.latent(0), domain.latent(99))
    assert not np.array_equal(domain.latent(99), domain.latent(100))
    omega = domain.latent(0)
    assert np.array_equal(domain.context_fn(5, omega), omega)
    optimum = domain.optimum_for(omega)
    assert np.all((optimum > 0) & (optimum < 1))
    assert float(domain.true_loss(optimum, omega)) == pytest.approx(0.0, abs=1e-20)
    assert domain.oracle_min(omega) == 0.0


def test_regime_switch_halfway():
    domain = make_domain("7_Regime_Switch_Simple", seed=5, horizon=100)
    assert domain.latent(49) == 0
    assert domain.latent(50) == 1
    ctx = domain.context_fn(4, domain.latent(4))
    assert ctx.shape == (4,)
    assert np.sum(ctx[:3]) == pytest.approx(1.0)  # one-hot distractor symbols


def test_flash_crowd_panic_windows_and_recurrence():
    domain = make_domain("8_Server_Flash_Crowd", seed=6, horizon=100)
    panic_steps = [t for t in range(100) if domain.latent(t)[0] == 1]
    assert panic_steps == list(range(30, 40)) + list(range(70, 80))
    # the sinusoidal load revisits with period 50 outside panic windows
    assert domain.latent(0) == domain.latent(50)
    mode, load = domain.latent(31)
    assert mode == 1 and -0.5 <= load <= 1.5


def test_trace_replay_cycles_and_stays_in_box():
    domain = make_domain("9_Real_Trace_Replay", seed=7, horizon=2100)
    assert domain.latent(5) == 5
    assert domain.latent(2005) == 5  # cyclic replay
    assert np.all(domain.trace >= domain.bounds.lower)
    assert np.all(domain.trace <= domain.bounds.upper)
    omega = domain.latent(12)
    target = domain.target_for(omega)
    assert domain.oracle_min(omega) == pytest.approx(
        float(domain.true_loss(domain.bounds.clip(target), omega)), abs=1e-24
    )


def test_llm_inference_cluster_schedule_returns_to_first():
    domain = make_domain("1_LLM_Inference", seed=8, horizon=100)
    schedule = domain.build_sequence(100)
    assert schedule[:25] == [0] * 25
    assert schedule[25:50] == [1] * 25
    assert schedule[50:75] == [2] * 25
    assert schedule[75:] == [0] * 25  # last quarter revisits the first cluster
    assert domain.context_dim == 768


def test_robot_isp_segments_revisit_day():
    domain = make_domain("3_Robot_ISP_Tuning", seed=9, horizon=100)
    assert domain.latent(0) == 0      # day
    assert domain.latent(25) == 1     # tunnel
    assert domain.latent(45) == 0     # day again
    assert domain.latent(65) == 2     # fog
    assert domain.latent(85) == 3     # night


def test_regret_non_negative_fuzz_all_scenarios():
    rng = np.random.default_rng(10)
    for name in SCENARIO_NAMES:
        domain = make_domain(name, seed=11, horizon=200)
        for t in rng.integers(0, 200, size=25):
            omega = domain.latent(int(t))
            oracle = domain.oracle_min(omega)
            thetas = rng.uniform(domain.bounds.lower, domain.bounds.upper,
                                 size=(400, domain.bounds.dim))
            losses = np.asarray(domain.true_loss(thetas, omega))
            assert np.all(losses - oracle >= -1e-12), name


def test_noise_free_metrics_where_required():
    assert make_domain("5_Switching_LQR", seed=0).noise_sigma == 0.0
    assert make_domain("6_Smooth_Quadratic", seed=0).noise_sigma == 0.0
    for name in SCENARIO_NAMES:
        if name in ("5_Switching_LQR", "6_Smooth_Quadratic"):
            continue
        assert make_domain(name, seed=0).noise_sigma > 0.0, name


def test_determinism_of_contexts_and_metrics():
    for name in ("1_LLM_Inference", "8_Server_Flash_Crowd", "A1_Adversarial_Context"):
        a = make_domain(name, seed=12, horizon=50)
        b = make_domain(name, seed=12, horizon=50)
        theta = a.bounds.midpoint
        # query b out of order first: results must depend on (seed, t) only
        b.metric_fn(theta, 7, b.latent(7))
        for t in (0, 3, 7):
            omega = a.latent(t)
            assert np.array_equal(a.context_fn(t, omega), b.context_fn(t, b.latent(t)))
            assert a.metric_fn(theta, t, omega) == b.metric_fn(theta, t, b.latent(t))
        c = make_domain(name, seed=13, horizon=50)
        assert a.metric_fn(theta, 0, a.latent(0)) != c.metric_fn(theta, 0, c.latent(0))


def test_step_env_rejects_out_of_box_theta():
    domain = make_domain("5_Switching_LQR", seed=14)
    with pytest.raises(ValueError):
        step_env(domain, domain.initial_state(), domain.bounds.upper + 1.0)


def test_boxed_quadratic_oracle_matches_grid_search():
    bounds = ParamBounds(np.array([-1.0, 0.0]), np.array([1.0, 2.0]))
    rng = np.random.default_rng(15)
    grid_axes = [np.linspace(lo, hi, 401) for lo, hi in zip(bounds.lower, bounds.upper)]
    mesh = np.stack(np.meshgrid(*grid_axes, indexing="ij"), axis=-1).reshape(-1, 2)
    for _ in range(20):
        weights = rng.uniform(0.2, 3.0, size=2)
        target = rng.uniform(-3.0, 5.0, size=2)  # frequently outside the box
        losses = np.sum(weights * (mesh - target) ** 2, axis=1)
        exact = weighted_quadratic_box_min(weights, target, bounds)
        grid_min = float(losses.min())
        assert exact <= grid_min + 1e-9
        assert grid_min - exact <= 1e-3  # grid resolution slack


def test_interior_targets_give_zero_oracle():
    for name in NON_ADVERSARIAL:
        domain = make_domain(name, seed=16, horizon=120)
        if name == "6_Smooth_Quadratic":
            continue  # optimum may exit the box by construction
        for t in (0, 40, 110):
            assert domain.oracle_min(domain.latent(t)) == pytest.approx(0.0, abs=1e-20), name


def test_constants_dump_is_json_serializable():
    import json

    for name in SCENARIO_NAMES:
        domain = make_domain(name, seed=17)
        text = json.dumps(domain.constants())
        assert domain.name in text


def test_loss_broadcasting_matches_scalar_calls():
    rng = np.random.default_rng(18)
    for name in SCENARIO_NAMES:
        domain = make_domain(name, seed=19)
        omega = domain.latent(3)
        thetas = rng.uniform(domain.bounds.lower, domain.bounds.upper, size=(6, domain.bounds.dim))
        batch = np.asarray(domain.true_loss(thetas, omega))
        for i in range(6):
            assert batch[i] == pytest.approx(float(domain.true_loss(thetas[i], omega)), rel=1e-12)
