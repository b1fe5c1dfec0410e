import numpy as np
import pytest

from scmppi.barriers import (
    RELAXED,
    BarrierConfig,
    ObstacleField,
    SafetyConstraint,
    embed,
    embedded_rollout,
)
from scmppi.errors import DegenerateBatchError, InvalidStateError
from scmppi.kernels import available_backends, get_backend
from scmppi.models import DUBINS, make_model
from scmppi.mppi import (
    COST_CAP,
    MPPIController,
    PathCostParams,
    SamplerConfig,
    compute_weights,
    mppi_step,
    path_cost,
    sample_noise,
    shift_controls,
    update_controls,
)


def dubins_setup(n_samples=64, horizon=25, seed=0, with_obstacles=True, lam=0.05):
    model = make_model(DUBINS)
    constraints = (
        (SafetyConstraint.sphere([1.0, 0.05], 0.3, 0.2),) if with_obstacles else ()
    )
    fld = ObstacleField(constraints)
    bcfg = BarrierConfig(kind=RELAXED, gamma=0.5, delta=1e-2)
    params = PathCostParams(
        goal=np.array([2.0, 0.0, 0.0]),
        q_diag=np.array([0.2, 0.2, 0.2]),
        r_diag=np.array([5e-4, 5e-4]),
        phi_diag=np.array([5.0, 5.0, 0.1]),
        q_beta=1e-3,
        rfb_diag=np.array([5e-3, 5e-3]),
    )
    cfg = SamplerConfig(
        n_samples=n_samples, horizon=horizon, lam=lam,
        sigma=np.array([0.3, 0.3]), alpha=0.0, seed=seed,
    )
    return model, fld, bcfg, params, cfg


def test_sample_noise_zero_sigma_short_circuit():
    cfg = SamplerConfig(n_samples=4, horizon=3, lam=1.0, sigma=np.zeros(2))
    noise = sample_noise(cfg, 0)
    assert noise.shape == (4, 3, 2)
    assert np.all(noise == 0.0)


def test_sample_noise_empirical_variance():
    cfg = SamplerConfig(
        n_samples=100_000, horizon=1, lam=1.0, sigma=np.array([0.5, 2.0, 9.0]), seed=21
    )
    noise = sample_noise(cfg, 0)
    var = np.var(noise[:, 0, :], axis=0)
    np.testing.assert_allclose(var, cfg.sigma, rtol=0.03)
    mean = np.mean(noise[:, 0, :], axis=0)
    np.testing.assert_allclose(mean, 0.0, atol=3 * np.sqrt(9.0 / 100_000))


def test_sample_noise_deterministic_and_round_separated():
    cfg = SamplerConfig(n_samples=8, horizon=5, lam=1.0, sigma=np.array([1.0, 4.0]), seed=5)
    a = sample_noise(cfg, 3)
    b = sample_noise(cfg, 3)
    c = sample_noise(cfg, 4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_compute_weights_uniform_and_closed_form():
    w = compute_weights(np.array([7.0, 7.0, 7.0, 7.0]), lam=0.3)
    np.testing.assert_allclose(w, 0.25)
    lam = 0.7
    w = compute_weights(np.array([0.0, lam * np.log(2.0)]), lam=lam)
    np.testing.assert_allclose(w, [2.0 / 3.0, 1.0 / 3.0], atol=1e-14)


def test_compute_weights_cap_underflow_and_degenerate():
    w = compute_weights(np.array([COST_CAP, 0.0]), lam=1.0)
    assert w[0] < 1e-30
    assert w[1] == pytest.approx(1.0)
    with pytest.raises(DegenerateBatchError):
        compute_weights(np.array([COST_CAP, COST_CAP]), lam=1.0)
    with pytest.raises(DegenerateBatchError):
        compute_weights(np.array([COST_CAP + 5.0]), lam=1.0)


def test_compute_weights_baseline_invariance_and_monotonicity():
    rng = np.random.default_rng(2)
    costs = rng.uniform(0.0, 50.0, size=40)
    w1 = compute_weights(costs, lam=2.0)
    w2 = compute_weights(costs + 123.456, lam=2.0)
    np.testing.assert_allclose(w1, w2, atol=1e-12)
    assert abs(w1.sum() - 1.0) < 1e-9
    order = np.argsort(costs)
    assert np.all(np.diff(w1[order]) <= 1e-15)


def test_update_controls_oracle():
    rng = np.random.default_rng(3)
    nominal = rng.standard_normal((6, 2))
    noise = rng.standard_normal((3, 6, 2))
    weights = np.array([0.2, 0.5, 0.3])
    out = update_controls(nominal, noise, weights)
    brute = np.zeros_like(nominal)
    for n in range(3):
        brute += weights[n] * (nominal + noise[n])
    np.testing.assert_allclose(out, brute, atol=1e-12)
    # all weight on one sample
    w = np.array([0.0, 1.0, 0.0])
    np.testing.assert_allclose(
        update_controls(nominal, noise, w), nominal + noise[1], atol=1e-15
    )
    # zero noise is a fixed point
    np.testing.assert_allclose(
        update_controls(nominal, np.zeros_like(noise), weights), nominal, atol=1e-15
    )


def test_path_cost_pinned_at_goal_is_zero():
    model, fld, bcfg, params, cfg = dubins_setup(with_obstacles=False)
    horizon = cfg.horizon
    states = np.tile(np.append(params.goal, 0.0), (horizon + 1, 1))
    controls = np.zeros((horizon, 2))
    noise = np.zeros((horizon, 2))
    cost, safe = path_cost(states, controls, noise, params, cfg, fld)
    assert cost == 0.0
    assert safe


def test_path_cost_unsafe_is_exact_cap():
    model, fld, bcfg, params, cfg = dubins_setup()
    x0 = embed(np.array([0.0, 0.05, 0.0]), fld, bcfg)
    controls = np.tile([10.0, 0.0], (cfg.horizon, 1))
    states = embedded_rollout(x0, controls, model, fld, bcfg)
    cost, safe = path_cost(states, controls, np.zeros_like(controls), params, cfg, fld)
    assert cost == COST_CAP
    assert not safe


def test_path_cost_two_step_hand_oracle():
    model, fld, bcfg, params, cfg = dubins_setup(with_obstacles=False)
    cfg = SamplerConfig(n_samples=1, horizon=2, lam=0.4, sigma=np.array([0.5, 0.5]), alpha=0.25)
    states = np.array(
        [
            [0.0, 0.0, 0.0, 0.0],
            [1.0, -1.0, 0.5, 2.0],
            [2.0, 0.5, -0.5, 1.0],
        ]
    )
    controls = np.array([[1.0, 0.2], [0.5, -0.3]])
    noise = np.array([[0.1, -0.2], [0.3, 0.4]])
    g = params.goal
    q, phi = params.q_diag, params.phi_diag
    stage = sum(q[j] * (states[1, j] - g[j]) ** 2 for j in range(3)) + params.q_beta * 4.0
    r_sig = params.r_diag / cfg.sigma
    ctrl = 0.5 * cfg.lam * (1 - cfg.alpha) * sum(
        (controls[1, j] + 2 * noise[1, j]) * r_sig[j] * controls[1, j] for j in range(2)
    )
    term = sum(phi[j] * (states[2, j] - g[j]) ** 2 for j in range(3)) + params.phi_beta * 1.0
    cost, safe = path_cost(states, controls, noise, params, cfg, fld)
    assert safe
    assert cost == pytest.approx(stage + ctrl + term, rel=1e-12)


@pytest.mark.parametrize("backend_name", available_backends())
def test_path_cost_matches_kernel_per_sample(backend_name):
    from scmppi.mppi import _rollout_samples

    model, fld, bcfg, params, cfg = dubins_setup(n_samples=6, horizon=15)
    x0 = np.array([0.0, -0.4, 0.2])
    nominal = np.tile([1.2, 0.1], (cfg.horizon, 1))
    noise = sample_noise(cfg, 0)
    gains = np.zeros((cfg.horizon, 2))
    costs, _, _, _, _ = _rollout_samples(
        x0, nominal, noise, gains, 0.0, model, fld, bcfg, params, cfg,
        get_backend(backend_name),
    )
    for i in range(cfg.n_samples):
        applied = np.clip(nominal + noise[i], model.limits.lo, model.limits.hi)
        traj = embedded_rollout(embed(x0, fld, bcfg), applied, model, fld, bcfg)
        expect, _ = path_cost(traj, nominal, noise[i], params, cfg, fld)
        assert costs[i] == pytest.approx(expect, rel=1e-9, abs=1e-8)


def test_mppi_step_improves_cost_without_obstacles():
    improved = 0
    for seed in range(20):
        model, fld, bcfg, params, cfg = dubins_setup(
            n_samples=128, horizon=20, seed=seed, with_obstacles=False
        )
        x0 = np.array([0.0, 0.0, 0.0])
        nominal = np.zeros((cfg.horizon, 2))

        def nominal_cost(U):
            traj = embedded_rollout(embed(x0, fld, bcfg), U.copy(), model, fld, bcfg)
            c, _ = path_cost(traj, U, np.zeros_like(U), params, cfg, fld)
            return c

        before = nominal_cost(nominal)
        out, batch, diag = mppi_step(x0, nominal, model, fld, bcfg, params, cfg, iterations=3)
        if nominal_cost(out) <= before:
            improved += 1
    assert improved >= 18  # >= 90% of seeds


def test_mppi_step_single_zero_noise_sample_is_identity():
    model, fld, bcfg, params, _ = dubins_setup()
    cfg = SamplerConfig(n_samples=1, horizon=10, lam=0.5, sigma=np.zeros(2))
    nominal = np.tile([0.7, -0.05], (10, 1))
    out, batch, diag = mppi_step(
        np.array([0.0, 0.6, 0.0]), nominal, model, fld, bcfg, params, cfg
    )
    np.testing.assert_array_equal(out, nominal)
    assert batch.weights[0] == 1.0


def test_mppi_step_degenerate_batch_keeps_reference():
    model, fld, bcfg, params, cfg = dubins_setup(n_samples=8, horizon=12)
    # start boxed next to the obstacle aiming straight in, tiny noise: every
    # sample collides
    cfg = SamplerConfig(n_samples=8, horizon=12, lam=cfg.lam, sigma=np.array([1e-8, 1e-8]))
    x0 = np.array([0.62, 0.05, 0.0])
    nominal = np.tile([10.0, 0.0], (12, 1))
    out, batch, diag = mppi_step(x0, nominal, model, fld, bcfg, params, cfg)
    np.testing.assert_array_equal(out, nominal)
    assert batch.degenerate
    assert diag.degenerate_rounds == 1
    assert np.all(batch.weights == 0.0)
    assert np.all(batch.safe_steps < 12)


def test_sample_batch_bookkeeping():
    model, fld, bcfg, params, cfg = dubins_setup(n_samples=64, horizon=20)
    x0 = np.array([0.3, 0.2, 0.0])
    nominal = np.tile([1.5, 0.0], (cfg.horizon, 1))
    out, batch, diag = mppi_step(x0, nominal, model, fld, bcfg, params, cfg)
    assert batch.noise.shape == (64, 20, 2)
    assert abs(batch.weights.sum() - 1.0) < 1e-9
    assert np.all(batch.safe_steps[batch.safe] == 20)
    assert np.all(batch.costs[~batch.safe] == COST_CAP)
    assert 0.0 <= batch.safe_rate <= 1.0
    assert diag.eta > 0.0
    # capped samples get negligible weight whenever any sample is safe
    if batch.safe.any() and (~batch.safe).any():
        assert batch.weights[~batch.safe].max() < 1e-12


def test_shift_controls():
    u = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(
        shift_controls(u), [[3.0, 4.0], [5.0, 6.0], [5.0, 6.0]]
    )


def test_controller_plan_and_advance():
    model, fld, bcfg, params, cfg = dubins_setup(n_samples=32, horizon=15)
    ctrl = MPPIController(
        model=model, fld=fld, barrier_cfg=bcfg, params=params, cfg=cfg, iterations=2
    )
    u0, batch, diag = ctrl.plan(np.array([0.0, 0.0, 0.0]))
    assert u0.shape == (2,)
    before = ctrl.nominal.copy()
    ctrl.advance()
    np.testing.assert_array_equal(ctrl.nominal[:-1], before[1:])
    # successive plans consume fresh noise rounds
    u1, batch2, _ = ctrl.plan(np.array([0.01, 0.0, 0.0]))
    assert not np.array_equal(batch.noise, batch2.noise)


def test_sampler_config_validation():
    with pytest.raises(InvalidStateError):
        SamplerConfig(n_samples=0, horizon=5, lam=1.0, sigma=np.ones(2))
    with pytest.raises(InvalidStateError):
        SamplerConfig(n_samples=5, horizon=5, lam=0.0, sigma=np.ones(2))
    with pytest.raises(InvalidStateError):
        SamplerConfig(n_samples=5, horizon=5, lam=1.0, sigma=np.ones(2), alpha=1.5)
    with pytest.raises(InvalidStateError):
        SamplerConfig(n_samples=5, horizon=5, lam=1.0, sigma=-np.ones(2))
    with pytest.raises(InvalidStateError):
        PathCostParams(
            goal=np.zeros(3), q_diag=np.zeros(2), r_diag=np.ones(2), phi_diag=np.zeros(3)
        )
