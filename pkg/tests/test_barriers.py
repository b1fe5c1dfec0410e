import numpy as np
import pytest

from scmppi.barriers import (
    INVERSE,
    RELAXED,
    BarrierConfig,
    ObstacleField,
    SafetyConstraint,
    barrier,
    barrier_state,
    dbas_step,
    embed,
    embedded_rollout,
    embedded_step,
    is_safe_state,
    is_safe_trajectory,
    split,
)
from scmppi.errors import InvalidStateError, UnsafeEvaluationError
from scmppi.models import DUBINS, MULTIROTOR, make_model


def test_sphere_margin_hand_value():
    c = SafetyConstraint.sphere([1.0, 1.0], radius=2.0, vehicle_radius=0.2)
    # (3^2 + 4^2) - 4 - 0.04
    assert c.margin(np.array([4.0, 5.0])) == pytest.approx(20.96)


def test_ellipsoid_margin_hand_value():
    c = SafetyConstraint.ellipsoid([1.0, 0.0, -1.0], [2.0, 1.0, 0.5], vehicle_radius=0.3)
    p = np.array([2.0, 1.0, 0.0])
    expect = (1.0 / 4.0) + 1.0 + (1.0 / 0.25) - 1.0 - 0.09 / 0.25
    assert c.margin(p) == pytest.approx(expect)


def test_sphere_and_equal_axis_ellipsoid_share_zero_set():
    rng = np.random.default_rng(0)
    sph = SafetyConstraint.sphere([0.5, -0.5, 1.0], radius=1.5, vehicle_radius=0.2)
    ell = SafetyConstraint.ellipsoid([0.5, -0.5, 1.0], [1.5, 1.5, 1.5], vehicle_radius=0.2)
    pts = rng.uniform(-3, 3, size=(200, 3))
    hs = sph.margin_batch(pts)
    he = ell.margin_batch(pts)
    assert np.all(np.sign(hs) == np.sign(he))


def test_inverse_barrier_values_and_pole():
    cfg = BarrierConfig(kind=INVERSE)
    assert barrier(2.0, cfg) == pytest.approx(0.5)
    with pytest.raises(UnsafeEvaluationError):
        barrier(0.0, cfg)
    with pytest.raises(UnsafeEvaluationError):
        barrier(-1.0, cfg)


def test_relaxed_barrier_matches_inverse_above_knot():
    cfg = BarrierConfig(kind=RELAXED, delta=0.05)
    h = np.array([0.05, 0.1, 1.0, 37.0])
    np.testing.assert_allclose(barrier(h, cfg), 1.0 / h)


def test_relaxed_barrier_c1_at_knot():
    delta = 0.02
    cfg = BarrierConfig(kind=RELAXED, delta=delta)
    # value continuity
    eps = 1e-9
    assert barrier(delta - eps, cfg) == pytest.approx(1.0 / delta, rel=1e-6)
    # slope continuity: below the knot the extrapolation has slope -1/delta^2
    fd = (barrier(delta + eps, cfg) - barrier(delta - eps, cfg)) / (2 * eps)
    assert fd == pytest.approx(-1.0 / delta**2, rel=1e-4)
    # linear branch hand value
    assert barrier(delta / 2, cfg) == pytest.approx((2 * delta - delta / 2) / delta**2)
    # defined (finite) arbitrarily deep in the unsafe region
    assert np.isfinite(barrier(-50.0, cfg))


def test_barrier_state_sums_constraints():
    field = ObstacleField(
        (
            SafetyConstraint.sphere([0.0, 0.0], 1.0, 0.0),
            SafetyConstraint.sphere([5.0, 0.0], 1.0, 0.0),
        )
    )
    cfg = BarrierConfig(kind=INVERSE)
    s = np.array([2.0, 0.0, 0.0])  # dubins-like state, h1 = 3, h2 = 8
    assert barrier_state(s, field, cfg) == pytest.approx(1.0 / 3.0 + 1.0 / 8.0)


def test_dbas_step_recursion_hand_value():
    field = ObstacleField((SafetyConstraint.sphere([0.0, 0.0], 1.0, 0.0),))
    cfg = BarrierConfig(kind=INVERSE, gamma=0.5)
    s = np.array([2.0, 0.0, 0.0])       # h = 3, B = 1/3
    s_next = np.array([3.0, 0.0, 0.0])  # h = 8, B = 1/8
    beta = 0.7
    out = dbas_step(s_next, s, beta, field, cfg)
    assert out == pytest.approx(1.0 / 8.0 - 0.5 * (0.7 - 1.0 / 3.0))


def test_gamma_zero_reduces_to_pure_composition():
    field = ObstacleField((SafetyConstraint.sphere([0.0, 0.0], 1.0, 0.0),))
    cfg = BarrierConfig(kind=INVERSE, gamma=0.0)
    s_next = np.array([3.0, 0.0, 0.0])
    out = dbas_step(s_next, np.array([2.0, 0.0, 0.0]), 123.0, field, cfg)
    assert out == pytest.approx(1.0 / 8.0)


def test_embed_split_round_trip():
    field = ObstacleField((SafetyConstraint.sphere([0.0, 0.0], 1.0, 0.0),))
    cfg = BarrierConfig(kind=INVERSE)
    s = np.array([2.0, 0.0, 0.3])
    xb = embed(s, field, cfg)
    assert xb.shape == (4,)
    back, beta = split(xb)
    np.testing.assert_allclose(back, s)
    assert beta == pytest.approx(1.0 / 3.0)


def test_embedded_step_plant_rows_match_model():
    model = make_model(DUBINS)
    field = ObstacleField((SafetyConstraint.sphere([5.0, 5.0], 1.0, 0.2),))
    cfg = BarrierConfig(kind=RELAXED, gamma=0.3)
    s = np.array([0.0, 0.0, 0.5])
    u = np.array([1.0, 0.2])
    xb = embed(s, field, cfg)
    nxt = embedded_step(xb, u, model, field, cfg)
    np.testing.assert_allclose(nxt[:3], model.step(s, u), atol=1e-14)
    s_next = model.step(s, u)
    assert nxt[3] == pytest.approx(dbas_step(s_next, s, xb[3], field, cfg))


def test_embedded_rollout_inverse_raises_on_violation():
    model = make_model(DUBINS)
    field = ObstacleField((SafetyConstraint.sphere([1.0, 0.0], 0.5, 0.0),))
    cfg = BarrierConfig(kind=INVERSE)
    x0 = embed(np.zeros(3), field, cfg)
    controls = np.tile([10.0, 0.0], (30, 1))  # drives straight into the obstacle
    with pytest.raises(UnsafeEvaluationError):
        embedded_rollout(x0, controls, model, field, cfg)
    # the relaxed barrier shrugs and keeps going
    relaxed = BarrierConfig(kind=RELAXED)
    states = embedded_rollout(
        embed(np.zeros(3), field, relaxed), controls, model, field, relaxed
    )
    assert np.all(np.isfinite(states))


def test_is_safe_trajectory_reports_first_violation():
    field = ObstacleField((SafetyConstraint.sphere([1.0, 0.0], 0.5, 0.0),))
    states = np.array([[0.0, 0.0, 0.0], [0.8, 0.0, 0.0], [1.0, 0.0, 0.0]])
    safe, idx = is_safe_trajectory(states, field)
    assert not safe
    assert idx == 1  # (0.8-1)^2 = 0.04 < 0.25
    safe, idx = is_safe_trajectory(states[:1], field)
    assert safe and idx == -1
    assert is_safe_state(np.array([0.0, 0.0, 0.0]), field)
    assert not is_safe_state(np.array([1.0, 0.1, 0.0]), field)


def test_empty_field_behaviour():
    field = ObstacleField(())
    cfg = BarrierConfig(kind=INVERSE)
    assert barrier_state(np.array([1.0, 2.0, 3.0]), field, cfg) == 0.0
    assert field.min_margin(np.array([1.0, 2.0, 3.0])) == np.inf
    safe, idx = is_safe_trajectory(np.zeros((5, 3)), field)
    assert safe and idx == -1


def test_multirotor_margins_use_first_three_components():
    field = ObstacleField((SafetyConstraint.sphere([1.0, 1.0, 1.0], 0.4, 1.5),))
    model = make_model(MULTIROTOR)
    s = np.zeros(model.state_dim)
    s[6] = 1.0
    s[0:3] = [2.0, 1.8, 2.0]
    h = field.margins(s)
    expect = (1.0 + 0.8**2 + 1.0) - 0.16 - 2.25
    assert h[0] == pytest.approx(expect)


def test_constraint_validation():
    with pytest.raises(InvalidStateError):
        SafetyConstraint.sphere([0.0, 0.0], -1.0, 0.0)
    with pytest.raises(InvalidStateError):
        BarrierConfig(gamma=1.5)
    with pytest.raises(InvalidStateError):
        BarrierConfig(delta=0.0)
    with pytest.raises(InvalidStateError):
        ObstacleField(
            (
                SafetyConstraint.sphere([0.0, 0.0], 1.0, 0.0),
                SafetyConstraint.sphere([0.0, 0.0, 0.0], 1.0, 0.0),
            )
        )
