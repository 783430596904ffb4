import numpy as np
import pytest

from certmon.dynamics import (
    ControlBoundsError, LinearAffineSystem, clamp_control, cwh_system, dump_system, load_system, make_spec,
    simulate, step,
)
from certmon.geometry import Box
from oracles import rk4


def test_cwh_layout_and_origin():
    s = cwh_system(0.0011)
    assert s.state_dim == 6 and s.control_dim == 3
    assert np.array_equal(s.vector_field(np.zeros(6), np.zeros(3)), np.zeros(6))


def test_cwh_matches_textbook_equations():
    n = 0.0011
    s = cwh_system(n)
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, y, z, vx, vy, vz = rng.normal(size=6)
        u = rng.normal(size=3)
        # Clohessy-Wiltshire: x'' = 3n^2 x + 2n y' + ux, y'' = -2n x' + uy, z'' = -n^2 z + uz
        ref = [vx, vy, vz, 3 * n * n * x + 2 * n * vy + u[0], -2 * n * vx + u[1], -n * n * z + u[2]]
        assert np.allclose(s.vector_field([x, y, z, vx, vy, vz], u), ref, atol=1e-15)
    assert s.vector_field(np.eye(6)[0])[3] == pytest.approx(3 * n * n)


def test_cwh_rejects_nonpositive():
    with pytest.raises(ValueError):
        cwh_system(0.0)


def integrator(dim=3):
    sysm = LinearAffineSystem(np.zeros((dim, dim)), np.eye(dim), None)
    return make_spec(sysm, Box(-np.ones(dim), np.ones(dim)), Box(-np.ones(dim) / 2, np.ones(dim) / 2), [],
                     Box(-np.ones(dim), np.ones(dim)), 0.1)


def test_step_pure_integrator():
    assert np.allclose(step(integrator(), np.zeros(3), [1, 0, 0]), [0.1, 0, 0], atol=1e-15)


def test_step_control_bounds():
    spec = integrator()
    step(spec, np.zeros(3), [1, -1, 1])
    with pytest.raises(ControlBoundsError):
        step(spec, np.zeros(3), [1 + 1e-9, 0, 0])


def test_step_decay_matches_rk4():
    sysm = LinearAffineSystem([[-1.0]], np.zeros((1, 0)), None)
    spec = make_spec(sysm, Box([-2], [2]), Box([0], [1]), [], Box(np.zeros(0), np.zeros(0)), 0.1)
    got = step(spec, [1.0])[0]
    ref = rk4(lambda x: -x, [1.0], 0.1, 2000)[0]
    assert got == pytest.approx(0.904837418, abs=1e-9)
    assert got == pytest.approx(ref, abs=1e-9)


def test_step_cwh_matches_rk4(cwh_spec):
    rng = np.random.default_rng(1)
    s = cwh_spec.system
    for _ in range(5):
        x = rng.uniform(-10, 10, 6)
        u = rng.uniform(-1, 1, 3)
        ref = rk4(lambda v: s.vector_field(v, u), x, 0.1, 400)
        assert np.allclose(step(cwh_spec, x, u), ref, rtol=1e-9, atol=1e-9)


def test_exact_step_composition(cwh_spec):
    x = np.array([5.0, -3.0, 2.0, 0.1, 0.2, -0.3])
    y = x.copy()
    for _ in range(10):
        y = step(cwh_spec, y)
    big = cwh_spec.system.discretize(1.0)[0] @ x
    assert np.allclose(y, big, rtol=1e-9)


def test_simulate_zero_controller_constant():
    tr = simulate(integrator(), lambda x: np.zeros(3), [0.2, 0.1, 0.0], 5)
    assert np.allclose(tr.states, [0.2, 0.1, 0.0])


def test_simulate_clamps_infinite_thrust():
    tr = simulate(integrator(), lambda x: [np.inf, np.inf, np.inf], np.zeros(3), 3)
    assert np.array_equal(tr.controls, np.ones((3, 3)))


def test_clamp_idempotent():
    spec = integrator()
    u = np.array([0.3, -1.0, 0.99])
    assert np.array_equal(clamp_control(spec, u), u)
    assert np.array_equal(clamp_control(spec, clamp_control(spec, [5, -5, np.nan])), [1, -1, 0])


def test_simulate_cwh_replay(cwh_spec):
    K = 0.5
    ctrl = lambda x: -K * x[:3]  # noqa: E731
    x0 = np.array([10.0, -4.0, 3.0, 0.0, 0.1, 0.0])
    tr = simulate(cwh_spec, ctrl, x0, 30)
    x = x0.copy()
    Phi, Gamma, gamma = cwh_spec.discrete
    for k in range(30):
        u = np.clip(-K * x[:3], -1, 1)
        assert np.array_equal(tr.controls[k], u)
        x = Phi @ x + Gamma @ u + gamma
        assert np.array_equal(tr.states[k + 1], x)
    assert np.all(np.abs(tr.controls) <= 1.0)


def test_system_config_round_trip(cwh_spec, sandbox_spec):
    for spec in (cwh_spec, sandbox_spec):
        back = load_system(dump_system(spec))
        assert np.array_equal(back.system.A, spec.system.A)
        assert back.unsafe_rows == spec.unsafe_rows and back.dt == spec.dt
        assert dump_system(back) == dump_system(spec)
        for P, Q in zip(back.unsafe, spec.unsafe):
            assert np.array_equal(P.G, Q.G) and np.array_equal(P.g, Q.g)


def test_spec_validation():
    sysm = LinearAffineSystem(np.zeros((1, 1)), np.eye(1), None)
    with pytest.raises(ValueError):
        make_spec(sysm, Box([-1], [1]), Box([0], [2]), [], Box([-1], [1]), 0.1)
    with pytest.raises(ValueError):
        make_spec(sysm, Box([-1], [1]), Box([0], [0.5]), [], Box([-1], [1]), 0.0)
    with pytest.raises(ValueError):
        LinearAffineSystem(np.zeros((2, 3)), np.eye(2), None)
