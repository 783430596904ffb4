import numpy as np
import pytest

from certmon.monitor import (
    BUDGET_OVERRUN, CUBE_VIOLATION, NUMERICAL, UNSAFE_REACH, CertificateMonitor, MonitorConfig, Verdict,
    monitor_init, monitor_next, relu_plugins, schematic_next,
)
from certmon.network import activation_pattern
from certmon.synthetic import affine_cbf, make_synthetic_cbf
from certmon.verifier import VerifierConfig, make_cube, verify_linear
from conftest import integrator_spec


def identity_setup(h=10):
    spec = integrator_spec(dim=1, u=1.0, unsafe_rows=[[[-1.0, -0.5]]])
    return spec, affine_cbf([1.0]), MonitorConfig(h, spec.dt)


def test_init_rejects_mismatches():
    spec, net, cfg = identity_setup()
    with pytest.raises(ValueError):
        monitor_init(spec, affine_cbf([1.0, 0.0]), cfg)
    with pytest.raises(ValueError):
        monitor_init(spec, net, MonitorConfig(10, 0.2))
    with pytest.raises(ValueError):
        MonitorConfig(10, 0.1, budget=0.5)
    with pytest.raises(ValueError):
        MonitorConfig(0, 0.1)
    st = monitor_init(spec, net, cfg)
    assert st.verdict == 1 and st.k == 0 and not st.cache.outcomes


def test_empty_unsafe_set_always_clear():
    spec = integrator_spec(dim=2, u=1.0)
    mon = CertificateMonitor(spec, make_synthetic_cbf("invalid_flipped"), MonitorConfig(50, spec.dt))
    for x in np.random.default_rng(3).uniform(-0.5, 0.5, (20, 2)):
        assert mon.next(x).value == 1


def test_identity_certificate_cube_violation_matches_single_shot():
    spec, net, cfg = identity_setup()
    st = monitor_init(spec, net, cfg)
    st, v = monitor_next(st, [1.0])
    assert v.value == 1  # cone 1 +- 1.2 stays above -0.5
    st, v = monitor_next(st, [0.5])
    assert v.value == 0 and v.cause == CUBE_VIOLATION
    assert abs(v.witness[0]) <= 1e-9
    direct = verify_linear(make_cube(net, activation_pattern(net, [0.0]), spec), spec, VerifierConfig())
    np.testing.assert_allclose(v.witness, direct.witness, atol=1e-12)


def test_latching_and_fail_safe_once():
    spec, net, cfg = identity_setup()
    calls = []
    st = monitor_init(spec, net, cfg, fail_safe=calls.append)
    st, v0 = monitor_next(st, [0.5])
    assert v0.value == 0
    for x in ([2.0], [2.5], [1.0]):
        st, v = monitor_next(st, x)
        assert v.value == 0 and v.cause == v0.cause
    assert len(calls) == 1 and st.k == 4


def test_domain_errors_and_negative_certificate():
    spec, net, cfg = identity_setup()
    for bad, cause in (([np.nan], NUMERICAL), ([7.0], NUMERICAL), ([-0.1], UNSAFE_REACH)):
        st = monitor_init(spec, net, cfg)
        st, v = monitor_next(st, bad)
        assert v.value == 0 and v.cause == cause


def test_budget_overrun_flag():
    spec = integrator_spec(dim=1, u=1.0)
    st = monitor_init(spec, affine_cbf([1.0]), MonitorConfig(10, spec.dt, budget=1e-12))
    st, v = monitor_next(st, [1.0])
    assert v.value == 1 and v.overrun and v.cause == BUDGET_OVERRUN
    assert v.same_as(Verdict(1))


def test_schematic_with_constant_verifiers():
    spec, net, cfg = identity_setup()
    never = lambda x, h: None  # noqa: E731
    st = monitor_init(spec, net, cfg)
    for x in ([1.0], [0.5], [0.0]):
        st, v = schematic_next(never, lambda x, r: True, st, x)
        assert v.value == 1
    calls = []
    st = monitor_init(spec, net, cfg, fail_safe=calls.append)
    outs = [schematic_next(never, lambda x, r: k < 2, st, [1.0])[1].value for k in range(5)]
    assert outs == [1, 1, 0, 0, 0] and len(calls) == 1


def test_schematic_equals_monitor_next_on_identity():
    spec, net, cfg = identity_setup()
    xs = [[1.0], [0.9], [0.7], [0.5], [1.0]]
    a, b = monitor_init(spec, net, cfg), monitor_init(spec, net, cfg)
    A, V = relu_plugins(b)
    for x in xs:
        a, va = monitor_next(a, x)
        b, vb = schematic_next(A, V, b, x)
        assert va.same_as(vb)
