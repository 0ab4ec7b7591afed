import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctmcsens.model import (
    Clipped,
    ConfigurationError,
    MassAction,
    MichaelisMenten,
    ValidationError,
    build_approx_process,
    boundary_box,
    check_non_interruptive,
    generator_apply,
    growth_partition,
    intensity_eval,
    intensity_grad,
    network_from_reactions,
    rates,
)


def test_stoichiometry(toy_net):
    assert toy_net.zeta.tolist() == [[1, 0], [-2, 1], [0, -1]]
    assert toy_net.nu.tolist() == [[0, 0], [2, 0], [0, 1]]
    assert toy_net.num_species == 2 and toy_net.num_reactions == 3


def test_mass_action_uses_falling_factorial(toy_net):
    theta = [1.0, 0.5, 2.0, 3.0]
    assert intensity_eval(toy_net, theta, [5, 0], 1) == pytest.approx(0.5 * 5 * 4)
    assert intensity_eval(toy_net, theta, [1, 0], 1) == 0.0


def test_michaelis_menten_rate(toy_net):
    theta = [1.0, 0.5, 2.0, 3.0]
    assert intensity_eval(toy_net, theta, [0, 6], 2) == pytest.approx(2.0 * 6 / 9)


def test_rates_vanish_off_the_orthant(toy_net):
    theta = [1.0, 0.5, 2.0, 3.0]
    assert np.all(rates(toy_net, theta, [-1, 3]) == 0)


@settings(max_examples=60, deadline=None)
@given(a=st.integers(0, 30), b=st.integers(0, 30), i=st.integers(0, 3),
       th=st.lists(st.floats(0.2, 5.0), min_size=4, max_size=4))
def test_gradients_match_finite_differences(toy_net, a, b, i, th):
    h = 1e-6
    for k in range(3):
        tp, tm = list(th), list(th)
        tp[i] += h
        tm[i] -= h
        fd = (intensity_eval(toy_net, tp, [a, b], k) - intensity_eval(toy_net, tm, [a, b], k)) / (2 * h)
        assert intensity_grad(toy_net, th, [a, b], k, i) == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_generator_of_identity_is_drift(toy_net):
    theta = [1.0, 0.5, 2.0, 3.0]
    x = np.array([4, 2])
    drift = rates(toy_net, theta, x) @ toy_net.zeta
    assert generator_apply(toy_net, theta, lambda y: float(y[0]), x) == pytest.approx(drift[0])
    assert generator_apply(toy_net, theta, lambda y: float(y[1]), x) == pytest.approx(drift[1])


def test_bad_definitions_rejected():
    with pytest.raises(ConfigurationError):
        network_from_reactions(["A"], [({"Q": 1}, {}, MassAction(0))], 1)
    with pytest.raises(ConfigurationError):
        network_from_reactions(["A"], [({"A": 1}, {}, MassAction(3))], 1)
    with pytest.raises(ConfigurationError):
        network_from_reactions(["A"], [({"A": 1}, {}, MichaelisMenten(0, 1, 4))], 2)


def test_growth_partition(toy_net):
    assert growth_partition(toy_net) == ((0,), (1, 2))


def test_clipped_floor_and_cap():
    net = network_from_reactions(["A"], [({"A": 1}, {}, MassAction(0))], 1)
    z = build_approx_process(net, delta=0.5, M=3.0)
    assert isinstance(z.reactions[0].intensity, Clipped)
    assert z.state_floor is None
    assert intensity_eval(z, [2.0], [0], 0) == pytest.approx(1.0)  # floor 2 * 0.5
    assert intensity_eval(z, [2.0], [-4], 0) == pytest.approx(1.0)
    assert intensity_eval(z, [2.0], [2], 0) == pytest.approx(4.0)
    assert intensity_eval(z, [2.0], [10], 0) == pytest.approx(6.0)  # cap 2 * 3
    assert intensity_grad(z, [2.0], [10], 0, 0) == pytest.approx(3.0)
    ze = build_approx_process(net, exempt=[0])
    assert intensity_eval(ze, [2.0], [0], 0) == 0.0


def test_approx_process_agrees_with_original_inside_support(dimerization):
    net = dimerization.net
    theta = dimerization.parameter_set("set1").theta
    z = build_approx_process(net, exempt=dimerization.exempt, theta=theta)
    for x in ([3, 7, 2], [1, 2, 1], [10, 40, 3]):
        assert np.allclose(rates(z, theta, x), rates(net, theta, x))


def test_builtin_approx_processes_are_non_interruptive(birth_death, switch, mm_switch, dimerization):
    for spec in (birth_death, switch, mm_switch, dimerization):
        for ps in spec.parameter_sets.values():
            z = build_approx_process(spec.net, exempt=spec.exempt, theta=ps.theta)
            assert check_non_interruptive(z, ps.theta, boundary_box(z)).non_interruptive


def test_original_switch_is_interruptive(switch):
    theta = switch.parameter_set().theta
    rep = check_non_interruptive(switch.net, theta, boundary_box(switch.net))
    assert not rep.non_interruptive
    # decay or conversion of the last A switches the other off
    assert {(k, l) for _, k, l in rep.violations} >= {(0, 1), (1, 0)}


def test_bad_exempt_set_raises_validation_error(switch):
    theta = switch.parameter_set().theta
    with pytest.raises(ValidationError):
        build_approx_process(switch.net, exempt=[0, 1], theta=theta)


def test_exempt_out_of_range(switch):
    with pytest.raises(ConfigurationError):
        build_approx_process(switch.net, exempt=[7])


def test_check_reports_rate_bounds(toy_net):
    theta = [1.0, 0.5, 2.0, 3.0]
    rep = check_non_interruptive(toy_net, theta, [(0, 3), (0, 3)])
    assert rep.gamma_max == pytest.approx(max(1.0, 0.5 * 3 * 2, 2.0 * 3 / 6))
    assert rep.gamma_prime > 0
