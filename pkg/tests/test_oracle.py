import numpy as np
import pytest

from ctmcsens.oracle import (
    TruncationError,
    closed_form_birth_death,
    closed_form_switch,
    cme_expectation,
    cme_sensitivity,
    cme_solve,
    default_box,
    functional_expectation,
    functional_sensitivity,
)
from ctmcsens.sim import Polynomial, flux_functional, make_gs_functional, terminal_functional

from . import frozen


def species(net, name):
    return Polynomial.species(net.num_species, net.index(name))


def test_birth_death_closed_form_values():
    _, d1, d2 = closed_form_birth_death(frozen.BD_THETA, 5.0)
    assert d1 == pytest.approx(frozen.BD_D1_T5, rel=1e-14)
    assert d2 == pytest.approx(frozen.BD_D2_T5, rel=1e-14)
    assert closed_form_birth_death(frozen.BD_THETA, 50.0)[2] == pytest.approx(frozen.BD_D2_T50, rel=1e-14)
    assert frozen.BD_D2_T5 == pytest.approx(-28.508, abs=5e-4)
    assert frozen.BD_D2_T50 == pytest.approx(-40.0, abs=1e-6)


def test_birth_death_master_equation(birth_death):
    f = species(birth_death.net, "A")
    d2 = cme_sensitivity(birth_death.net, frozen.BD_THETA, 1, f, 5.0, x0=[0])
    assert d2 == pytest.approx(frozen.BD_D2_T5, rel=1e-6)
    d1 = cme_sensitivity(birth_death.net, frozen.BD_THETA, 0, f, 5.0, box=[(0, 80)], x0=[0])
    assert d1 == pytest.approx(frozen.BD_D1_T5, rel=1e-6)
    mean = cme_expectation(birth_death.net, frozen.BD_THETA, [0], 5.0, f, box=[(0, 80)])
    assert mean == pytest.approx(frozen.BD_MEAN_T5, rel=1e-8)


@pytest.mark.parametrize("t", [0.5, 2.0, 10.0])
def test_switch_closed_form_matches_master_equation(switch, t):
    f = species(switch.net, "C")
    cme = cme_sensitivity(switch.net, frozen.SWITCH_THETA, 0, f, t, x0=[10, 0, 0])
    assert closed_form_switch(0.25, 10, t) == pytest.approx(cme, rel=1e-6)
    assert cme == pytest.approx(frozen.SWITCH_D1[t], rel=1e-6)


@pytest.mark.parametrize("t", [2.0, 20.0])
def test_mm_switch_values(mm_switch, t):
    f = terminal_functional(species(mm_switch.net, "Pt"), t)
    x0 = mm_switch.parameter_set().x0
    val = functional_sensitivity(mm_switch.net, frozen.MM_THETA, f, x0, 0)
    assert val == pytest.approx(frozen.MM_D1[t], rel=1e-6)
    full = cme_sensitivity(mm_switch.net, frozen.MM_THETA, 0, f.poly, t, x0=x0)
    assert full == pytest.approx(val, rel=1e-6)


def test_reduced_system_matches_full_master_equation(dimerization):
    # small dimerization parameters so the full three-species box is feasible
    net = dimerization.net
    theta = np.array([20.0, 10.0, 0.05, 5.0, 1.0, 1.0])
    x0 = [0, 0, 0]
    box = [(0, 22), (0, 90), (0, 70)]
    fD = species(net, "D")
    full = cme_expectation(net, theta, x0, 1.0, fD, box=box, method="expm", max_leak=1e-8)
    red = functional_expectation(net, theta, terminal_functional(fD, 1.0), x0, box=box, max_leak=1e-8)
    assert red == pytest.approx(full, rel=1e-7)
    # flux integral: d/dt E D = E lambda3 - theta6 E D, so int_0^1 E lambda3 = E D(1) + theta6 int_0^1 E D
    flux = functional_expectation(net, theta, flux_functional(net, 2, 0.0, 1.0), x0, box=box)
    from ctmcsens.sim import integral_functional
    int_d = functional_expectation(net, theta, integral_functional(fD, 0.0, 1.0), x0, box=box)
    assert flux == pytest.approx(red + theta[5] * int_d, rel=1e-7)
    plain = functional_expectation(net, theta, terminal_functional(fD, 1.0), x0, box=box, reduce=False,
                                   max_leak=1e-8)
    assert plain == pytest.approx(full, rel=1e-10)


def test_gs_functional_expectation_equals_terminal_mean(switch):
    f = species(switch.net, "C")
    x0 = [10, 0, 0]
    gs = functional_expectation(switch.net, frozen.SWITCH_THETA, make_gs_functional(switch.net, f, 2.0), x0)
    term = functional_expectation(switch.net, frozen.SWITCH_THETA, terminal_functional(f, 2.0), x0)
    assert gs + f(x0) == pytest.approx(term, rel=1e-7)


def test_window_integral(birth_death):
    # int_a^b E X(s) ds for the birth-death mean th1/th2 (1 - e^{-th2 s})
    from ctmcsens.sim import integral_functional
    th1, th2 = frozen.BD_THETA
    a, b = 1.0, 3.0
    exact = th1 / th2 * ((b - a) - (np.exp(-th2 * a) - np.exp(-th2 * b)) / th2)
    f = integral_functional(species(birth_death.net, "A"), a, b)
    got = functional_expectation(birth_death.net, frozen.BD_THETA, f, [0], box=[(0, 60)], reduce=False)
    assert got == pytest.approx(exact, rel=1e-7)


def test_small_box_leaks(birth_death):
    with pytest.raises(TruncationError) as err:
        cme_solve(birth_death.net, frozen.BD_THETA, [0], 5.0, box=[(0, 10)])
    assert err.value.leak > 1e-4


def test_box_limits(birth_death, dimerization):
    with pytest.raises(ValueError):
        cme_solve(birth_death.net, frozen.BD_THETA, [5], 1.0, box=[(6, 10)])
    with pytest.raises(TruncationError):
        cme_solve(dimerization.net, [1] * 6, [0, 0, 0], 1.0, box=[(0, 200), (0, 200), (0, 200)])


def test_default_box_covers_transient_species(switch):
    box = default_box(switch.net, frozen.SWITCH_THETA, [10, 0, 0], 10.0)
    assert box[1][1] >= 5  # B rises and falls again before t = 10


def test_rk45_and_expm_agree(switch):
    f = species(switch.net, "C")
    a = cme_expectation(switch.net, frozen.SWITCH_THETA, [10, 0, 0], 2.0, f, box=[(0, 10)] * 3)
    b = cme_expectation(switch.net, frozen.SWITCH_THETA, [10, 0, 0], 2.0, f, box=[(0, 10)] * 3, method="expm")
    assert a == pytest.approx(b, rel=1e-6)


@pytest.mark.slow
def test_dimerization_set1_frozen(dimerization):
    ps = dimerization.parameter_set("set1")
    f = terminal_functional(species(dimerization.net, "D"), ps.time)
    val = functional_sensitivity(dimerization.net, ps.theta, f, ps.x0, 2, box=[(0, 40), (0, 200)])
    assert val == pytest.approx(frozen.DIMER_SET1_D3, rel=1e-6)


@pytest.mark.slow
def test_dimerization_set2_frozen(dimerization):
    ps = dimerization.parameter_set("set2")
    f = terminal_functional(species(dimerization.net, "D"), ps.time)
    # E[D(2)] is large enough that the default step loses ~1e-5 to cancellation;
    # at this step repeated solves and nearby steps agree to ~2e-6
    val = functional_sensitivity(dimerization.net, ps.theta, f, ps.x0, 2, box=[(0, 120), (0, 450)],
                                 h=1e-4 * ps.theta[2])
    assert val == pytest.approx(frozen.DIMER_SET2_D3, rel=5e-6)


@pytest.mark.slow
def test_flux_gradient_frozen(dimerization):
    ps = dimerization.parameter_set("flux")
    f = flux_functional(dimerization.net, 2, 0.0, ps.time)
    scale = max(abs(g) for g in frozen.FLUX_GRADIENT)
    for i, want in enumerate(frozen.FLUX_GRADIENT):
        val = functional_sensitivity(dimerization.net, ps.theta, f, ps.x0, i, box=[(0, 40), (0, 200)])
        # the dimer decay rate has exactly zero effect; differencing noise is ~1e-9 of the largest component
        assert val == pytest.approx(want, rel=1e-5, abs=1e-8 * scale)
