import numpy as np
import pytest

from ctmcsens.model import MassAction, network_from_reactions
from ctmcsens.oracle import closed_form_birth_death
from ctmcsens.sim import (
    ExplosionError,
    Polynomial,
    flux_functional,
    functional_value,
    integral_functional,
    lr_weight,
    make_gs_functional,
    make_rpd_functional,
    run_paths,
    simulate,
    simulate_pathwise,
    terminal_functional,
)
from ctmcsens.streams import substream

from .frozen import BD_MEAN_T5, BD_THETA


def bd_functional(T):
    return terminal_functional(Polynomial.species(1, 0), T)


def test_path_is_consistent(birth_death):
    net = birth_death.net
    p = simulate(net, BD_THETA, [0], 5.0, substream(0, 0))
    assert p.times[0] == 0 and np.all(np.diff(p.times) > 0) and p.times[-1] <= 5.0
    steps = np.diff(p.states, axis=0)
    assert np.array_equal(steps, net.zeta[p.channels])
    assert np.array_equal(p.counts(), np.bincount(p.channels, minlength=2))
    assert np.array_equal(p.state_at(5.0), p.states[-1])
    assert np.all(p.states >= 0)


def test_same_stream_same_path(birth_death):
    a = simulate(birth_death.net, BD_THETA, [0], 5.0, substream(2, 9))
    b = simulate(birth_death.net, BD_THETA, [0], 5.0, substream(2, 9))
    assert np.array_equal(a.times, b.times) and np.array_equal(a.channels, b.channels)


def test_batches_do_not_depend_on_chunking(birth_death):
    f = bd_functional(5.0)
    whole = run_paths(birth_death.net, BD_THETA, [0], f, 40, 1, lr=True)
    head = run_paths(birth_death.net, BD_THETA, [0], f, 15, 1, lr=True)
    tail = run_paths(birth_death.net, BD_THETA, [0], f, 25, 1, lr=True, start=15)
    assert np.array_equal(whole.rows, np.vstack([head.rows, tail.rows]))


def test_recorded_path_matches_batch_row(birth_death):
    f = bd_functional(5.0)
    st = run_paths(birth_death.net, BD_THETA, [0], f, 5, 4, stage="s", lr=True, t_lr=5.0)
    for i in range(5):
        p = simulate(birth_death.net, BD_THETA, [0], 5.0, substream(4, i, "s"))
        assert st.jumps[i] == p.num_jumps
        assert st.fx[i] == p.states[-1][0]
        for j in range(2):
            assert st.H[i, j] == pytest.approx(lr_weight(p, birth_death.net, BD_THETA, j), rel=1e-9,
                                                abs=1e-9)


def test_birth_death_mean(birth_death):
    st = run_paths(birth_death.net, BD_THETA, [0], bd_functional(5.0), 20000, 0)
    mean, se = st.fx.mean(), st.fx.std(ddof=1) / np.sqrt(st.n)
    assert abs(mean - BD_MEAN_T5) < 3 * se
    assert closed_form_birth_death(BD_THETA, 5.0)[0] == pytest.approx(BD_MEAN_T5)


def test_lr_weight_is_mean_zero(birth_death):
    st = run_paths(birth_death.net, BD_THETA, [0], bd_functional(5.0), 20000, 1, lr=True, t_lr=5.0)
    se = st.H.std(axis=0, ddof=1) / np.sqrt(st.n)
    assert np.all(np.abs(st.H.mean(axis=0)) < 3 * se)


def test_integral_value_matches_recorded_path(dimerization):
    ps = dimerization.parameter_set("flux")
    f = flux_functional(dimerization.net, 2, 0.5, 1.5)
    st = run_paths(dimerization.net, ps.theta, ps.x0, f, 3, 5, stage="q")
    for i in range(3):
        p = simulate(dimerization.net, ps.theta, ps.x0, 1.5, substream(5, i, "q"))
        assert st.Lx[i] == pytest.approx(functional_value(p, f, ps.theta), rel=1e-10)


def test_gs_functional_recovers_terminal_mean(birth_death):
    # E f(X(T)) = f(x0) + E int_0^T (A f)(X) ds
    f = make_gs_functional(birth_death.net, Polynomial.species(1, 0), 5.0)
    st = run_paths(birth_death.net, BD_THETA, [0], f, 20000, 2)
    se = st.Lx.std(ddof=1) / np.sqrt(st.n)
    assert abs(st.Lx.mean() - BD_MEAN_T5) < 3 * se


def test_rpd_window_checks():
    f = Polynomial.species(1, 0)
    with pytest.raises(ValueError):
        make_rpd_functional(f, 1.0, 2.0)
    with pytest.raises(ValueError):
        make_rpd_functional(f, 1.0, 0.0)
    r = make_rpd_functional(f, 2.0, 0.5)
    assert (r.a, r.b, r.alpha) == (1.5, 2.5, 1.0)


def test_pathwise_derivative_matches_common_random_numbers(dimerization):
    # theta-dependent integrand, window away from zero: exercises both dF and the holding-time terms
    ps = dimerization.parameter_set("set1")
    net = dimerization.net
    f = integral_functional(Polynomial.species(3, 1), 0.2, 0.6, flux=[0, 0, 1, 0, 0, 0], net=net)
    theta = np.asarray(ps.theta, dtype=float)
    h = 1e-6
    checked = 0
    for path_index in range(3):
        path, dL = simulate_pathwise(net, theta, ps.x0, f, substream(0, path_index, "pw"))
        for i in range(6):
            tp, tm = theta.copy(), theta.copy()
            tp[i] += h * theta[i]
            tm[i] -= h * theta[i]
            up = simulate(net, tp, ps.x0, f.b, substream(0, path_index, "pw"))
            dn = simulate(net, tm, ps.x0, f.b, substream(0, path_index, "pw"))
            if not (np.array_equal(up.channels, path.channels) and np.array_equal(dn.channels, path.channels)):
                continue
            fd = (functional_value(up, f, tp) - functional_value(dn, f, tm)) / (2 * h * theta[i])
            assert dL[i] == pytest.approx(fd, rel=1e-4, abs=1e-6)
            checked += 1
    assert checked >= 9


def test_explosion_cap(birth_death):
    with pytest.raises(ExplosionError):
        simulate(birth_death.net, BD_THETA, [0], 5.0, substream(0, 0), cap=3)
    with pytest.raises(ExplosionError):
        run_paths(birth_death.net, BD_THETA, [0], bd_functional(5.0), 4, 0, cap=3)


def test_zero_horizon(birth_death):
    st = run_paths(birth_death.net, BD_THETA, [7], bd_functional(0.0), 10, 0, lr=True, t_lr=0.0)
    assert np.all(st.fx == 7) and np.all(st.H == 0) and np.all(st.jumps == 0)


def test_absorbing_state_stops():
    net = network_from_reactions(["A"], [({"A": 1}, {}, MassAction(0))], 1)
    p = simulate(net, [1.0], [3], 1e6, substream(0, 0))
    assert p.num_jumps == 3 and p.states[-1][0] == 0


def test_polynomial_evaluation():
    p = Polynomial([[1, 0], [2, 1]], [3.0, -1.0])
    assert p([2, 5]) == pytest.approx(3 * 2 - 4 * 5)
    assert Polynomial.zero(2)([4, 4]) == 0
    assert Polynomial.constant(2, 1.5)([0, 0]) == 1.5
