import numpy as np
import pytest

from ctmcsens.couple import (
    cfd_sample,
    cfd_samples,
    correction_sample,
    correction_samples,
    coupled_jump_matrix,
    coupled_lr_weight,
    coupled_rates,
    simulate_coupled,
)
from ctmcsens.model import build_approx_process, intensity_eval, intensity_grad
from ctmcsens.sim import Polynomial, make_gs_functional, terminal_functional
from ctmcsens.streams import substream


def test_coupled_rates():
    assert coupled_rates(3.0, 5.0) == (3.0, 0.0, 2.0)
    assert coupled_rates(5.0, 3.0) == (3.0, 2.0, 0.0)
    with pytest.raises(ValueError):
        coupled_rates(-1.0, 2.0)


def test_jump_matrix_layout():
    J = coupled_jump_matrix(np.array([[1, -1], [0, 2]]))
    assert J.tolist() == [[1, -1, 1, -1], [1, -1, 0, 0], [0, 0, 1, -1],
                          [0, 2, 0, 2], [0, 2, 0, 0], [0, 0, 0, 2]]


def switch_pair(switch):
    theta = switch.parameter_set().theta
    z = build_approx_process(switch.net, exempt=switch.exempt, theta=theta)
    return switch.net, z, theta, switch.parameter_set().x0


def test_marginal_rate_identities_along_path(switch):
    netx, netz, theta, x0 = switch_pair(switch)
    cp = simulate_coupled(netx, netz, theta, x0, x0, 10.0, substream(0, 3))
    assert cp.path.num_jumps > 0
    R = len(theta)
    for w in cp.path.states:
        x, z = w[:3], w[3:]
        for k in range(netx.num_reactions):
            lam, dlam = cp.channel_rates(w, k)
            assert np.all(lam >= 0)
            assert lam[0] + lam[1] == pytest.approx(intensity_eval(netx, theta, x, k))
            assert lam[0] + lam[2] == pytest.approx(intensity_eval(netz, theta, z, k))
            for i in range(R):
                assert dlam[0, i] + dlam[1, i] == pytest.approx(intensity_grad(netx, theta, x, k, i))
                assert dlam[0, i] + dlam[2, i] == pytest.approx(intensity_grad(netz, theta, z, k, i))


def test_identical_processes_never_split(birth_death):
    theta = birth_death.parameter_set().theta
    cp = simulate_coupled(birth_death.net, birth_death.net, theta, [0], [0], 5.0, substream(0, 0))
    assert not cp.diverged
    assert np.array_equal(cp.x, cp.z)


def test_recorded_coupled_path_matches_batch(switch):
    netx, netz, theta, x0 = switch_pair(switch)
    f = terminal_functional(Polynomial.species(3, 2), 10.0)
    vals, st = correction_samples(netx, netz, theta, f, x0, 20, 7, stage="c")
    for i in range(20):
        cp = simulate_coupled(netx, netz, theta, x0, x0, 10.0, substream(7, i, "c"))
        assert st.jumps[i] == cp.path.num_jumps
        for j in range(3):
            assert st.H[i, j] == pytest.approx(coupled_lr_weight(cp, theta, j), rel=1e-9, abs=1e-9)
            assert vals[i, j] == pytest.approx(correction_sample(cp, f, f, theta, j), rel=1e-9, abs=1e-9)


def test_integral_corrections_match_reference(mm_switch):
    ps = mm_switch.parameter_set("t2")
    netz = build_approx_process(mm_switch.net, exempt=mm_switch.exempt, theta=ps.theta)
    fx = make_gs_functional(mm_switch.net, Polynomial.species(3, 2), 2.0)
    vals, st = correction_samples(mm_switch.net, netz, ps.theta, fx, ps.x0, 10, 1, stage="g")
    for i in range(10):
        cp = simulate_coupled(mm_switch.net, netz, ps.theta, ps.x0, ps.x0, 2.0, substream(1, i, "g"))
        for j in range(4):
            assert vals[i, j] == pytest.approx(correction_sample(cp, fx, fx, ps.theta, j), rel=1e-8, abs=1e-8)


def test_cfd_sample_matches_batch(birth_death):
    theta = birth_death.parameter_set().theta
    f = terminal_functional(Polynomial.species(1, 0), 5.0)
    vals, _ = cfd_samples(birth_death.net, theta, 1, 0.005, f, [0], 10, 3)
    for i in range(10):
        assert vals[i] == pytest.approx(cfd_sample(birth_death.net, theta, 1, 0.005, f, [0], substream(3, i, "cfd")))


def test_cfd_rejects_negative_rates(birth_death):
    f = terminal_functional(Polynomial.species(1, 0), 5.0)
    with pytest.raises(ValueError):
        cfd_samples(birth_death.net, [10.0, 0.5], 1, 1.0, f, [0], 4, 0)


def test_lr_weight_rejects_other_theta(switch):
    netx, netz, theta, x0 = switch_pair(switch)
    cp = simulate_coupled(netx, netz, theta, x0, x0, 1.0, substream(0, 0))
    with pytest.raises(ValueError):
        coupled_lr_weight(cp, np.asarray(theta) * 2, 0)
