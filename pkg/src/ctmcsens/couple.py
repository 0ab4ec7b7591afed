"""Split coupling of two networks sharing reaction vectors.

Each reaction ``k`` becomes three channels: a shared one firing in both
processes at ``min(lamX, lamZ)`` and two one-sided residual channels.
Channel ``3k + j`` (``j = 0, 1, 2``) moves ``(X, Z)`` by ``(zeta, zeta)``,
``(zeta, 0)`` and ``(0, zeta)`` respectively.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ReactionNetwork, intensity_eval, intensity_grad, with_theta_check
from .sim import Functional, Path, _coupled_jumps, _record, _setup, run_paths
from .streams import as_bitgen


def coupled_rates(lamX: float, lamZ: float) -> tuple[float, float, float]:
    """Shared and one-sided rates ``(min, lamX - min, lamZ - min)``."""
    if lamX < 0 or lamZ < 0:
        raise ValueError("intensities must be nonnegative")
    m = min(lamX, lamZ)
    return m, lamX - m, lamZ - m


def coupled_jump_matrix(zeta: np.ndarray) -> np.ndarray:
    """``(3K, 2d)`` jump vectors of the coupled chain."""
    return _coupled_jumps(np.asarray(zeta, dtype=np.int64))


@dataclass
class CoupledPath:
    """Recorded coupled path; ``path.states`` holds ``(x, z)`` side by side."""

    path: Path
    netX: ReactionNetwork
    netZ: ReactionNetwork
    thetaX: np.ndarray
    thetaZ: np.ndarray

    @property
    def d(self) -> int:
        return self.netX.num_species

    @property
    def times(self):
        return self.path.times

    @property
    def x(self) -> np.ndarray:
        return self.path.states[:, : self.d]

    @property
    def z(self) -> np.ndarray:
        return self.path.states[:, self.d :]

    @property
    def reactions(self) -> np.ndarray:
        return self.path.channels // 3

    @property
    def types(self) -> np.ndarray:
        """0 shared, 1 X-only, 2 Z-only."""
        return self.path.channels % 3

    def typed_counts(self, T=None) -> np.ndarray:
        """``(K, 3)`` jump counts per reaction and channel type up to ``T``."""
        return self.path.counts(T).reshape(-1, 3)

    @property
    def diverged(self) -> bool:
        return bool(np.any(self.types != 0))

    def x_at(self, t):
        return self.path.state_at(t)[: self.d]

    def z_at(self, t):
        return self.path.state_at(t)[self.d :]

    def channel_rates(self, w, k):
        """``(Lambda, dLambda)`` for the three channels of reaction ``k`` at joint state ``w``."""
        d, R = self.d, self.thetaX.shape[0]
        x, z = w[:d], w[d:]
        lx = intensity_eval(self.netX, self.thetaX, x, k)
        lz = intensity_eval(self.netZ, self.thetaZ, z, k)
        dx = np.array([intensity_grad(self.netX, self.thetaX, x, k, i) for i in range(R)])
        dz = np.array([intensity_grad(self.netZ, self.thetaZ, z, k, i) for i in range(R)])
        lam = np.array(coupled_rates(lx, lz))
        # exact ties take the X-branch derivative
        if lx <= lz:
            dlam = np.stack([dx, np.zeros(R), dz - dx])
        else:
            dlam = np.stack([dz, dx - dz, np.zeros(R)])
        return lam, dlam


def simulate_coupled(netX: ReactionNetwork, netZ: ReactionNetwork, theta, x0, z0,
                     horizon: float, stream=None, *, thetaZ=None, first_arrivals=None,
                     cap: int = 10**8) -> CoupledPath:
    """Simulate the split coupling of ``netX`` at ``theta`` and ``netZ`` at ``thetaZ``."""
    theta = with_theta_check(theta, netX.param_dim)
    thz = theta if thetaZ is None else with_theta_check(thetaZ, netZ.param_dim)
    s = _setup(netX, theta, x0, None, float(horizon), netz=netZ, thz=thz, z0=z0,
               want_lr=True, record=True, cap=cap)
    path = _record(s, as_bitgen(stream), first_arrivals)
    return CoupledPath(path, netX, netZ, theta, thz)


def coupled_lr_weight(cp: CoupledPath, theta=None, i: int = 0, T: float | None = None) -> float:
    """Coupled likelihood-ratio weight of parameter ``i`` up to ``T`` (reference evaluation).

    ``theta`` defaults to the values the path was simulated at; it is accepted
    for signature symmetry with :func:`ctmcsens.sim.lr_weight` and must match.
    """
    if theta is not None and not np.allclose(theta, cp.thetaX):
        raise ValueError("theta differs from the simulated parameters")
    T = cp.path.horizon if T is None else T
    if T > cp.path.horizon:
        raise ValueError("T beyond the simulated horizon")
    K = cp.netX.num_reactions
    H = 0.0
    for w, t0, t1 in cp.path.holding(T):
        for k in range(K):
            _, dl = cp.channel_rates(w, k)
            H -= (t1 - t0) * dl[:, i].sum()
    for l, (t, c) in enumerate(zip(cp.path.times[1:], cp.path.channels)):
        if t > T:
            break
        k, j = divmod(int(c), 3)
        lam, dl = cp.channel_rates(cp.path.states[l], k)
        if lam[j] <= 0:
            raise RuntimeError("jump recorded on a coupled channel with zero intensity")
        H += dl[j, i] / lam[j]
    return float(H)


def _check_pair(fX: Functional, fZ: Functional):
    if fX.kind != fZ.kind:
        raise ValueError("functionals must be of the same kind")
    if fX.kind == "integral" and (fX.a != fZ.a or fX.b != fZ.b):
        raise ValueError("functionals must share the window [a, b]")
    if fX.kind == "terminal":
        if fX.T != fZ.T:
            raise ValueError("functionals must share the terminal time")
        if not (fX.theta_free and fZ.theta_free):
            raise ValueError("only parameter-free terminal functions are supported")


def correction_sample(cp: CoupledPath, fX: Functional, fZ: Functional | None = None,
                      theta=None, i: int = 0) -> float:
    """One sample of the coupled correction for parameter ``i``.

    Integral kind: ``int (dF(X) - dF(Z)) + H * int (F(X) - F(Z))``.
    Terminal kind: ``H(T) * (f(X_T) - f(Z_T))``.
    """
    fZ = fX if fZ is None else fZ
    _check_pair(fX, fZ)
    thx, thz = cp.thetaX, cp.thetaZ
    if fX.kind == "terminal":
        H = coupled_lr_weight(cp, theta, i, fX.T)
        return H * (fX.poly(cp.x_at(fX.T)) - fZ.poly(cp.z_at(fX.T)))
    a, b = fX.a, fX.b
    H = coupled_lr_weight(cp, theta, i, b)
    d = cp.d
    diff_f = cp.path.integrate(lambda w: fX.F(thx, w[:d]) - fZ.F(thz, w[d:]), a, b)
    diff_df = cp.path.integrate(lambda w: fX.dF(thx, w[:d], i) - fZ.dF(thz, w[d:], i), a, b)
    return diff_df + H * diff_f


def _perturbed(theta, i, h):
    if h <= 0:
        raise ValueError("step h must be positive")
    theta = np.asarray(theta, dtype=float)
    if theta[i] - h < 0:
        raise ValueError(f"theta[{i}] - h is negative; rates would become negative")
    tp, tm = theta.copy(), theta.copy()
    tp[i] += h
    tm[i] -= h
    return tp, tm


def cfd_sample(net: ReactionNetwork, theta, i: int, h: float, functional: Functional, x0,
               stream=None) -> float:
    """One coupled centered difference ``(f(theta + h e_i) - f(theta - h e_i)) / 2h``."""
    tp, tm = _perturbed(theta, i, h)
    horizon = functional.horizon
    cp = simulate_coupled(net, net, tp, x0, x0, horizon, stream, thetaZ=tm)
    if functional.kind == "terminal":
        return (functional.poly(cp.x_at(functional.T)) - functional.poly(cp.z_at(functional.T))) / (2 * h)
    d = cp.d
    up = cp.path.integrate(lambda w: functional.F(tp, w[:d]), functional.a, functional.b)
    dn = cp.path.integrate(lambda w: functional.F(tm, w[d:]), functional.a, functional.b)
    return (up - dn) / (2 * h)


def cfd_samples(net: ReactionNetwork, theta, i: int, h: float, functional: Functional, x0,
                n: int, seed: int, *, stage: str = "cfd", start: int = 0, workers: int = 1,
                cap: int = 10**8):
    """Batch of ``n`` coupled centered differences; returns ``(samples, stats)``."""
    tp, tm = _perturbed(theta, i, h)
    st = run_paths(net, tp, x0, functional, n, seed, stage=stage, start=start, netz=net,
                   thz=tm, workers=workers, cap=cap)
    if functional.kind == "terminal":
        vals = (st.fx - st.fz) / (2 * h)
    else:
        vals = (st.Lx - st.Lz) / (2 * h)
    return vals, st


def correction_samples(netX: ReactionNetwork, netZ: ReactionNetwork, theta, functional: Functional,
                       x0, n: int, seed: int, *, stage: str = "coupled", start: int = 0,
                       workers: int = 1, cap: int = 10**8):
    """Batch of coupled corrections for every parameter; returns ``(samples (n, R), stats)``."""
    if functional.kind == "terminal" and not functional.theta_free:
        raise ValueError("only parameter-free terminal functions are supported")
    horizon = functional.horizon
    st = run_paths(netX, theta, x0, functional, n, seed, stage=stage, start=start, netz=netZ,
                   thz=theta, t_lr=horizon, lr=True, workers=workers, cap=cap)
    if functional.kind == "terminal":
        vals = st.H * (st.fx - st.fz)[:, None]
    else:
        vals = (st.dFx - st.dFz) + st.H * (st.Lx - st.Lz)[:, None]
    return vals, st


__all__ = [
    "CoupledPath",
    "cfd_sample",
    "cfd_samples",
    "correction_sample",
    "correction_samples",
    "coupled_jump_matrix",
    "coupled_lr_weight",
    "coupled_rates",
    "simulate_coupled",
]
