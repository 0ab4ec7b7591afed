"""Next-reaction-method simulation with in-loop pathwise derivatives.

The public single-path functions (:func:`simulate`, :func:`simulate_pathwise`)
record the full jump history and are meant for inspection and testing.
Estimators go through :func:`run_paths`, which streams many paths through the
compiled engine and returns one statistics row per path.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as kern
from .model import ReactionNetwork, intensity_eval, intensity_grad, with_theta_check
from .streams import as_bitgen, stage_word

DEFAULT_JUMP_CAP = 10**8
_FP = np.uintp(kern.next_double_address(np.random.Philox(0)))


class ExplosionError(RuntimeError):
    """A path exceeded the jump cap before reaching its horizon."""


# -- functionals -----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Polynomial:
    """``sum_t coeffs[t] * prod_i x_i ** powers[t, i]``."""

    powers: np.ndarray
    coeffs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "powers", np.atleast_2d(np.asarray(self.powers, dtype=np.int64)))
        object.__setattr__(self, "coeffs", np.atleast_1d(np.asarray(self.coeffs, dtype=float)))
        if self.powers.shape[0] != self.coeffs.shape[0]:
            raise ValueError("one coefficient per term")
        if np.any(self.powers < 0):
            raise ValueError("powers must be nonnegative")

    @classmethod
    def species(cls, d: int, i: int, coeff: float = 1.0) -> "Polynomial":
        p = np.zeros((1, d), dtype=np.int64)
        p[0, i] = 1
        return cls(p, [coeff])

    @classmethod
    def constant(cls, d: int, c: float = 1.0) -> "Polynomial":
        return cls(np.zeros((1, d), dtype=np.int64), [c])

    @classmethod
    def zero(cls, d: int) -> "Polynomial":
        return cls(np.zeros((0, d), dtype=np.int64), np.zeros(0))

    @property
    def dim(self) -> int:
        return self.powers.shape[1]

    def __call__(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(np.sum(self.coeffs * np.prod(x ** self.powers, axis=1)))


def species_count(net: ReactionNetwork, name: str | int) -> Polynomial:
    i = name if isinstance(name, (int, np.integer)) else net.index(name)
    return Polynomial.species(net.num_species, int(i))


@dataclass(frozen=True, eq=False)
class Functional:
    """Path functional.

    ``kind == "terminal"``: ``f(X(T))`` with ``f = poly``.

    ``kind == "integral"``: ``int_a^b F(theta, X(s)) ds`` with
    ``F = alpha * P(x) + sum_k lambda_k(theta, x) * (flux_k + gamma * (P(x + zeta_k) - P(x)))``
    where ``P = poly`` and the rates come from ``net``.
    """

    kind: str
    poly: Polynomial
    a: float = 0.0
    b: float = 0.0
    T: float = 0.0
    alpha: float = 0.0
    flux: np.ndarray | None = None
    gamma: float = 0.0
    net: ReactionNetwork | None = None
    offset: float = 0.0
    label: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("terminal", "integral"):
            raise ValueError(f"unknown functional kind {self.kind!r}")
        if self.kind == "integral" and not 0 <= self.a <= self.b:
            raise ValueError("need 0 <= a <= b")
        if self.kind == "terminal" and self.T < 0:
            raise ValueError("T must be nonnegative")
        if self.uses_rates and self.net is None:
            raise ValueError("flux or generator terms need a network")

    @property
    def uses_rates(self) -> bool:
        return self.gamma != 0.0 or (self.flux is not None and np.any(self.flux != 0))

    @property
    def horizon(self) -> float:
        return self.b if self.kind == "integral" else self.T

    @property
    def theta_free(self) -> bool:
        return not self.uses_rates

    def F(self, theta, x) -> float:
        """Integrand value (reference evaluation, one state)."""
        x = np.asarray(x, dtype=np.int64)
        val = self.alpha * self.poly(x) if self.alpha else 0.0
        if self.uses_rates:
            base = self.poly(x)
            for k in range(self.net.num_reactions):
                c = self._coef(k, x, base)
                if c:
                    val += c * intensity_eval(self.net, theta, x, k)
        return float(val)

    def dF(self, theta, x, i: int) -> float:
        """``dF/dtheta_i`` at one state (reference evaluation)."""
        if not self.uses_rates:
            return 0.0
        x = np.asarray(x, dtype=np.int64)
        base = self.poly(x)
        tot = 0.0
        for k in range(self.net.num_reactions):
            c = self._coef(k, x, base)
            if c:
                tot += c * intensity_grad(self.net, theta, x, k, i)
        return float(tot)

    def _coef(self, k, x, base):
        c = 0.0 if self.flux is None else float(self.flux[k])
        if self.gamma:
            c += self.gamma * (self.poly(x + self.net.zeta[k]) - base)
        return c


def terminal_functional(f: Polynomial, T: float, label: str = "") -> Functional:
    return Functional("terminal", f, T=float(T), label=label or "terminal")


def integral_functional(
    poly: Polynomial | None = None,
    a: float = 0.0,
    b: float = 0.0,
    alpha: float = 1.0,
    flux=None,
    net: ReactionNetwork | None = None,
    gamma: float = 0.0,
    label: str = "",
    d: int | None = None,
) -> Functional:
    if poly is None:
        if d is None and net is None:
            raise ValueError("need poly, d or net")
        poly = Polynomial.zero(d if d is not None else net.num_species)
        alpha = 0.0
    if flux is not None:
        flux = np.asarray(flux, dtype=float)
    return Functional("integral", poly, a=float(a), b=float(b), alpha=float(alpha), flux=flux,
                      net=net, gamma=float(gamma), label=label or "integral")


def flux_functional(net: ReactionNetwork, k: int, a: float, b: float) -> Functional:
    """``int_a^b lambda_k(theta, X(s)) ds`` with the rates of ``net``."""
    flux = np.zeros(net.num_reactions)
    flux[k] = 1.0
    return integral_functional(None, a, b, flux=flux, net=net, label=f"flux[{k}]")


def make_gs_functional(net: ReactionNetwork, f: Polynomial, T: float) -> Functional:
    """Generator smoothing: ``int_0^T (A f)(X(s)) ds``.

    The constant ``f(x0)`` that completes the identity
    ``E f(X(T)) = f(x0) + E int_0^T (A f)(X(s)) ds`` is theta-free and is kept
    out of the integrand; add it back when comparing values.
    """
    if T < 0:
        raise ValueError("T must be nonnegative")
    return Functional("integral", f, a=0.0, b=float(T), alpha=0.0, flux=None, gamma=1.0,
                      net=net, label="gs", meta={"T": float(T), "smoothing": "gs"})


def make_rpd_functional(f: Polynomial, T: float, w: float) -> Functional:
    """Window average ``(1/2w) int_{T-w}^{T+w} f(X(s)) ds``."""
    if w <= 0:
        raise ValueError("window w must be positive")
    if w > T:
        raise ValueError("window w must not exceed T")
    return Functional("integral", f, a=float(T - w), b=float(T + w), alpha=1.0 / (2.0 * w),
                      label="rpd", meta={"T": float(T), "w": float(w), "smoothing": "rpd"})


def _pack_fun(fun: Functional | None, drive: ReactionNetwork, coupled: bool, t_term: float):
    d, K = drive.num_species, drive.num_reactions
    zero = Polynomial.zero(d)
    if fun is None or fun.kind == "terminal":
        tp = fun.poly if fun is not None else zero
        integ, a, b = zero, 0.0, 0.0
        alpha, beta, gamma, fnet, use = 0.0, np.zeros(K), 0.0, drive, 0
    else:
        tp = zero
        integ, a, b = fun.poly, fun.a, fun.b
        alpha, gamma = fun.alpha, fun.gamma
        beta = np.zeros(K) if fun.flux is None else np.asarray(fun.flux, dtype=float)
        fnet = fun.net if fun.net is not None else drive
        use = 1 if fun.uses_rates else 0
    if fnet.num_reactions != K or fnet.num_species != d:
        raise ValueError("functional network must match the simulated network's shape")
    shared = 1 if (not coupled and fnet is drive) else 0
    return (integ.powers, integ.coeffs, float(alpha), beta, float(gamma), float(a), float(b),
            fnet.compiled, shared, use, tp.powers, tp.coeffs)


def _coupled_jumps(zeta):
    K, d = zeta.shape
    eta = np.zeros((3 * K, 2 * d), dtype=np.int64)
    for k in range(K):
        eta[3 * k, :d] = zeta[k]
        eta[3 * k, d:] = zeta[k]
        eta[3 * k + 1, :d] = zeta[k]
        eta[3 * k + 2, d:] = zeta[k]
    return eta


@dataclass
class _Setup:
    mode: int
    thx: np.ndarray
    thz: np.ndarray
    w0: np.ndarray
    d: int
    jumps: np.ndarray
    zeta: np.ndarray
    netx: tuple
    netz: tuple
    fun: tuple
    opts: np.ndarray
    layout: dict


def _setup(netx, thx, x0, functional, horizon, *, netz=None, thz=None, z0=None,
           t_lr=None, want_dl=False, want_lr=False, record=False, cap=DEFAULT_JUMP_CAP):
    coupled = netz is not None
    thx = with_theta_check(thx, netx.param_dim)
    d = netx.num_species
    x0 = np.asarray(x0, dtype=np.int64)
    if x0.shape != (d,):
        raise ValueError(f"initial state must have length {d}")
    if horizon < 0 or not np.isfinite(horizon):
        raise ValueError("horizon must be finite and nonnegative")
    if coupled:
        if netz.num_species != d or not np.array_equal(netz.zeta, netx.zeta):
            raise ValueError("coupled networks must share species and reaction vectors")
        thz = thx if thz is None else with_theta_check(thz, netz.param_dim)
        z0 = x0 if z0 is None else np.asarray(z0, dtype=np.int64)
        w0 = np.concatenate([x0, z0])
        jumps = _coupled_jumps(netx.zeta)
        mode = kern.COUPLED
    else:
        netz, thz, w0 = netx, thx, x0.copy()
        jumps = netx.zeta.copy()
        mode = kern.SINGLE
    t_term = functional.T if functional is not None and functional.kind == "terminal" else horizon
    if t_term > horizon:
        raise ValueError("terminal time beyond horizon")
    t_lr = horizon if t_lr is None else float(t_lr)
    if t_lr > horizon:
        raise ValueError("likelihood-ratio time beyond horizon")
    if want_dl and (functional is None or functional.kind != "integral"):
        raise ValueError("pathwise derivatives need an integral functional")
    if want_dl and not np.isclose(functional.b, horizon):
        raise ValueError("pathwise derivatives need horizon == functional upper limit b")
    fun = _pack_fun(functional, netx, coupled, t_term)
    want_fun = functional is not None and functional.kind == "integral"
    opts = np.array([horizon, t_lr, t_term, float(cap), float(want_dl), float(want_lr),
                     float(record), float(want_fun)])
    R = thx.shape[0]
    lay = kern.row_layout(R, w0.shape[0], jumps.shape[0])
    return _Setup(mode, thx, np.asarray(thz, dtype=float), w0, d, jumps, netx.zeta.copy(),
                  netx.compiled, netz.compiled, fun, opts, lay)


def _call_batch(s: _Setup, addrs, out):
    kern.run_batch(s.mode, s.thx, s.thz, s.w0, s.d, s.jumps, s.zeta, s.netx, s.netz, s.fun,
                   s.opts, _FP, addrs, out)


def _run_setup(s: _Setup, n, seed, stage, start=0, workers=1, chunk=2048):
    out = np.zeros((n, s.layout["size"]))
    word = stage_word(seed, stage)

    def work(lo):
        hi = min(lo + chunk, n)
        gens = [np.random.Philox(key=np.array([word, start + i], dtype=np.uint64))
                for i in range(lo, hi)]
        addrs = np.array([g.ctypes.state_address for g in gens], dtype=np.uintp)
        _call_batch(s, addrs, out[lo:hi])
        del gens

    starts = range(0, n, chunk)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(work, starts))
    else:
        for lo in starts:
            work(lo)
    bad = out[:, kern.ST_STATUS] == kern.STATUS_EXPLOSION
    if bad.any():
        raise ExplosionError(
            f"{int(bad.sum())} path(s) exceeded the jump cap of {int(s.opts[3])}"
        )
    return out


@dataclass
class PathStats:
    """Per-path statistics returned by :func:`run_paths` (one row per path)."""

    rows: np.ndarray
    layout: dict
    coupled: bool

    def block(self, name):
        lo, hi = self.layout[name]
        return self.rows[:, lo:hi]

    @property
    def n(self):
        return self.rows.shape[0]

    @property
    def dL(self):
        return self.block("dL")

    @property
    def H(self):
        return self.block("H")

    @property
    def dFx(self):
        return self.block("dFx")

    @property
    def dFz(self):
        return self.block("dFz")

    @property
    def Lx(self):
        return self.rows[:, kern.ST_LX]

    @property
    def Lz(self):
        return self.rows[:, kern.ST_LZ]

    @property
    def fx(self):
        return self.rows[:, kern.ST_FX]

    @property
    def fz(self):
        return self.rows[:, kern.ST_FZ]

    @property
    def valid(self):
        return self.rows[:, kern.ST_VALID] != 0

    @property
    def diverged(self):
        return self.rows[:, kern.ST_DIVERGED] != 0

    @property
    def lambda_violations(self):
        return self.rows[:, kern.ST_LAMBDA_BAD]

    @property
    def jumps(self):
        return self.rows[:, kern.ST_JUMPS]

    @property
    def work(self):
        return self.rows[:, kern.ST_WORK]

    @property
    def final_state(self):
        return self.block("state")

    @property
    def counts(self):
        return self.block("counts")


def run_paths(net, theta, x0, functional, n, seed, *, stage="main", start=0, netz=None,
              thz=None, z0=None, horizon=None, t_lr=None, pathwise=False, lr=False,
              cap=DEFAULT_JUMP_CAP, workers=1) -> PathStats:
    """Simulate ``n`` independent paths (single or coupled) and collect statistics.

    Path ``i`` draws from substream ``(seed, stage, start + i)``.
    """
    if horizon is None:
        if functional is None:
            raise ValueError("need a functional or an explicit horizon")
        horizon = functional.horizon
    s = _setup(net, theta, x0, functional, horizon, netz=netz, thz=thz, z0=z0, t_lr=t_lr,
               want_dl=pathwise, want_lr=lr, cap=cap)
    rows = _run_setup(s, int(n), seed, stage, start=start, workers=workers)
    return PathStats(rows, s.layout, netz is not None)


# -- recorded single paths -------------------------------------------------------------


@dataclass
class Path:
    """Recorded jump history: ``states[l]`` holds on ``[times[l], times[l+1])``."""

    times: np.ndarray
    states: np.ndarray
    channels: np.ndarray
    horizon: float
    num_channels: int
    stats: np.ndarray | None = None

    @property
    def num_jumps(self) -> int:
        return len(self.channels)

    @property
    def jump_times(self) -> np.ndarray:
        return self.times[1:]

    def counts(self, T=None) -> np.ndarray:
        T = self.horizon if T is None else T
        ch = self.channels[self.times[1:] <= T]
        return np.bincount(ch, minlength=self.num_channels)

    def state_at(self, t: float) -> np.ndarray:
        if t < 0 or t > self.horizon:
            raise ValueError("time outside the simulated horizon")
        idx = np.searchsorted(self.times, t, side="right") - 1
        return self.states[idx]

    def holding(self, T=None):
        """Yield ``(state, start, end)`` for each holding interval clipped to ``[0, T]``."""
        T = self.horizon if T is None else T
        ends = np.append(self.times[1:], self.horizon)
        for s, t0, t1 in zip(self.states, self.times, ends):
            if t0 >= T:
                break
            yield s, t0, min(t1, T)

    def integrate(self, F, a: float, b: float) -> float:
        """``int_a^b F(X(s)) ds`` for a callable of the state."""
        tot = 0.0
        for s, t0, t1 in self.holding(b):
            ov = min(t1, b) - max(t0, a)
            if ov > 0:
                tot += F(s) * ov
        return tot


def _record(s: _Setup, bitgen, init_i=None, capacity=256):
    C = s.jumps.shape[0]
    D = s.w0.shape[0]
    init = np.full(C, np.nan) if init_i is None else np.asarray(init_i, dtype=float)
    if init.shape != (C,):
        raise ValueError(f"need {C} first arrivals")
    state0 = bitgen.state
    while True:
        out = np.zeros(s.layout["size"])
        rec_t = np.zeros(capacity)
        rec_c = np.zeros(capacity, dtype=np.int64)
        rec_w = np.zeros((capacity, D), dtype=np.int64)
        kern.run_path(s.mode, s.thx, s.thz, s.w0, s.d, s.jumps, s.zeta, s.netx, s.netz, s.fun,
                      s.opts, _FP, bitgen.ctypes.state_address, init, out, rec_t, rec_c, rec_w,
                      kern.make_workspace(C, s.zeta.shape[0], s.thx.shape[0], D))
        st = out[kern.ST_STATUS]
        if st == kern.STATUS_RECORD_FULL:
            bitgen.state = state0
            capacity *= 4
            continue
        if st == kern.STATUS_EXPLOSION:
            raise ExplosionError(f"path exceeded the jump cap of {int(s.opts[3])}")
        n = int(out[kern.ST_JUMPS])
        times = np.concatenate([[0.0], rec_t[:n]])
        states = np.vstack([s.w0[None, :], rec_w[:n]])
        return Path(times, states, rec_c[:n].copy(), float(s.opts[0]), C, out)


def simulate(net: ReactionNetwork, theta, x0, horizon: float, stream=None, *,
             first_arrivals=None, cap: int = DEFAULT_JUMP_CAP) -> Path:
    """Simulate one path on ``[0, horizon]`` by the next reaction method.

    ``stream`` is a numpy bit generator (or an int seed).  ``first_arrivals``
    overrides the initial internal arrival times ``I_k``.
    """
    s = _setup(net, theta, x0, None, float(horizon), record=True, cap=cap, want_lr=True)
    s.opts[6] = 1.0
    return _record(s, as_bitgen(stream), first_arrivals)


def simulate_pathwise(net: ReactionNetwork, theta, x0, functional: Functional, stream=None, *,
                      first_arrivals=None, cap: int = DEFAULT_JUMP_CAP):
    """Simulate one path and the full gradient ``d/dtheta int_a^b F(theta, Z(s)) ds``.

    Returns ``(path, dL)``; ``dL`` has one entry per parameter.
    """
    if functional.kind != "integral":
        raise ValueError("simulate_pathwise needs an integral functional")
    s = _setup(net, theta, x0, functional, functional.b, want_dl=True, want_lr=True, cap=cap)
    s.opts[6] = 1.0
    path = _record(s, as_bitgen(stream), first_arrivals)
    lo, hi = s.layout["dL"]
    return path, path.stats[lo:hi].copy()


def functional_value(path: Path, functional: Functional, theta) -> float:
    """Value of a functional on a recorded single-network path."""
    if functional.kind == "terminal":
        return functional.poly(path.state_at(functional.T))
    return path.integrate(lambda x: functional.F(theta, x), functional.a, functional.b)


def lr_weight(path: Path, net: ReactionNetwork, theta, i: int, T: float | None = None) -> float:
    """Likelihood-ratio weight ``H_i(theta, T)`` of a recorded path.

    ``sum_{jumps <= T} dlambda_k / lambda_k - int_0^T sum_k dlambda_k ds``.
    """
    T = path.horizon if T is None else T
    if T > path.horizon:
        raise ValueError("T beyond the simulated horizon")
    K = net.num_reactions
    H = 0.0
    for s, t0, t1 in path.holding(T):
        H -= (t1 - t0) * sum(intensity_grad(net, theta, s, k, i) for k in range(K))
    for l, (t, k) in enumerate(zip(path.times[1:], path.channels)):
        if t > T:
            break
        s = path.states[l]
        lam = intensity_eval(net, theta, s, int(k))
        dlam = intensity_grad(net, theta, s, int(k), i)
        if lam <= 0:
            if dlam != 0:
                raise RuntimeError("jump recorded on a channel with zero intensity")
            continue
        H += dlam / lam
    return float(H)


__all__ = [
    "ExplosionError",
    "Functional",
    "Path",
    "PathStats",
    "Polynomial",
    "flux_functional",
    "functional_value",
    "integral_functional",
    "lr_weight",
    "make_gs_functional",
    "make_rpd_functional",
    "run_paths",
    "simulate",
    "simulate_pathwise",
    "species_count",
    "terminal_functional",
]
