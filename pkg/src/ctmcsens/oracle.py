"""Ground-truth values: closed forms and a truncated master-equation solver."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.integrate import solve_ivp
from scipy.sparse.linalg import expm_multiply

from . import _kernels as kern
from .model import Clipped, MassAction, MichaelisMenten, ReactionNetwork, box_states, with_theta_check

MAX_LEAK = 1e-4
# central differences amplify leaked mass by the size of the functional over h
SENSITIVITY_MAX_LEAK = 1e-9
MAX_BOX_STATES = 2_000_000


class TruncationError(RuntimeError):
    """The truncation box lost too much probability mass (or is too large)."""

    def __init__(self, msg, leak: float | None = None):
        super().__init__(msg)
        self.leak = leak


@dataclass
class TruncatedDistribution:
    """State probabilities at time ``t`` on a finite box of states."""

    states: np.ndarray
    p: np.ndarray
    box: list
    leak: float
    t: float

    def expect(self, f) -> float:
        """``E[f(X(t))]`` over the box; ``f`` maps an ``(n, d)`` state array to values."""
        vals = np.asarray(f(self.states), dtype=float)
        return float(vals @ self.p)

    def mean(self) -> np.ndarray:
        return self.p @ self.states

    def prob(self, x) -> float:
        x = np.asarray(x)
        hit = np.all(self.states == x, axis=1)
        return float(self.p[hit].sum())


def _assemble(lam, zeta, states, box):
    """Sparse transpose generator from per-state rates and jump vectors, with out-of-box leak."""
    lo = np.array([b[0] for b in box])
    shape = tuple(b[1] - b[0] + 1 for b in box)
    n = len(states)
    rows, cols, vals = [], [], []
    out = lam.sum(axis=1)
    for k in range(len(zeta)):
        nxt = states + zeta[k]
        rel = nxt - lo
        inside = np.all((rel >= 0) & (rel < np.array(shape)), axis=1) & (lam[:, k] > 0)
        src = np.flatnonzero(inside)
        dst = np.ravel_multi_index(tuple(rel[inside].T), shape)
        rows.append(dst)
        cols.append(src)
        vals.append(lam[inside, k])
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(-out)
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


def _generator(net: ReactionNetwork, theta, states, box):
    lam, _ = kern.rates_many(net, theta, states)
    return _assemble(lam, net.zeta, states, box)


def _check_box(box, x0):
    if any(hi < lo for lo, hi in box):
        raise ValueError("empty truncation box")
    if any(not lo <= xi <= hi for xi, (lo, hi) in zip(x0, box)):
        raise ValueError("truncation box must contain the initial state")
    size = int(np.prod([hi - lo + 1 for lo, hi in box], dtype=float))
    if size > MAX_BOX_STATES:
        raise TruncationError(
            f"truncation box has {size} states (limit {MAX_BOX_STATES}); the master equation is infeasible here"
        )


def default_box(net: ReactionNetwork, theta, x0, T, n: int = 200, seed: int = 0, checkpoints: int = 8):
    """Box ``[0, x0 + mean + 10 std]`` per species from short pilot simulations.

    The statistics are taken at several times in ``(0, T]`` so that species
    which rise and fall again are covered.
    """
    from .sim import run_paths

    x0 = np.asarray(x0, dtype=np.int64)
    if T == 0:
        return [(0, int(v)) for v in x0]
    hi = x0.astype(float)
    for j in range(1, checkpoints + 1):
        st = run_paths(net, theta, x0, None, n, seed, stage="oracle-box", start=j * n,
                       horizon=float(T) * j / checkpoints)
        fin = st.final_state
        hi = np.maximum(hi, x0 + fin.mean(axis=0) + 10 * fin.std(axis=0))
        hi = np.maximum(hi, fin.max(axis=0))
    return [(0, int(np.ceil(h))) for h in hi]


def cme_solve(net: ReactionNetwork, theta, x0, T: float, box=None, *, rtol: float = 1e-8,
              atol: float = 1e-14, method: str = "rk45", max_leak: float = MAX_LEAK
              ) -> TruncatedDistribution:
    """Integrate the master equation on a finite box from a point mass at ``x0``.

    Transitions leaving the box are absorbed and reported as leaked mass.
    ``method`` is ``"rk45"`` (adaptive explicit Runge-Kutta) or ``"expm"``
    (action of the matrix exponential).
    """
    theta = with_theta_check(theta, net.param_dim)
    x0 = np.asarray(x0, dtype=np.int64)
    if T < 0:
        raise ValueError("T must be nonnegative")
    if box is None:
        box = default_box(net, theta, x0, T)
    box = [(int(lo), int(hi)) for lo, hi in box]
    _check_box(box, x0)
    states = box_states(box)
    lo = np.array([b[0] for b in box])
    shape = tuple(b[1] - b[0] + 1 for b in box)
    p0 = np.zeros(len(states))
    p0[np.ravel_multi_index(tuple(x0 - lo), shape)] = 1.0
    if T == 0:
        return TruncatedDistribution(states, p0, box, 0.0, 0.0)
    A = _generator(net, theta, states, box)
    if method == "expm":
        p = expm_multiply(A * T, p0)
    elif method == "rk45":
        sol = solve_ivp(lambda t, y: A @ y, (0.0, T), p0, method="RK45", rtol=rtol, atol=atol,
                        t_eval=[T])
        if not sol.success:
            raise RuntimeError(f"master equation integration failed: {sol.message}")
        p = sol.y[:, -1]
    else:
        raise ValueError(f"unknown method {method!r}")
    p = np.clip(p, 0.0, None)
    leak = max(0.0, 1.0 - float(p.sum()))
    if leak > max_leak:
        raise TruncationError(
            f"truncation box leaked {leak:.2e} of the probability mass by t={T}; enlarge the box",
            leak,
        )
    return TruncatedDistribution(states, p, box, leak, float(T))


def _vectorize(f):
    """Accept polynomials, ``(n, d) -> (n,)`` functions, or per-state callables."""
    from .sim import Polynomial

    if isinstance(f, Polynomial):
        return lambda X: np.sum(f.coeffs * np.prod(X[:, None, :].astype(float) ** f.powers, axis=2), axis=1)

    def g(X):
        try:
            v = np.asarray(f(X), dtype=float)
            if v.shape == (len(X),):
                return v
        except Exception:
            pass
        return np.array([f(x) for x in X], dtype=float)

    return g


def _central(evaluate, theta, i, h, box, grow):
    """``(E(theta + h e_i) - E(theta - h e_i)) / 2h``; a default box grows on leaks."""
    tp, tm = theta.copy(), theta.copy()
    tp[i] += h
    tm[i] -= h
    for attempt in range(6):
        try:
            return (evaluate(tp, box) - evaluate(tm, box)) / (2 * h)
        except TruncationError as e:
            if not grow or e.leak is None or attempt == 5:
                raise
            box = [(lo, hi + max(2, (hi - lo) // 2)) for lo, hi in box]


def cme_expectation(net, theta, x0, T, f, box=None, **kw) -> float:
    return cme_solve(net, theta, x0, T, box, **kw).expect(_vectorize(f))


def cme_sensitivity(net: ReactionNetwork, theta, i: int, f, T: float, box=None, x0=None,
                    h: float | None = None, *, method: str = "expm", **kw) -> float:
    """Central difference of master-equation expectations in ``theta[i]``.

    Without an explicit ``box`` the default box is enlarged until the leaked
    mass is below :data:`SENSITIVITY_MAX_LEAK`.
    """
    theta = with_theta_check(theta, net.param_dim)
    kw.setdefault("max_leak", SENSITIVITY_MAX_LEAK)
    if x0 is None:
        raise ValueError("need an initial state")
    if h is None:
        h = 1e-5 * abs(theta[i]) if theta[i] != 0 else 1e-5
    grow = box is None
    if grow:
        box = default_box(net, theta, x0, T)
    g = _vectorize(f)
    return _central(lambda th, b: cme_solve(net, th, x0, T, b, method=method, **kw).expect(g),
                    theta, i, h, box, grow)


# -- path functionals with decay-only species folded into moment equations ---------------


def _base(inten):
    return inten.base if isinstance(inten, Clipped) else inten


def _decay_reactions(net: ReactionNetwork, s: int):
    """Reactions removing ``s`` by first-order decay, or None if ``s`` feeds back into any rate."""
    decay = []
    for k, r in enumerate(net.reactions):
        inten = _base(r.intensity)
        if isinstance(inten, MichaelisMenten) and inten.species == s:
            return None
        if r.nu[s] == 0:
            continue
        lone = r.nu[s] == 1 and sum(r.nu) == 1 and r.zeta[s] == -1 and sum(map(abs, r.zeta)) == 1
        if isinstance(inten, MassAction) and lone:
            decay.append(k)
        else:
            return None
    return decay


def _rate_species(net: ReactionNetwork, k: int) -> set:
    inten = _base(net.reactions[k].intensity)
    dep = {i for i, v in enumerate(net.reactions[k].nu) if v > 0}
    if isinstance(inten, MichaelisMenten):
        dep.add(inten.species)
    return dep


def _outputs(net: ReactionNetwork, functional) -> dict:
    """Species whose means can be carried as extra ODE rows: ``{species: decay reactions}``.

    A species qualifies when it only ever leaves through first-order decay and
    the functional uses it at most linearly (terminal) or not at all (integral).
    """
    cand = {}
    for s in range(net.num_species):
        dec = _decay_reactions(net, s)
        if dec is not None:
            cand[s] = dec
    P = functional.poly.powers
    for t in range(len(P)):
        used = [s for s in cand if P[t, s] > 0]
        linear = functional.kind == "terminal" and len(used) == 1 and P[t].sum() == 1
        if used and not linear:
            for s in used:
                cand.pop(s)
    if functional.kind == "integral" and functional.uses_rates:
        for k in range(net.num_reactions):
            coef_k = functional.flux is not None and functional.flux[k] != 0
            if coef_k or functional.gamma:
                for s in _rate_species(net, k):
                    cand.pop(s, None)
    return cand


def _propagate(M, u, t, method, rtol, atol):
    if t == 0:
        return u
    if method == "expm":
        return expm_multiply(M * t, u)
    if method == "rk45":
        sol = solve_ivp(lambda _, y: M @ y, (0.0, t), u, method="RK45", rtol=rtol, atol=atol,
                        t_eval=[t])
        if not sol.success:
            raise RuntimeError(f"master equation integration failed: {sol.message}")
        return sol.y[:, -1]
    raise ValueError(f"unknown method {method!r}")


def _vector_F(functional, net, theta, full):
    """Integrand values on an array of full states."""
    g = _vectorize(functional.poly)
    val = functional.alpha * g(full) if functional.alpha else np.zeros(len(full))
    if functional.uses_rates:
        lam, _ = kern.rates_many(functional.net, theta, full)
        base = g(full)
        for k in range(functional.net.num_reactions):
            c = np.zeros(len(full))
            if functional.flux is not None:
                c += functional.flux[k]
            if functional.gamma:
                c += functional.gamma * (g(full + functional.net.zeta[k]) - base)
            val = val + c * lam[:, k]
    return val


def functional_expectation(net: ReactionNetwork, theta, functional, x0, box=None, *,
                           method: str = "expm", rtol: float = 1e-8, atol: float = 1e-14,
                           max_leak: float = MAX_LEAK, reduce: bool = True) -> float:
    """``E`` of a terminal or integral path functional from the master equation.

    Species that only leave by first-order decay and that the functional uses
    linearly are dropped from the state box; their means solve one extra
    linear ODE each, driven by the remaining chain.  Integrals accumulate in
    one more row.  ``box`` may cover all species or only the kept ones.
    """
    theta = with_theta_check(theta, net.param_dim)
    if net.state_floor is None:
        raise ValueError("the oracle needs a network on the nonnegative lattice")
    x0 = np.asarray(x0, dtype=np.int64)
    d = net.num_species
    outs = _outputs(net, functional) if reduce else {}
    keep = [s for s in range(d) if s not in outs]
    if not keep:
        keep, outs = [0], {s: v for s, v in outs.items() if s != 0}
    if box is None:
        box = default_box(net, theta, x0, functional.horizon)
    box = [(int(lo), int(hi)) for lo, hi in box]
    if len(box) == d:
        box = [box[s] for s in keep]
    _check_box(box, x0[keep])
    small = box_states(box)
    full = np.zeros((len(small), d), dtype=np.int64)
    full[:, keep] = small
    lam, _ = kern.rates_many(net, theta, full)
    decay = {k for v in outs.values() for k in v}
    moving = [k for k in range(net.num_reactions) if k not in decay]
    A = _assemble(lam[:, moving], net.zeta[moving][:, keep], small, box)
    n = len(small)
    outs_l = sorted(outs)
    extra_rows, diag = [], []
    for s in outs_l:
        extra_rows.append(lam[:, moving] @ net.zeta[moving, s].astype(float))
        diag.append(-sum(theta[_base(net.reactions[k].intensity).k] for k in outs[s]))
    integral = functional.kind == "integral"
    lo = np.array([b[0] for b in box])
    shape = tuple(b[1] - b[0] + 1 for b in box)
    u = np.zeros(n + len(outs_l) + 1)
    u[np.ravel_multi_index(tuple(x0[keep] - lo), shape)] = 1.0
    u[n:n + len(outs_l)] = x0[outs_l]
    m = len(outs_l)

    def system(acc_row):
        blocks = [sparse.hstack([A, sparse.csr_matrix((n, m + 1))])]
        if m:
            C = sparse.csr_matrix(np.array(extra_rows))
            blocks.append(sparse.hstack([C, sparse.diags(diag), sparse.csr_matrix((m, 1))]))
        blocks.append(sparse.hstack([sparse.csr_matrix(acc_row.reshape(1, n)),
                                     sparse.csr_matrix((1, m + 1))]))
        return sparse.vstack(blocks, format="csr")

    if integral:
        u = _propagate(system(np.zeros(n)), u, functional.a, method, rtol, atol)
        u = _propagate(system(_vector_F(functional, net, theta, full)), u,
                       functional.b - functional.a, method, rtol, atol)
    else:
        u = _propagate(system(np.zeros(n)), u, functional.T, method, rtol, atol)
    p = np.clip(u[:n], 0.0, None)
    leak = max(0.0, 1.0 - float(p.sum()))
    if leak > max_leak:
        raise TruncationError(
            f"truncation box leaked {leak:.2e} of the probability mass; enlarge the box", leak
        )
    if integral:
        return float(u[-1])
    # terminal: polynomial part on kept species plus linear output terms
    P, c = functional.poly.powers, functional.poly.coeffs
    val = 0.0
    for t in range(len(P)):
        hit = [j for j, s in enumerate(outs_l) if P[t, s] > 0]
        if hit:
            val += c[t] * u[n + hit[0]]
        else:
            val += c[t] * float(np.prod(full.astype(float) ** P[t], axis=1) @ p)
    return float(val)


def functional_sensitivity(net: ReactionNetwork, theta, functional, x0, i: int, box=None,
                           h: float | None = None, **kw) -> float:
    """Central difference of :func:`functional_expectation` in ``theta[i]``.

    The functional's own rate terms are re-evaluated at the shifted parameters.
    The leak tolerance defaults to :data:`SENSITIVITY_MAX_LEAK`.
    """
    theta = with_theta_check(theta, net.param_dim)
    kw.setdefault("max_leak", SENSITIVITY_MAX_LEAK)
    if h is None:
        h = 1e-5 * abs(theta[i]) if theta[i] != 0 else 1e-5
    grow = box is None
    if grow:
        box = default_box(net, theta, x0, functional.horizon)
    return _central(lambda th, b: functional_expectation(net, th, functional, x0, b, **kw),
                    theta, i, h, box, grow)


def closed_form_birth_death(theta, t: float):
    """Mean of the birth-death count at ``t`` from zero, and its two parameter derivatives."""
    th1, th2 = float(theta[0]), float(theta[1])
    if th2 == 0:
        raise ValueError("closed form needs a positive death rate")
    e = np.exp(-th2 * t)
    mean = th1 / th2 * (1 - e)
    d1 = (1 - e) / th2
    d2 = th1 / th2 * t * e - th1 / th2**2 * (1 - e)
    return mean, d1, d2


def closed_form_switch(theta1: float, a: float, t: float) -> float:
    """Derivative in the decay rate of the mean final-product count (unit conversion rates)."""
    th = float(theta1)
    if th == 0:
        raise ValueError("closed form needs a nonzero decay rate")
    return (
        a * np.exp(-t) / th**2
        - a / (1 + th) ** 2
        - a * np.exp(-(1 + th) * t) * (th**2 * t + th * (t + 2) + 1) / (th**2 * (1 + th) ** 2)
    )


__all__ = [
    "TruncatedDistribution",
    "TruncationError",
    "closed_form_birth_death",
    "closed_form_switch",
    "cme_expectation",
    "cme_sensitivity",
    "cme_solve",
    "default_box",
    "functional_expectation",
    "functional_sensitivity",
]
