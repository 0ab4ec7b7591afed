"""Reaction networks, intensity functions and regularity checks.

Intensities are described structurally (mass action, Michaelis-Menten, or a
clipped wrapper around either) so that parameter gradients are exact and the
same description can be compiled for the simulation kernels.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

MASS_ACTION = 0
MICHAELIS_MENTEN = 1

DEFAULT_DELTA = 1.0
DEFAULT_BIG_M = 1e6


class ConfigurationError(ValueError):
    """A network or intensity description is inconsistent."""


class ValidationError(ValueError):
    """A constructed network violates a required regularity condition."""


@dataclass(frozen=True)
class MassAction:
    """``theta[k] * prod_i x_i! / (x_i - nu_i)!`` with the rate constant ``theta[k]``."""

    k: int


@dataclass(frozen=True)
class MichaelisMenten:
    """``theta[num] * x_s / (theta[sat] + x_s)`` for substrate species ``s``."""

    num: int
    sat: int
    species: int


@dataclass(frozen=True)
class Clipped:
    """Clipped wrapper used by the approximate process.

    When a source species is below its requirement the rate is replaced by
    the floor value (unless ``exempt``); mass-action rates are capped at
    ``theta[k] * M``.
    """

    base: MassAction | MichaelisMenten
    delta: float = DEFAULT_DELTA
    M: float = DEFAULT_BIG_M
    exempt: bool = False


IntensitySpec = MassAction | MichaelisMenten | Clipped


@dataclass(frozen=True)
class Reaction:
    zeta: tuple[int, ...]
    nu: tuple[int, ...]
    intensity: IntensitySpec
    name: str = ""


@dataclass(frozen=True)
class ReactionNetwork:
    """A CTMC reaction network on the integer lattice.

    ``state_floor`` is ``0`` for a biochemical process (every rate vanishes
    off the nonnegative orthant) and ``None`` for an approximate process that
    may visit negative counts.
    """

    species: tuple[str, ...]
    reactions: tuple[Reaction, ...]
    param_dim: int
    state_floor: int | None = 0
    param_names: tuple[str, ...] = ()

    def __post_init__(self):
        d = len(self.species)
        if d < 1 or len(self.reactions) < 1:
            raise ConfigurationError("network needs at least one species and one reaction")
        if self.param_dim < 1:
            raise ConfigurationError("param_dim must be positive")
        for k, r in enumerate(self.reactions):
            if len(r.zeta) != d or len(r.nu) != d:
                raise ConfigurationError(f"reaction {k}: vectors must have length {d}")
            if any(v < 0 for v in r.nu):
                raise ConfigurationError(f"reaction {k}: source vector must be nonnegative")
            for idx in _param_indices(r.intensity):
                if not 0 <= idx < self.param_dim:
                    raise ConfigurationError(
                        f"reaction {k}: unknown parameter index {idx} (param_dim={self.param_dim})"
                    )
            base = r.intensity.base if isinstance(r.intensity, Clipped) else r.intensity
            if isinstance(base, MichaelisMenten) and not 0 <= base.species < d:
                raise ConfigurationError(f"reaction {k}: bad substrate index {base.species}")

    @property
    def num_species(self) -> int:
        return len(self.species)

    @property
    def num_reactions(self) -> int:
        return len(self.reactions)

    @cached_property
    def zeta(self) -> np.ndarray:
        return np.array([r.zeta for r in self.reactions], dtype=np.int64)

    @cached_property
    def nu(self) -> np.ndarray:
        return np.array([r.nu for r in self.reactions], dtype=np.int64)

    @cached_property
    def compiled(self):
        """Array encoding consumed by the simulation kernels."""
        K, d = self.num_reactions, self.num_species
        spec = np.zeros((K, 5), dtype=np.int64)
        par = np.empty((K, 2), dtype=np.float64)
        par[:, 0] = DEFAULT_DELTA
        par[:, 1] = np.inf
        for k, r in enumerate(self.reactions):
            inten = r.intensity
            if isinstance(inten, Clipped):
                par[k] = inten.delta, inten.M
                spec[k, 4] = 0 if inten.exempt else 1
                inten = inten.base
            if isinstance(inten, MassAction):
                spec[k, :4] = MASS_ACTION, inten.k, -1, -1
            else:
                spec[k, :4] = MICHAELIS_MENTEN, inten.num, inten.sat, inten.species
        sfloor = 0 if self.state_floor is None else 1
        return spec, self.nu.copy(), par, sfloor

    def index(self, name: str) -> int:
        return self.species.index(name)


def _param_indices(inten: IntensitySpec) -> tuple[int, ...]:
    if isinstance(inten, Clipped):
        return _param_indices(inten.base)
    if isinstance(inten, MassAction):
        return (inten.k,)
    return (inten.num, inten.sat)


def network_from_reactions(
    species: Sequence[str],
    reactions: Iterable[tuple],
    param_dim: int,
    param_names: Sequence[str] = (),
) -> ReactionNetwork:
    """Build a network from ``(reactants, products, intensity[, name])`` tuples.

    Reactants and products map species names to stoichiometric coefficients.
    """
    species = tuple(species)
    rs = []
    for item in reactions:
        reactants, products, inten = item[:3]
        name = item[3] if len(item) > 3 else ""
        nu = [0] * len(species)
        nup = [0] * len(species)
        for side, vec in ((reactants, nu), (products, nup)):
            for s, c in side.items():
                if s not in species:
                    raise ConfigurationError(f"unknown species {s!r}")
                vec[species.index(s)] += int(c)
        zeta = tuple(b - a for a, b in zip(nu, nup))
        rs.append(Reaction(zeta=zeta, nu=tuple(nu), intensity=inten, name=name))
    return ReactionNetwork(species, tuple(rs), param_dim, 0, tuple(param_names))


# -- intensity evaluation (reference implementation, one state at a time) ----------


def _base_eval(base, nu, theta, x):
    """Rate and gradient dict of an unclipped intensity; ``short`` handled by caller."""
    if isinstance(base, MassAction):
        g = 1.0
        for xi, ni in zip(x, nu):
            for m in range(ni):
                g *= xi - m
        return theta[base.k] * g, {base.k: g}
    xs = x[base.species]
    den = theta[base.sat] + xs
    lam = theta[base.num] * xs / den
    return lam, {base.num: xs / den, base.sat: -theta[base.num] * xs / den**2}


def _floor_eval(base, delta, theta):
    if isinstance(base, MassAction):
        return theta[base.k] * delta, {base.k: delta}
    den = theta[base.sat] + delta
    return theta[base.num] * delta / den, {
        base.num: delta / den,
        base.sat: -theta[base.num] * delta / den**2,
    }


def _eval_with_grad(net: ReactionNetwork, theta, x, k: int):
    if not 0 <= k < net.num_reactions:
        raise ConfigurationError(f"reaction index {k} out of range")
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (net.param_dim,):
        raise ConfigurationError(f"theta must have length {net.param_dim}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    x = [int(v) for v in x]
    r = net.reactions[k]
    if net.state_floor is not None and any(v < net.state_floor for v in x):
        return 0.0, {}
    inten = r.intensity
    clip = inten if isinstance(inten, Clipped) else None
    base = clip.base if clip else inten
    short = any(n > 0 and xi < n for xi, n in zip(x, r.nu))
    if short:
        if clip is not None and not clip.exempt:
            return _floor_eval(base, clip.delta, theta)
        return 0.0, {}
    lam, grad = _base_eval(base, r.nu, theta, x)
    if clip is not None and isinstance(base, MassAction):
        cap = theta[base.k] * clip.M
        if lam >= cap:
            return cap, {base.k: clip.M}
    return lam, grad


def intensity_eval(net: ReactionNetwork, theta, x, k: int) -> float:
    """Intensity ``lambda_k(theta, x)``."""
    return float(_eval_with_grad(net, theta, x, k)[0])


def intensity_grad(net: ReactionNetwork, theta, x, k: int, i: int) -> float:
    """Partial derivative of ``lambda_k(theta, x)`` with respect to ``theta[i]``.

    The derivative follows whichever floor/ceiling branch ``intensity_eval``
    selects at ``(theta, x)``.
    """
    if not 0 <= i < net.param_dim:
        raise ConfigurationError(f"parameter index {i} out of range")
    return float(_eval_with_grad(net, theta, x, k)[1].get(i, 0.0))


def rates(net: ReactionNetwork, theta, x) -> np.ndarray:
    return np.array([intensity_eval(net, theta, x, k) for k in range(net.num_reactions)])


def generator_apply(net: ReactionNetwork, theta, f, x) -> float:
    """``(A f)(x) = sum_k lambda_k(theta, x) (f(x + zeta_k) - f(x))``."""
    x = np.asarray(x, dtype=np.int64)
    fx = f(x)
    return float(
        sum(intensity_eval(net, theta, x, k) * (f(x + net.zeta[k]) - fx) for k in range(net.num_reactions))
    )


# -- approximate process -------------------------------------------------------------


def build_approx_process(
    net: ReactionNetwork,
    delta: float | Sequence[float] = DEFAULT_DELTA,
    M: float = DEFAULT_BIG_M,
    exempt: Iterable[int] = (),
    theta=None,
    scan=None,
) -> ReactionNetwork:
    """Construct the non-interruptive approximate network ``Z``.

    Every reaction is wrapped in :class:`Clipped`.  Non-exempt reactions get a
    floor value whenever a source species is short; exempt reactions keep their
    zero there.  Mass-action rates are capped at ``theta_k * M``.  The state
    floor is dropped so ``Z`` may wander into negative counts.

    If ``theta`` is given the result is checked for interruptions on ``scan``
    (default: a box around the lattice boundary) and a :class:`ValidationError`
    names the offending reactions.
    """
    K = net.num_reactions
    deltas = np.broadcast_to(np.asarray(delta, dtype=float), (K,))
    if np.any(deltas <= 0):
        raise ValueError("delta must be positive")
    if M <= 0:
        raise ValueError("M must be positive")
    exempt = set(int(e) for e in exempt)
    if not exempt <= set(range(K)):
        raise ConfigurationError(f"exempt indices out of range: {sorted(exempt)}")
    rs = []
    for k, r in enumerate(net.reactions):
        base = r.intensity.base if isinstance(r.intensity, Clipped) else r.intensity
        # A source-free reaction is never short, so it is never floored.
        ex = k in exempt or not any(r.nu)
        rs.append(Reaction(r.zeta, r.nu, Clipped(base, float(deltas[k]), float(M), ex), r.name))
    z = ReactionNetwork(net.species, tuple(rs), net.param_dim, None, net.param_names)
    if theta is not None:
        rep = check_non_interruptive(z, theta, scan if scan is not None else boundary_box(z))
        if not rep.non_interruptive:
            bad = sorted({(k, l) for _, k, l in rep.violations})
            raise ValidationError(
                "approximate process is interruptive; (interrupting, interrupted) reaction pairs: "
                + ", ".join(f"({k},{l})" for k, l in bad)
            )
    return z


def boundary_box(net: ReactionNetwork, x0=None) -> list[tuple[int, int]]:
    """Small box straddling the lattice boundary, where rates can vanish."""
    m = int(net.nu.max()) + 2
    box = []
    for i in range(net.num_species):
        hi = m
        if x0 is not None:
            hi = max(hi, int(x0[i]) + m)
        box.append((-m if net.state_floor is None else 0, hi))
    return box


# -- regularity conditions ------------------------------------------------------------


@dataclass(frozen=True)
class ConditionReport:
    non_interruptive: bool
    violations: tuple[tuple[tuple[int, ...], int, int], ...]
    growth_partition: tuple[tuple[int, ...], tuple[int, ...]]
    gamma_max: float
    gamma_min: float
    gamma_prime: float
    kink_compatible: bool | None = None
    notes: tuple[str, ...] = field(default=())


def growth_partition(net: ReactionNetwork) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Split reactions into population-increasing (``1.zeta > 0``) and the rest."""
    tot = net.zeta.sum(axis=1)
    r1 = tuple(int(k) for k in np.flatnonzero(tot > 0))
    r2 = tuple(int(k) for k in np.flatnonzero(tot <= 0))
    return r1, r2


def box_states(box) -> np.ndarray:
    if len(box) == 0 or any(hi < lo for lo, hi in box):
        raise ValueError("scan region is empty")
    axes = [np.arange(lo, hi + 1, dtype=np.int64) for lo, hi in box]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1)


def check_non_interruptive(
    net: ReactionNetwork,
    theta,
    scan,
    reference: ReactionNetwork | None = None,
    max_violations: int = 1000,
) -> ConditionReport:
    """Scan a finite box of states for interruptions and observed rate bounds.

    For every state ``x`` in the box and every pair ``k != l`` of active
    channels, ``lambda_l(x + zeta_k)`` must stay positive.  When ``reference``
    (the original network) is given, also checks that wherever the two
    networks' rates tie, their parameter gradients tie as well.
    """
    from ._kernels import rates_many

    states = box_states(scan)
    theta = np.asarray(theta, dtype=float)
    lam, dlam = rates_many(net, theta, states)
    K = net.num_reactions
    violations = []
    for k in range(K):
        act_k = lam[:, k] > 0
        if not act_k.any():
            continue
        nxt = states[act_k] + net.zeta[k]
        lam_next, _ = rates_many(net, theta, nxt)
        for l in range(K):
            if l == k:
                continue
            both = lam[act_k, l] > 0
            bad = both & ~(lam_next[:, l] > 0)
            for x in states[act_k][bad][: max_violations - len(violations)]:
                violations.append((tuple(int(v) for v in x), k, l))
    pos = lam[lam > 0]
    kink = None
    if reference is not None:
        kink = _check_kinks(reference, net, theta, states)
    return ConditionReport(
        non_interruptive=not violations,
        violations=tuple(violations),
        growth_partition=growth_partition(net),
        gamma_max=float(lam.max()) if lam.size else 0.0,
        gamma_min=float((1.0 / pos).max()) if pos.size else 0.0,
        gamma_prime=float(np.abs(dlam).max()) if dlam.size else 0.0,
        kink_compatible=kink,
    )


def _check_kinks(netx, netz, theta, states, max_pairs=2_000_000, rtol=1e-12) -> bool:
    """Rates that tie across the two networks must have tying gradients."""
    from ._kernels import rates_many

    lx, dx = rates_many(netx, theta, states)
    lz, dz = rates_many(netz, theta, states)
    n = len(states)
    if n * n <= max_pairs:
        ix, iz = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        ix, iz = ix.ravel(), iz.ravel()
    else:
        rng = np.random.default_rng(0)
        ix = np.concatenate([np.arange(n), rng.integers(0, n, max_pairs)])
        iz = np.concatenate([np.arange(n), rng.integers(0, n, max_pairs)])
    for k in range(netx.num_reactions):
        a, b = lx[ix, k], lz[iz, k]
        tie = np.isclose(a, b, rtol=rtol, atol=0.0)
        if tie.any() and not np.allclose(dx[ix[tie], k], dz[iz[tie], k], rtol=1e-9, atol=1e-12):
            return False
    return True


def rates_nonnegative(net: ReactionNetwork, theta, states) -> bool:
    from ._kernels import rates_many

    lam, _ = rates_many(net, theta, np.asarray(states, dtype=np.int64))
    return bool(np.all(lam >= 0) and np.all(np.isfinite(lam)))


def with_theta_check(theta, param_dim: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (param_dim,):
        raise ConfigurationError(f"theta must have length {param_dim}, got {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    return theta


__all__ = [
    "Clipped",
    "ConditionReport",
    "ConfigurationError",
    "MassAction",
    "MichaelisMenten",
    "Reaction",
    "ReactionNetwork",
    "ValidationError",
    "boundary_box",
    "box_states",
    "build_approx_process",
    "check_non_interruptive",
    "generator_apply",
    "growth_partition",
    "intensity_eval",
    "intensity_grad",
    "network_from_reactions",
    "rates",
]
