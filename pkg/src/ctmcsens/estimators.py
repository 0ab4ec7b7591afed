"""Monte Carlo sensitivity estimators: LR, LR with control variate, pathwise, hybrid, CFD.

Every estimator returns an :class:`Estimate` covering the full parameter
gradient (one component per parameter) unless noted otherwise.  Sampling is
reproducible: path ``j`` of stage ``s`` always draws from the substream keyed by
``(seed, s, j)``, independent of batch size and worker count.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .couple import cfd_samples, correction_samples
from .model import (
    DEFAULT_BIG_M,
    DEFAULT_DELTA,
    ReactionNetwork,
    boundary_box,
    build_approx_process,
    check_non_interruptive,
)
from .sim import (
    Functional,
    make_gs_functional,
    make_rpd_functional,
    run_paths,
)
from .streams import substream

Z95 = 1.96
DEFAULT_PILOT = 500
DEFAULT_MAX_SAMPLES = 10**7


class InterruptionWarning(RuntimeWarning):
    """Pathwise derivatives requested on a network that can interrupt itself."""


@dataclass
class Estimate:
    """Sample mean with its estimator variance and 95% half-width (arrays allowed)."""

    mean: np.ndarray | float
    est_variance: np.ndarray | float
    n: int
    cpu_seconds: float = 0.0
    work: float = 0.0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.est_variance = np.maximum(np.asarray(self.est_variance, dtype=float), 0.0)
        if self.mean.ndim == 0:
            self.mean = float(self.mean)
            self.est_variance = float(self.est_variance)

    @property
    def halfwidth(self):
        return Z95 * np.sqrt(self.est_variance)

    @property
    def stderr(self):
        return np.sqrt(self.est_variance)

    def __getitem__(self, i) -> "Estimate":
        return Estimate(np.asarray(self.mean)[i], np.asarray(self.est_variance)[i], self.n,
                        self.cpu_seconds, self.work)

    def __len__(self):
        return np.size(self.mean)

    def covers(self, value, k: float = Z95) -> bool | np.ndarray:
        ok = np.abs(np.asarray(self.mean) - value) <= k * np.sqrt(self.est_variance)
        return bool(ok) if np.ndim(ok) == 0 else ok

    def __add__(self, other: "Estimate") -> "Estimate":
        """Sum of two independent estimates."""
        return Estimate(np.asarray(self.mean) + other.mean, np.asarray(self.est_variance) + other.est_variance,
                        self.n + other.n, self.cpu_seconds + other.cpu_seconds, self.work + other.work)


def summarize(samples, cpu_seconds: float = 0.0, work: float = 0.0) -> Estimate:
    """Estimate from an ``(n,)`` or ``(n, R)`` sample array."""
    x = np.asarray(samples, dtype=float)
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two samples for a variance")
    return Estimate(x.mean(axis=0), x.var(axis=0, ddof=1) / n, n, cpu_seconds, work)


def monte_carlo(sampler, n: int, seed: int, *, stage: str = "mc", start: int = 0) -> Estimate:
    """Average ``sampler(rng)`` over ``n`` independent substreams.

    ``rng`` is a ``numpy.random.Generator`` on substream ``(seed, stage, start + j)``.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    t0 = time.process_time()
    vals = [np.atleast_1d(np.asarray(sampler(np.random.Generator(substream(seed, start + j, stage))),
                                     dtype=float)) for j in range(n)]
    out = np.array(vals)
    if out.shape[1] == 1:
        out = out[:, 0]
    return summarize(out, time.process_time() - t0)


# -- likelihood ratio ---------------------------------------------------------------------


def _lr_samples(net, theta, functional, x0, n, seed, stage, start=0, workers=1, cap=10**8):
    t0 = time.process_time()
    st = run_paths(net, theta, x0, functional, n, seed, stage=stage, start=start,
                   t_lr=functional.horizon, lr=True, workers=workers, cap=cap)
    H = st.H
    if functional.kind == "terminal":
        if not functional.theta_free:
            raise ValueError("only parameter-free terminal functions are supported")
        g = st.fx[:, None] * H
    else:
        g = st.dFx + st.Lx[:, None] * H
    return g, H, time.process_time() - t0, st.work.sum()


def lr_estimate(net: ReactionNetwork, theta, functional: Functional, x0, n: int, seed: int = 0,
                *, workers: int = 1, cap: int = 10**8) -> Estimate:
    """Plain likelihood-ratio estimate of the full gradient."""
    g, _, cpu, work = _lr_samples(net, theta, functional, x0, n, seed, "lr", workers=workers, cap=cap)
    return summarize(g, cpu, work)


def _cv_beta(g, H):
    gc = g - g.mean(axis=0)
    Hc = H - H.mean(axis=0)
    vh = (Hc * Hc).sum(axis=0)
    cov = (gc * Hc).sum(axis=0)
    return np.where(vh > 0, cov / np.where(vh > 0, vh, 1.0), 0.0)


@dataclass
class LRCVResult:
    estimate: Estimate
    plain: Estimate
    beta: np.ndarray


def lr_cv_estimate(net: ReactionNetwork, theta, functional: Functional, x0, n: int, seed: int = 0,
                   *, two_phase: int = 0, workers: int = 1, full: bool = False, cap: int = 10**8):
    """Likelihood ratio with the weight itself as a control variate.

    The coefficient ``beta = cov(g, H) / var(H)`` is estimated from the same
    samples by default (small O(1/n) bias); ``two_phase > 0`` estimates it from
    that many separate pilot paths instead.  A component with ``var(H) = 0``
    falls back to plain LR.
    """
    g, H, cpu, work = _lr_samples(net, theta, functional, x0, n, seed, "lr", workers=workers, cap=cap)
    if two_phase:
        gp, Hp, cpu_p, work_p = _lr_samples(net, theta, functional, x0, two_phase, seed, "lr-beta",
                                            workers=workers, cap=cap)
        beta = _cv_beta(gp, Hp)
        cpu += cpu_p
        work += work_p
    else:
        beta = _cv_beta(g, H)
    est = summarize(g - beta * H, cpu, work)
    if full:
        return LRCVResult(est, summarize(g, cpu, work), beta)
    return est


# -- pathwise -----------------------------------------------------------------------------


def pathwise_estimate(netZ: ReactionNetwork, theta, functional: Functional, x0, n: int,
                      seed: int = 0, *, stage: str = "pathwise", check: bool = True,
                      workers: int = 1, full: bool = False, cap: int = 10**8):
    """Average pathwise derivative over ``n`` paths (full gradient in one pass).

    Only unbiased when ``netZ`` cannot interrupt itself.  The check runs on a
    box around the lattice boundary and warns rather than raises, so that the
    bias on interruptive networks can be demonstrated.
    """
    if functional.kind != "integral":
        raise ValueError("pathwise estimates need an integral (smoothed) functional")
    if check:
        rep = check_non_interruptive(netZ, theta, boundary_box(netZ))
        if not rep.non_interruptive:
            pairs = sorted({(k, l) for _, k, l in rep.violations})
            warnings.warn(f"network is interruptive (reaction pairs {pairs[:6]}); "
                          "pathwise estimates are biased", InterruptionWarning, stacklevel=2)
    t0 = time.process_time()
    st = run_paths(netZ, theta, x0, functional, n, seed, stage=stage, pathwise=True,
                   workers=workers, cap=cap)
    est = summarize(st.dL, time.process_time() - t0, st.work.sum())
    return (est, st) if full else est


# -- allocation ---------------------------------------------------------------------------


@dataclass
class AllocationPlan:
    """Variance-optimal split of work between coupled and pathwise samples."""

    v_l: float
    c_l: float
    v_p: float
    c_p: float
    delta: float
    target_var_l: float
    target_var_p: float
    n_l: int
    n_p: int
    all_valid: bool = False
    notes: list = field(default_factory=list)

    @property
    def pathwise_fraction(self) -> float:
        return self.n_p / max(self.n_l + self.n_p, 1)


def _ceil_div(v, target):
    # guard against round-off pushing an exact ratio just above an integer
    return max(int(math.ceil(v / target * (1 - 1e-12))), 1)


def allocate(v_l: float, c_l: float, v_p: float, c_p: float, delta: float) -> AllocationPlan:
    """Minimise expected cost ``n_l c_l + n_p c_p`` subject to ``v_l/n_l + v_p/n_p = delta``."""
    for name, v in (("v_l", v_l), ("c_l", c_l), ("v_p", v_p), ("c_p", c_p), ("delta", delta)):
        if not v > 0:
            raise ValueError(f"{name} must be positive, got {v}")
    sl = math.sqrt(v_l * c_l)
    sp = math.sqrt(v_p * c_p)
    tl = delta * sl / (sp + sl)
    tp = delta - tl
    return AllocationPlan(v_l, c_l, v_p, c_p, delta, tl, tp, _ceil_div(v_l, tl), _ceil_div(v_p, tp))


def target_variance(epsilon: float) -> float:
    """Variance whose 95% half-width is ``epsilon``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return (epsilon / Z95) ** 2


# -- hybrid -------------------------------------------------------------------------------


@dataclass
class HybridResult:
    estimate: Estimate
    plan: AllocationPlan
    coupled: Estimate
    pathwise: Estimate
    netZ: ReactionNetwork
    pilot_cpu_seconds: float
    divergence_fraction: float
    valid_fraction: float
    alloc_index: int
    rounds: int = 1
    notes: list = field(default_factory=list)

    @property
    def n_coupled(self) -> int:
        return self.coupled.n

    @property
    def n_pathwise(self) -> int:
        return self.pathwise.n


def smoothed_functional(functional: Functional, netZ: ReactionNetwork, smoothing: str = "gs",
                        w: float | None = None) -> Functional:
    """Differentiable stand-in for ``functional`` used by the pathwise part."""
    if functional.kind == "integral":
        return functional
    if smoothing == "gs":
        return make_gs_functional(netZ, functional.poly, functional.T)
    if smoothing == "rpd":
        if w is None:
            w = 0.1 * functional.T
        return make_rpd_functional(functional.poly, functional.T, w)
    raise ValueError(f"unknown smoothing {smoothing!r}")


class _Sampler:
    """Incremental draws from the two independent parts of the hybrid estimator."""

    def __init__(self, netX, netZ, theta, fcorr, fpath, x0, seed, workers, cost, cap):
        self.args = (netX, netZ, theta, fcorr, fpath, x0, seed)
        self.workers = workers
        self.cost = cost
        self.cap = cap
        self.V = []
        self.P = []
        self.Vcost = 0.0
        self.Pcost = 0.0
        self.cpu = 0.0
        self.diverged = 0
        self.valid = 0

    def _cost(self, cpu, st):
        return cpu if self.cost == "cpu" else float(st.work.sum())

    def coupled(self, n, stage="coupled"):
        netX, netZ, theta, fcorr, _, x0, seed = self.args
        start = sum(len(v) for v in self.V) if stage == "coupled" else 0
        t0 = time.process_time()
        vals, st = correction_samples(netX, netZ, theta, fcorr, x0, n, seed, stage=stage,
                                      start=start, workers=self.workers, cap=self.cap)
        cpu = time.process_time() - t0
        self.cpu += cpu
        return vals, self._cost(cpu, st), st

    def pathwise(self, n, stage="pathwise"):
        netX, netZ, theta, _, fpath, x0, seed = self.args
        start = sum(len(v) for v in self.P) if stage == "pathwise" else 0
        t0 = time.process_time()
        st = run_paths(netZ, theta, x0, fpath, n, seed, stage=stage, start=start, pathwise=True,
                       workers=self.workers, cap=self.cap)
        cpu = time.process_time() - t0
        self.cpu += cpu
        return st.dL, self._cost(cpu, st), st


def hybrid_estimate(netX: ReactionNetwork, theta, functional: Functional, x0, *,
                    smoothing: str = "gs", w: float | None = None,
                    delta=DEFAULT_DELTA, M: float = DEFAULT_BIG_M, exempt=(),
                    epsilon: float | None = None, n: int | None = None, seed: int = 0,
                    alloc_index: int = 0, pilot: int = DEFAULT_PILOT, cost: str = "work",
                    max_samples: int = DEFAULT_MAX_SAMPLES, max_rounds: int = 10,
                    netZ: ReactionNetwork | None = None, workers: int = 1,
                    cap: int = 10**8) -> HybridResult:
    """Hybrid estimate ``Q_X = Q_{X-Z} + Q_Z`` of the full gradient.

    ``Q_Z`` averages pathwise derivatives on the clipped approximate process;
    ``Q_{X-Z}`` averages coupled likelihood-ratio corrections.  Sample sizes
    come from a pilot of ``pilot`` draws of each kind and the variance-optimal
    allocation for component ``alloc_index``.  With ``epsilon`` the run tops
    up until that component's 95% half-width is at most ``epsilon`` (or
    ``max_samples`` is reached); with ``n`` the total sample count is fixed.

    Terminal functionals ``f(X(T))`` use the terminal correction
    ``H(T) (f(X_T) - f(Z_T))`` and a GS or RPD smoothed pathwise part.
    Integral functionals use the same integrand in both parts.
    """
    if epsilon is None and n is None:
        raise ValueError("give either a target half-width epsilon or a sample count n")
    if epsilon is not None and n is not None:
        raise ValueError("give only one of epsilon and n")
    if cost not in ("work", "cpu"):
        raise ValueError("cost must be 'work' or 'cpu'")
    if pilot < 2:
        raise ValueError("pilot must be at least 2")
    theta = np.asarray(theta, dtype=float)
    x0 = np.asarray(x0, dtype=np.int64)
    t_start = time.process_time()
    if netZ is None:
        netZ = build_approx_process(netX, delta, M, exempt, theta=theta)
    fpath = smoothed_functional(functional, netZ, smoothing, w)
    notes = []
    if fpath.meta.get("smoothing") == "rpd":
        notes.append("RPD smoothing: biased by the window width")
    smp = _Sampler(netX, netZ, theta, functional, fpath, x0, seed, workers, cost, cap)

    # pilot
    Vp, cl, st_l = smp.coupled(pilot, stage="pilot-coupled")
    Pp, cp_, st_p = smp.pathwise(pilot, stage="pilot-pathwise")
    pilot_cpu = time.process_time() - t_start
    j = alloc_index
    v_l = float(np.var(Vp[:, j], ddof=1))
    v_p = float(np.var(Pp[:, j], ddof=1))
    c_l = cl / pilot
    c_p = cp_ / pilot
    all_valid = bool(st_p.valid.all())
    tiny = 1e-300

    if all_valid:
        # every pilot Z-path is a valid realization of X: keep the pilot corrections
        smp.V.append(Vp)
        smp.Vcost += cl
        if epsilon is not None:
            delta_t = target_variance(epsilon)
            tl = min(v_l / pilot, 0.5 * delta_t)
            tp = delta_t - tl
            n_p = _ceil_div(max(v_p, tiny), tp)
        else:
            delta_t = float("nan")
            tl, tp = v_l / pilot, float("nan")
            n_p = max(int(n) - pilot, 2)
        plan = AllocationPlan(v_l, c_l, v_p, c_p, delta_t, tl, tp, pilot, n_p, True,
                              ["all pilot Z-paths valid: corrections taken from the pilot"])
    elif epsilon is not None:
        plan = allocate(max(v_l, tiny), c_l, max(v_p, tiny), c_p, target_variance(epsilon))
    else:
        # split n samples in the cost-optimal ratio n_l / n_p = sqrt(v_l c_p / (v_p c_l))
        r = math.sqrt(max(v_l, tiny) * c_p / (max(v_p, tiny) * c_l))
        n_l = min(max(int(round(n * r / (1 + r))), 2), n - 2)
        n_p = n - n_l
        plan = AllocationPlan(v_l, c_l, v_p, c_p, float("nan"), v_l / n_l, v_p / n_p, n_l, n_p)
    plan.n_l = min(plan.n_l, max_samples)
    plan.n_p = min(plan.n_p, max_samples)

    def draw(n_l, n_p):
        if n_l > 0:
            v, c, st = smp.coupled(n_l)
            smp.V.append(v)
            smp.Vcost += c
            smp.diverged += int(st.diverged.sum())
        if n_p > 0:
            p, c, st = smp.pathwise(n_p)
            smp.P.append(p)
            smp.Pcost += c
            smp.valid += int(st.valid.sum())

    draw(0 if all_valid else plan.n_l, plan.n_p)
    rounds = 1
    while epsilon is not None and rounds < max_rounds:
        V = np.concatenate(smp.V)
        P = np.concatenate(smp.P)
        var = np.var(V[:, j], ddof=1) / len(V) + np.var(P[:, j], ddof=1) / len(P)
        if Z95 * math.sqrt(var) <= epsilon:
            break
        if len(V) + len(P) >= 2 * max_samples:
            notes.append("sample cap reached before the target half-width")
            break
        vl, vp = float(np.var(V[:, j], ddof=1)), float(np.var(P[:, j], ddof=1))
        target = target_variance(epsilon)
        if all_valid:
            more_l = 0
            more_p = _ceil_div(max(vp, tiny), max(target - vl / len(V), 0.5 * target)) - len(P)
        else:
            new = allocate(max(vl, tiny), c_l, max(vp, tiny), c_p, target)
            more_l = new.n_l - len(V)
            more_p = new.n_p - len(P)
        if more_l <= 0 and more_p <= 0:
            # the plan says enough but the half-width disagrees: grow both parts by 10%
            more_l = 0 if all_valid else len(V) // 10
            more_p = len(P) // 10
        more_l = min(max(more_l, 0), max_samples - len(V))
        more_p = min(max(more_p, 0), max_samples - len(P))
        if more_l <= 0 and more_p <= 0:
            break
        draw(more_l, more_p)
        rounds += 1

    V = np.concatenate(smp.V)
    P = np.concatenate(smp.P)
    n_div = smp.diverged + (int(st_l.diverged.sum()) if all_valid else 0)
    q_l = summarize(V, 0.0, smp.Vcost)
    q_p = summarize(P, 0.0, smp.Pcost)
    total_cpu = time.process_time() - t_start
    est = Estimate(q_l.mean + q_p.mean, q_l.est_variance + q_p.est_variance, len(V) + len(P),
                   total_cpu, smp.Vcost + smp.Pcost + cl + cp_)
    plan.n_l, plan.n_p = len(V), len(P)
    return HybridResult(
        estimate=est,
        plan=plan,
        coupled=q_l,
        pathwise=q_p,
        netZ=netZ,
        pilot_cpu_seconds=pilot_cpu,
        divergence_fraction=n_div / len(V),
        valid_fraction=smp.valid / len(P),
        alloc_index=j,
        rounds=rounds,
        notes=notes + plan.notes,
    )


# -- finite differences -------------------------------------------------------------------


def cfd_estimate(net: ReactionNetwork, theta, i: int, h: float, functional: Functional, x0, *,
                 n: int | None = None, epsilon: float | None = None, seed: int = 0,
                 pilot: int = DEFAULT_PILOT, max_samples: int = DEFAULT_MAX_SAMPLES,
                 workers: int = 1, cap: int = 10**8) -> Estimate:
    """Coupled centered finite difference in direction ``i`` (biased, O(h^2))."""
    if (n is None) == (epsilon is None):
        raise ValueError("give exactly one of n and epsilon")
    t0 = time.process_time()
    if n is not None:
        vals, st = cfd_samples(net, theta, i, h, functional, x0, n, seed, workers=workers, cap=cap)
        return summarize(vals, time.process_time() - t0, st.work.sum())
    vals, st = cfd_samples(net, theta, i, h, functional, x0, pilot, seed, workers=workers, cap=cap)
    chunks, work = [vals], st.work.sum()
    target = target_variance(epsilon)
    while True:
        allv = np.concatenate(chunks)
        v = float(np.var(allv, ddof=1))
        need = min(_ceil_div(max(v, 1e-300), target), max_samples)
        if need <= len(allv) or len(allv) >= max_samples:
            break
        more = max(need - len(allv), len(allv) // 10)
        vals, st = cfd_samples(net, theta, i, h, functional, x0, more, seed, start=len(allv),
                               workers=workers, cap=cap)
        chunks.append(vals)
        work += st.work.sum()
    return summarize(np.concatenate(chunks), time.process_time() - t0, work)


# -- reports ------------------------------------------------------------------------------

REPORT_COLUMNS = ["method", "param", "param_name", "estimate", "halfwidth", "n_pathwise",
                  "n_coupled", "cpu_seconds", "bias_note"]


@dataclass
class ReportRow:
    method: str
    param: int
    param_name: str
    estimate: float
    halfwidth: float
    n_pathwise: int
    n_coupled: int
    cpu_seconds: float
    bias_note: str = ""


def report_rows(method: str, est: Estimate, params, names=(), n_pathwise: int = 0,
                n_coupled: int = 0, bias_note: str = "") -> list[ReportRow]:
    """One row per requested (0-based) parameter index; rows print 1-based indices."""
    mean = np.atleast_1d(est.mean)
    hw = np.atleast_1d(est.halfwidth)
    rows = []
    for pos, i in enumerate(params):
        k = i if mean.size > 1 else 0
        rows.append(ReportRow(method, int(i) + 1, names[i] if i < len(names) else f"theta{i + 1}",
                              float(mean[k]), float(hw[k]), int(n_pathwise), int(n_coupled),
                              float(est.cpu_seconds), bias_note))
    return rows


def rows_to_csv(rows: list[ReportRow]) -> str:
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\r\n")
    wr.writeheader()
    for r in rows:
        wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(r).items()})
    return buf.getvalue()


def rows_to_json(rows: list[ReportRow], provenance: dict | None = None, extra: dict | None = None) -> str:
    doc = {"rows": [asdict(r) for r in rows]}
    if extra:
        doc.update(extra)
    if provenance is not None:
        doc["provenance"] = provenance
    return json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")


__all__ = [
    "AllocationPlan",
    "Estimate",
    "HybridResult",
    "InterruptionWarning",
    "LRCVResult",
    "REPORT_COLUMNS",
    "ReportRow",
    "allocate",
    "cfd_estimate",
    "hybrid_estimate",
    "lr_cv_estimate",
    "lr_estimate",
    "monte_carlo",
    "pathwise_estimate",
    "report_rows",
    "rows_to_csv",
    "rows_to_json",
    "smoothed_functional",
    "summarize",
    "target_variance",
]
