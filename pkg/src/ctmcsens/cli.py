"""Command-line front end.

Usage::

    ctmcsens models
    ctmcsens run --model birth_death --method gs_pathwise --param 2 --time 5 --paths 10000
    ctmcsens run --config experiment.json --out results/
    ctmcsens reproduce fig3 --out results/fig3

``run`` writes ``report.csv`` and ``report.json`` into ``--out`` (default
``ctmcsens-out``).  The JSON report embeds the fully resolved config (with the
model inline) and the seed, and ``--config`` accepts such a report to re-run
it.  Values come from, in increasing priority: built-in defaults, the
``--config`` file, ``CTMCSENS_*`` environment variables (``CTMCSENS_SEED``,
``CTMCSENS_WORKERS``, ``CTMCSENS_PATHS``, ``CTMCSENS_PILOT``,
``CTMCSENS_TARGET_HALFWIDTH``, ``CTMCSENS_BIG_M``, ``CTMCSENS_COST``,
``CTMCSENS_OUT``, ``CTMCSENS_PARAMETER_SET``), then command-line flags.

Parameters are numbered from 1 on the command line and in reports.
``--fd-step`` is relative: the step for parameter ``i`` is ``fd_step * theta_i``.
CPU seconds are only recorded with ``--timing``; without it a report is a pure
function of (config, seed) and re-runs byte for byte.

Exit codes: 0 ok, 2 config error, 3 interruptive approximate process,
4 explosion (jump cap exceeded), 5 oracle truncation failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import warnings
from pathlib import Path as FsPath

import numpy as np

from . import __version__
from .config import (
    METHODS,
    ConfigError,
    builtin_models,
    env_overrides,
    load_experiment,
    load_model,
    make_observable,
    reaction_index,
    resolve_experiment,
)
from .estimators import (
    Estimate,
    InterruptionWarning,
    cfd_estimate,
    hybrid_estimate,
    lr_cv_estimate,
    lr_estimate,
    pathwise_estimate,
    report_rows,
    rows_to_csv,
    rows_to_json,
    smoothed_functional,
    target_variance,
)
from .model import ConfigurationError, ValidationError
from .oracle import TruncationError, functional_sensitivity
from .sim import ExplosionError, simulate
from .streams import substream

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INTERRUPTIVE = 3
EXIT_EXPLOSION = 4
EXIT_TRUNCATION = 5

REPRODUCE_IDS = ("fig1", "fig2", "fig3", "fig4", "fig5", "table2")


# -- running one experiment ---------------------------------------------------------------


def _sized(run, n, epsilon, j, pilot):
    """Run with ``n`` samples, or size ``n`` from a pilot so component ``j`` reaches ``epsilon``."""
    if n is not None:
        return run(n)
    est = run(pilot)
    v = float(np.atleast_1d(est.est_variance)[j]) * est.n
    need = max(int(math.ceil(v / target_variance(epsilon))), pilot)
    return run(need)


def run_experiment(cfg: dict, model=None) -> tuple[list, dict]:
    """Run one resolved experiment; returns ``(report rows, diagnostics)``."""
    if model is None:
        cfg, model = resolve_experiment(cfg)
    net = model.net
    ps = model.parameter_set(cfg["parameter_set"])
    theta, x0, T = ps.theta, ps.x0, float(cfg["time"])
    R = net.param_dim
    params = list(range(R)) if cfg["params"] == "all" else [p - 1 for p in cfg["params"]]
    j = cfg["alloc_param"] - 1
    f = make_observable(net, cfg["observable"], T)
    n, eps = cfg.get("paths"), cfg.get("target_halfwidth")
    seed, workers, method = cfg["seed"], cfg["workers"], cfg["method"]
    cap = cfg["max_jumps"]
    names = net.param_names
    diag: dict = {}
    note = ""
    n_p = n_l = 0

    if method == "lr":
        est = _sized(lambda m: lr_estimate(net, theta, f, x0, m, seed, workers=workers, cap=cap),
                     n, eps, j, cfg["pilot"])
        n_l = est.n
    elif method == "lr_cv":
        est = _sized(lambda m: lr_cv_estimate(net, theta, f, x0, m, seed, workers=workers, cap=cap),
                     n, eps, j, cfg["pilot"])
        n_l = est.n
    elif method in ("gs_pathwise", "rpd_pathwise"):
        smoothing = method.split("_")[0]
        fp = smoothed_functional(f, net, smoothing, cfg.get("window"))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", InterruptionWarning)
            est = _sized(lambda m: pathwise_estimate(net, theta, fp, x0, m, seed, workers=workers,
                                                       cap=cap),
                         n, eps, j, cfg["pilot"])
        if any(issubclass(w.category, InterruptionWarning) for w in caught):
            note = "interruptive network: pathwise-only estimate is biased"
        elif smoothing == "rpd" and f.kind == "terminal":
            note = f"window smoothing w={cfg['window']}: biased"
        n_p = est.n
    elif method in ("gs_hybrid", "rpd_hybrid"):
        smoothing = method.split("_")[0]
        res = hybrid_estimate(net, theta, f, x0, smoothing=smoothing, w=cfg.get("window"),
                              delta=cfg["delta"], M=cfg["big_m"],
                              exempt=[reaction_index(net, e) for e in cfg["exempt"]],
                              epsilon=eps, n=n, seed=seed, alloc_index=j, pilot=cfg["pilot"],
                              cost=cfg["cost"], workers=workers, cap=cap)
        est = res.estimate
        n_p, n_l = res.n_pathwise, res.n_coupled
        plan = res.plan
        diag = {
            "pilot_pathwise_share": plan.n_p / (plan.n_l + plan.n_p),
            "all_pilot_paths_valid": plan.all_valid,
            "divergence_fraction": res.divergence_fraction,
            "valid_fraction": res.valid_fraction,
            "pilot_variances": {"coupled": plan.v_l, "pathwise": plan.v_p},
            "pilot_costs": {"coupled": plan.c_l, "pathwise": plan.c_p, "unit": cfg["cost"]},
            "rounds": res.rounds,
            "notes": res.notes,
            "coupled_part": np.atleast_1d(res.coupled.mean).tolist(),
            "pathwise_part": np.atleast_1d(res.pathwise.mean).tolist(),
        }
        if smoothing == "rpd" and f.kind == "terminal":
            note = f"window smoothing w={cfg['window']}: biased"
    elif method == "cfd":
        parts = []
        for i in params:
            h = cfg["fd_step"] * theta[i] if theta[i] != 0 else cfg["fd_step"]
            parts.append(cfd_estimate(net, theta, i, h, f, x0, n=n, epsilon=eps, seed=seed,
                                      pilot=cfg["pilot"], workers=workers, cap=cap))
        mean = np.zeros(R)
        var = np.zeros(R)
        for i, e in zip(params, parts):
            mean[i], var[i] = e.mean, e.est_variance
        est = Estimate(mean, var, max(e.n for e in parts), sum(e.cpu_seconds for e in parts),
                       sum(e.work for e in parts))
        n_l = est.n
        note = f"finite difference h={cfg['fd_step']}*theta_i: O(h^2) bias"
    elif method == "oracle":
        vals = np.zeros(R)
        for i in params:
            vals[i] = functional_sensitivity(net, theta, f, x0, i)
        est = Estimate(vals, np.zeros(R), 0)
        note = "master equation on a truncated box"
    else:  # pragma: no cover - schema rejects this
        raise ConfigError(f"unknown method {method!r}")

    if not cfg.get("timing"):
        est = Estimate(est.mean, est.est_variance, est.n, float("nan"), est.work)
    rows = report_rows(method, est, params, names, n_p, n_l, note)
    if not cfg.get("timing"):
        for r in rows:
            r.cpu_seconds = None
    diag["work"] = float(est.work)
    return rows, diag


def dump_paths(cfg: dict, model, count: int, path: FsPath):
    """CSV of ``count`` sample paths of the original process: path, time, state, reaction."""
    net = model.net
    ps = model.parameter_set(cfg["parameter_set"])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\r\n")
        wr.writerow(["path", "time", *net.species, "reaction"])
        for p in range(count):
            pth = simulate(net, ps.theta, ps.x0, float(cfg["time"]),
                           substream(cfg["seed"], p, "dump"), cap=cfg["max_jumps"])
            wr.writerow([p, repr(0.0), *pth.states[0].tolist(), ""])
            for l in range(pth.num_jumps):
                wr.writerow([p, repr(float(pth.times[l + 1])), *pth.states[l + 1].tolist(),
                             int(pth.channels[l]) + 1])


def write_report(rows, cfg, diag, out: FsPath, extra=None):
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_bytes(rows_to_csv(rows).encode())
    doc = {"diagnostics": diag, "model": cfg["model"]["name"], "method": cfg["method"],
           "version": __version__}
    if extra:
        doc.update(extra)
    # where the files go is not part of the experiment
    prov = {"config": {k: v for k, v in cfg.items() if k != "out"}, "seed": cfg["seed"]}
    (out / "report.json").write_bytes(rows_to_json(rows, prov, doc).encode())


def _print_rows(rows, stream=None):
    stream = stream or sys.stdout
    for r in rows:
        print(f"{r.method:>12}  {r.param_name:>8}  {r.estimate: .6g} +/- {r.halfwidth:.3g}"
              f"  (pathwise {r.n_pathwise}, coupled {r.n_coupled})"
              + (f"  [{r.bias_note}]" if r.bias_note else ""), file=stream)


# -- reproduction grids -------------------------------------------------------------------


def _grid_row(model_name, pset, method, param, T, seed, workers, timing, **kw):
    cfg = {"model": model_name, "parameter_set": pset, "method": method, "params": [param],
           "time": T, "seed": seed, "workers": workers, "timing": timing}
    cfg.update({k: v for k, v in kw.items() if v is not None})
    rows, diag = run_experiment(cfg)
    r = rows[0]
    return {"model": model_name, "method": method, "param": r.param, "time": T,
            "estimate": r.estimate, "halfwidth": r.halfwidth, "n_pathwise": r.n_pathwise,
            "n_coupled": r.n_coupled, "cpu_seconds": r.cpu_seconds,
            "pathwise_share": diag.get("pilot_pathwise_share"), "bias_note": r.bias_note,
            **{k: v for k, v in kw.items() if k in ("initial_A", "window", "fd_step")}}


def _switch_model(a: int) -> dict:
    doc = json.loads(json.dumps(load_model("switch").doc))
    doc["parameter_sets"]["default"]["initial_state"]["A"] = a
    return doc


def reproduce(exhibit: str, scale: float = 0.1, seed: int = 0, workers: int = 1,
              timing: bool = False, fraction: float = 0.05, times=None) -> list[dict]:
    """Scaled-down experiment grid for one exhibit; one dict per estimate.

    ``scale`` multiplies the full-size path counts; efficiency exhibits aim
    for a half-width of ``fraction`` times the exact sensitivity.  ``times``
    replaces the exhibit's default final times (fig1, fig2, fig3, fig4).
    """
    if exhibit not in REPRODUCE_IDS:
        raise ConfigError(f"unknown exhibit {exhibit!r}; choose from {', '.join(REPRODUCE_IDS)}")
    out = []
    n = max(int(1e4 * scale), 100)
    common = {"seed": seed, "workers": workers, "timing": timing}
    bd = load_model("birth_death")
    bd_set = bd.parameter_set()

    def bd_truth(T, i):
        if T == 0:
            return 0.0
        f = make_observable(bd.net, bd_set.observable, T)
        return functional_sensitivity(bd.net, bd_set.theta, f, bd_set.x0, i)

    if exhibit == "fig1":
        for T in times or (0.0, 1.0, 5.0, 20.0, 50.0):
            for p in (1, 2):
                truth = bd_truth(T, p - 1)
                for method, kw in (("gs_pathwise", {}), ("gs_hybrid", {}), ("lr_cv", {}),
                                   ("cfd", {"fd_step": 0.01}), ("rpd_pathwise", {"window": 0.1 * T})):
                    if T == 0 and method == "rpd_pathwise":
                        continue
                    row = _grid_row("birth_death", "default", method, p, T, paths=n, **kw, **common)
                    row["exact"] = truth
                    out.append(row)
    elif exhibit == "fig2":
        for T in times or (5.0, 50.0):
            truth = bd_truth(T, 1)
            eps = fraction * abs(truth)
            for method, kw in (("gs_pathwise", {}), ("gs_hybrid", {}), ("lr_cv", {}),
                               ("cfd", {"fd_step": 0.01}), ("rpd_hybrid", {"window": 0.1 * T})):
                row = _grid_row("birth_death", "default", method, 2, T, target_halfwidth=eps,
                                **kw, **common)
                row["exact"] = truth
                out.append(row)
    elif exhibit == "fig3":
        for a in (2, 5, 10):
            doc = _switch_model(a)
            for T in times or (0.5, 2.0, 10.0):
                ms = load_model(doc)
                truth = functional_sensitivity(ms.net, ms.parameter_set().theta,
                                               make_observable(ms.net, ms.parameter_set().observable, T),
                                               ms.parameter_set().x0, 0)
                for method, kw in (("gs_pathwise", {}), ("rpd_pathwise", {"window": 0.1 * T}),
                                   ("gs_hybrid", {}), ("rpd_hybrid", {"window": 0.1 * T})):
                    row = _grid_row(doc, "default", method, 1, T, paths=10 * n, **kw, **common)
                    row.update(model="switch", initial_A=a, exact=truth)
                    out.append(row)
    elif exhibit in ("fig4", "fig5"):
        if exhibit == "fig4":
            cases = [("switch", "default", T) for T in times or (0.5, 2.0, 10.0)]
        else:
            cases = [("mm_switch", "t2", 2.0), ("mm_switch", "t20", 20.0)]
        for name, pset, T in cases:
            ms = load_model(name)
            ps = ms.parameter_set(pset)
            truth = functional_sensitivity(ms.net, ps.theta, make_observable(ms.net, ps.observable, T),
                                           ps.x0, 0)
            eps = fraction * abs(truth)
            for method, kw in (("gs_hybrid", {}), ("rpd_hybrid", {"window": 0.1 * T}),
                               ("lr_cv", {}), ("cfd", {"fd_step": 0.01})):
                row = _grid_row(name, pset, method, 1, T, target_halfwidth=eps, **kw, **common)
                row["exact"] = truth
                out.append(row)
    else:
        out = table2(n=n, seed=seed, workers=workers, timing=timing)
    return out


def table2(n: int = 1000, seed: int = 0, workers: int = 1, timing: bool = False,
           fd_step: float = 0.01) -> list[dict]:
    """Full gradient of the integrated dimerization flux by three methods at equal work.

    The hybrid runs with ``n`` samples; its total work (channel evaluations)
    sets the budget that LR+CV and the six finite differences then share.
    """
    ms = load_model("dimerization")
    ps = ms.parameter_set("flux")
    net, theta, x0, T = ms.net, ps.theta, ps.x0, ps.time
    f = make_observable(net, ps.observable, T)
    hy = hybrid_estimate(net, theta, f, x0, exempt=ms.exempt, n=n, seed=seed, alloc_index=2,
                         workers=workers)
    budget = hy.estimate.work
    probe = lr_cv_estimate(net, theta, f, x0, 200, seed + 1, workers=workers)
    n_lr = max(int(budget / (probe.work / probe.n)), 2)
    lr = lr_cv_estimate(net, theta, f, x0, n_lr, seed, workers=workers)
    cfd_parts = []
    for i in range(net.param_dim):
        h = fd_step * theta[i]
        pr = cfd_estimate(net, theta, i, h, f, x0, n=200, seed=seed + 1, workers=workers)
        m = max(int(budget / net.param_dim / (pr.work / pr.n)), 2)
        cfd_parts.append(cfd_estimate(net, theta, i, h, f, x0, n=m, seed=seed, workers=workers))
    rows = []
    for i in range(net.param_dim):
        for method, mean, hw, cnt, cpu in (
            ("gs_hybrid", hy.estimate.mean[i], hy.estimate.halfwidth[i], hy.estimate.n,
             hy.estimate.cpu_seconds),
            ("lr_cv", lr.mean[i], lr.halfwidth[i], lr.n, lr.cpu_seconds),
            ("cfd", cfd_parts[i].mean, cfd_parts[i].halfwidth, cfd_parts[i].n,
             cfd_parts[i].cpu_seconds),
        ):
            rows.append({"model": "dimerization", "method": method, "param": i + 1,
                         "time": T, "estimate": float(mean), "halfwidth": float(hw),
                         "samples": int(cnt), "cpu_seconds": float(cpu) if timing else None,
                         "work_budget": float(budget)})
    return rows


def _write_table(rows: list[dict], path: FsPath):
    cols = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=cols, lineterminator="\r\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


# -- argument parsing ---------------------------------------------------------------------


def _params_arg(s: str):
    if s == "all":
        return "all"
    try:
        vals = [int(v) for v in s.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError("--param takes 1-based indices like 2 or 1,3 or 'all'")
    if any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("parameter indices start at 1")
    return vals


def _list_arg(s: str):
    out = []
    for v in s.split(","):
        v = v.strip()
        if v:
            out.append(int(v) if v.isdigit() else v)
    return out


def _delta_arg(s: str):
    vals = [float(v) for v in s.split(",")]
    return vals[0] if len(vals) == 1 else vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctmcsens", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"ctmcsens {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("models", help="list builtin models")

    r = sub.add_parser("run", help="run one estimator")
    r.add_argument("--config", help="experiment config JSON (or a previous report.json)")
    r.add_argument("--model", help="builtin model name or model JSON file")
    r.add_argument("--set", dest="parameter_set", help="named parameter set of the model")
    r.add_argument("--method", choices=METHODS)
    r.add_argument("--param", dest="params", type=_params_arg, help="1-based indices or 'all'")
    r.add_argument("--time", type=float, help="final time t (default: the parameter set's)")
    r.add_argument("--window", type=float, help="smoothing half-window w for rpd methods")
    r.add_argument("--fd-step", dest="fd_step", type=float, help="relative step h/theta_i for cfd")
    r.add_argument("--delta", type=_delta_arg, help="floor argument(s) of the approximate process")
    r.add_argument("--big-m", dest="big_m", type=float, help="rate ceiling factor M")
    r.add_argument("--exempt", type=_list_arg,
                   help="reactions (1-based indices or names) allowed to keep zero rates")
    size = r.add_mutually_exclusive_group()
    size.add_argument("--paths", type=int, help="number of samples")
    size.add_argument("--target-halfwidth", dest="target_halfwidth", type=float,
                      help="95%% half-width target for the allocation parameter")
    r.add_argument("--alloc-param", dest="alloc_param", type=int,
                   help="1-based parameter that drives sample allocation")
    r.add_argument("--pilot", type=int, help="pilot samples per part (default 500)")
    r.add_argument("--cost", choices=("work", "cpu"), help="cost measure for allocation")
    r.add_argument("--seed", type=int)
    r.add_argument("--workers", type=int)
    r.add_argument("--timing", action="store_const", const=True, default=None,
                   help="record CPU seconds in the report")
    r.add_argument("--out", help="output directory (default ctmcsens-out)")
    r.add_argument("--dump-paths", dest="dump_paths", type=int, metavar="N",
                   help="also write N sample paths to paths.csv")
    r.add_argument("--max-jumps", dest="max_jumps", type=int,
                   help="jump cap per path; exceeding it is an explosion (exit 4)")

    rp = sub.add_parser("reproduce", help="run a scaled-down experiment grid")
    rp.add_argument("exhibit", choices=REPRODUCE_IDS)
    rp.add_argument("--scale", type=float, default=0.1, help="fraction of the full-size path counts")
    rp.add_argument("--fraction", type=float, default=0.05,
                    help="relative half-width target for efficiency exhibits")
    rp.add_argument("--seed", type=int, default=0)
    rp.add_argument("--workers", type=int, default=1)
    rp.add_argument("--timing", action="store_true")
    rp.add_argument("--times", type=lambda v: [float(t) for t in v.split(",")],
                    help="comma-separated final times replacing the exhibit's defaults")
    rp.add_argument("--out", default="ctmcsens-out")
    return p


def _experiment_from_args(args) -> dict:
    cfg: dict = {}
    if args.config:
        cfg = load_experiment_or_report(args.config)
    cfg.update(env_overrides())
    for key in ("model", "parameter_set", "method", "params", "time", "window", "fd_step",
                "delta", "big_m", "exempt", "paths", "target_halfwidth", "alloc_param", "pilot",
                "cost", "seed", "workers", "timing", "out", "dump_paths", "max_jumps"):
        v = getattr(args, key)
        if v is not None:
            cfg[key] = v
    if "paths" in cfg and "target_halfwidth" in cfg:
        # the later source wins
        drop = "paths" if args.target_halfwidth is not None else "target_halfwidth"
        cfg.pop(drop)
    for key in ("model", "method"):
        if key not in cfg:
            raise ConfigError(f"--{key} is required (or give it in --config)")
    return cfg


def load_experiment_or_report(path) -> dict:
    text = FsPath(path).read_text() if FsPath(path).is_file() else None
    if text is not None:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError:
            doc = None
        if isinstance(doc, dict) and "provenance" in doc:
            return dict(doc["provenance"]["config"])
    return load_experiment(path)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "models":
            for name in builtin_models():
                ms = load_model(name)
                sets = ", ".join(ms.parameter_sets)
                print(f"{name}: species {', '.join(ms.net.species)}; parameter sets {sets}")
            return EXIT_OK
        if args.command == "reproduce":
            rows = reproduce(args.exhibit, args.scale, args.seed, args.workers, args.timing,
                             args.fraction, args.times)
            out = FsPath(args.out)
            out.mkdir(parents=True, exist_ok=True)
            _write_table(rows, out / f"{args.exhibit}.csv")
            for r in rows:
                print(f"{r['method']:>12} theta{r['param']} t={r['time']:<5g} "
                      f"{r['estimate']: .5g} +/- {r['halfwidth']:.3g}")
            print(f"wrote {out / (args.exhibit + '.csv')}")
            return EXIT_OK
        cfg = _experiment_from_args(args)
        cfg, model = resolve_experiment(cfg)
        rows, diag = run_experiment(cfg, model)
        out = FsPath(cfg.get("out", "ctmcsens-out"))
        write_report(rows, cfg, diag, out)
        if cfg["dump_paths"]:
            dump_paths(cfg, model, cfg["dump_paths"], out / "paths.csv")
        _print_rows(rows)
        if "pilot_pathwise_share" in diag:
            share = diag["pilot_pathwise_share"]
            print(f"allocation: {100 * share:.0f}% pathwise / {100 * (1 - share):.0f}% coupled")
        print(f"wrote {out / 'report.csv'} and {out / 'report.json'}")
        return EXIT_OK
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INTERRUPTIVE
    except (ConfigError, ConfigurationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ExplosionError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_EXPLOSION
    except TruncationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_TRUNCATION
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
