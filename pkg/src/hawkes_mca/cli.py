"""Command line: ``hawkes-mca <verb> [--config FILE] [flags]``.

Verbs: simulate, solve, rollout, sweep, stopping-study, check.  Exit codes:
0 success, 2 config error, 3 invariant failure, 4 numeric failure, 1 other.
Failures print one JSON record on stderr.
"""
from __future__ import annotations

import argparse
import io
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, check_h, load_config, parse_config
from .dynamics import ControlPlan, inject_once, simulate_controlled
from .fileio import export_transitions, save_solution, value_slice_csv, write_csv
from .hawkes import ExplosionError
from .lattice import AssemblyError, _product_split_arrays, assemble_transitions, build_lattice
from .solver import ACTION_NAMES, backward_solve, query_value, solve_layer
from .validate import (InvariantError, L_sweep, brute_force_value, chain_path, h_sweep,
                       local_consistency_audit, random_tiny_instance, rollout_policy,
                       stopping_csv, stopping_study)

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_INVARIANT, EXIT_NUMERIC = 0, 1, 2, 3, 4
STOCHASTIC_VERBS = {"simulate", "rollout", "stopping-study", "check"}


class Context:
    def __init__(self, cfg: RunConfig, out: Path, seed: int | None):
        self.cfg, self.out, self.seed = cfg, out, seed
        self.written: list[Path] = []

    def meta(self, **extra):
        m = {"config_hash": self.cfg.config_hash, "seed": self.seed,
             "version": f"hawkes-mca-{__version__}", "preset": self.cfg.preset,
             "insured_floor": repr(self.cfg.params.insured_floor)}
        m.update(extra)
        return m

    def csv(self, name: str, body: str, **extra):
        self.written.append(write_csv(self.out / name, body, **self.meta(**extra)))


def _lines(header, rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for r in rows:
        buf.write(",".join(v if isinstance(v, str) else repr(v) for v in r) + "\n")
    return buf.getvalue()


# ---------------------------------------------------------------- verbs

def cmd_simulate(ctx: Context, args):
    cfg = ctx.cfg
    sim = cfg.simulate
    model, cost = cfg.model_cost()
    s0 = cfg.lam_to_sigma(sim.lambda0)
    plan = ControlPlan(injection=inject_once(sim.inject_time, sim.inject_amount)
                       if sim.inject_amount else None)
    n_paths = args.paths or sim.paths
    seeds = np.random.SeedSequence(ctx.seed).generate_state(n_paths)
    rows, header = [], None
    for k in range(n_paths):
        path = simulate_controlled(model, cost, plan, args.dt or sim.dt, int(seeds[k]),
                                   x0=sim.x0, sigma0=s0)
        header = path.csv_header(with_id=True)
        rows.extend(path.csv_rows(path_id=k))
    ctx.csv("simulate_paths.csv", _lines(header, [[str(v) for v in r] for r in rows]))
    if sim.chain_h:
        crow = []
        for k, h in enumerate(sim.chain_h):
            lat = build_lattice(model, h, M=cfg.lattice.M, n_marks=cfg.lattice.marks)
            t, x, lam = chain_path(model, cost, lat, sim.x0, s0, int(seeds[k % n_paths]) + 1,
                                   sim.inject_time, sim.inject_amount)
            crow += [[float(h), float(a), float(b), float(c)] for a, b, c in zip(t, x, lam)]
        ctx.csv("simulate_chain.csv", _lines(["h", "t", "X", "lambda"], crow))


def _solve(cfg: RunConfig, h: float, phi="default", keep="all"):
    model, cost = cfg.model_cost(phi)
    lat = build_lattice(model, h, M=cfg.lattice.M, n_marks=cfg.lattice.marks)
    tm = assemble_transitions(model, cost, lat)
    table, pol = backward_solve(model, cost, lat, tm, keep=keep)
    return model, cost, lat, tm, table, pol


def cmd_solve(ctx: Context, args):
    cfg = ctx.cfg
    h = cfg.lattice.h
    model, cost, lat, tm, table, pol = _solve(cfg, h)
    tag = lat.hash
    ctx.written.append(save_solution(ctx.out / f"solution_{tag}.npz", table, pol))
    if args.export_transitions:
        ctx.written.append(export_transitions(tm, ctx.out / f"transitions_{tag}.npz"))
    ctx.csv("value_slice_t0.csv", value_slice_csv(table, 0, pol), h=repr(h), lattice_hash=tag)
    rows = [[x0, l0, query_value(table, 0.0, x0, cfg.lam_to_sigma(l0))] for x0, l0 in cfg.solver.probes]
    ctx.csv("probes.csv", _lines(["x0", "lambda0", "V0"], rows), h=repr(h), lattice_hash=tag)
    prow = []
    for x0, l0 in cfg.solver.probes:
        s = lat.locate(x0, cfg.lam_to_sigma(l0))
        ix, js = divmod(s, lat.n_sigma)
        for i in range(lat.n_steps + 1):
            v = table.layer(i).reshape(lat.nx, lat.n_sigma)[ix, js]
            a = "terminal" if i == lat.n_steps else ACTION_NAMES[int(pol.action[i].reshape(lat.nx, -1)[ix, js])]
            prow.append([x0, l0, float(lat.times[i]), float(v), a])
    ctx.csv("value_path.csv", _lines(["x0", "lambda0", "t", "value", "action"], prow),
            h=repr(h), lattice_hash=tag)
    return table


def cmd_rollout(ctx: Context, args):
    cfg = ctx.cfg
    h = cfg.lattice.h
    n = args.paths or cfg.solver.paths
    model, cost, lat, tm, table, pol = _solve(cfg, h)
    rows = []
    for k, (x0, l0) in enumerate(cfg.solver.probes):
        s0 = cfg.lam_to_sigma(l0)
        V = query_value(table, 0.0, x0, s0)
        res = rollout_policy(pol, model, cost, lat, n, ctx.seed + k, x0, s0, tm)
        ok = abs(res.mean - V) <= max(3 * res.se, 0.05 * abs(V))
        rows.append([x0, l0, V, res.mean, res.se, n, res.maturity_fraction, res.mean_stop_time,
                     "pass" if ok else "fail"])
    ctx.csv("rollout.csv", _lines(["x0", "lambda0", "V0", "mean", "se", "paths", "maturity_fraction",
                                   "mean_tau", "consistent"], rows), h=repr(h))


def _l_factory(cfg: RunConfig):
    def factory(L):
        p = replace(cfg.params, x_min=-float(L))
        c = replace(cfg, params=p)
        m, co = c.model_cost()
        return m, co, c.lam_to_sigma
    return factory


def cmd_sweep(ctx: Context, args):
    cfg = ctx.cfg
    if args.axis == "h":
        hl = tuple(args.h_list) if args.h_list else cfg.solver.h_list
        for h in hl:
            check_h("--h-list", h, cfg.params)
        if any(b >= a for a, b in zip(hl, hl[1:])):
            raise ConfigError("--h-list", "must be strictly descending")
        model, cost = cfg.model_cost()
        rep = h_sweep(model, cost, hl, cfg.solver.probes, cfg.lam_to_sigma, M=cfg.lattice.M,
                      n_marks=cfg.lattice.marks)
    else:
        h = cfg.lattice.h
        for L in cfg.solver.L_list:
            if abs(round(L / h) * h - L) > 1e-9:
                raise ConfigError("solver.L_list", f"h={h} does not divide L={L}")
        rep = L_sweep(_l_factory(cfg), cfg.solver.L_list, lambda L: h, cfg.solver.probes,
                      M=cfg.lattice.M, n_marks=cfg.lattice.marks)
    ctx.csv(f"sweep_{args.axis}.csv", rep.to_csv())
    if not rep.cauchy_ok() and args.axis == "h":
        print(json.dumps({"warning": "successive differences are not nonincreasing"}), file=sys.stderr)
    return rep


def cmd_stopping(ctx: Context, args):
    cfg = ctx.cfg
    h = cfg.lattice.h

    def factory(phi):
        m, c = cfg.model_cost(phi)
        return m, c, cfg.lam_to_sigma

    rows = stopping_study(factory, cfg.solver.phis, cfg.solver.lambda0_grid, h, cfg.solver.x0,
                          args.paths or cfg.solver.paths, ctx.seed, M=cfg.lattice.M,
                          n_marks=cfg.lattice.marks)
    ctx.csv("stopping_study.csv", stopping_csv(rows), h=repr(h))
    return rows


def run_checks(cfg: RunConfig, seed: int, n_tiny: int = 10,
               n_paths: int = 2000) -> list[tuple[str, float, float, bool]]:
    """Invariant suite on the configured model; returns ``(name, value, tol, ok)`` rows."""
    h = cfg.lattice.h
    out = []
    rng = np.random.default_rng(seed)
    # splitting exactness
    grids = (np.sort(rng.uniform(-1, 2, 5)), np.linspace(0, 1, 4))
    tg = np.column_stack([rng.uniform(g[0], g[-1], 1000) for g in grids])
    idx, w = _product_split_arrays(tg, grids)
    err = 0.0
    for k, g in enumerate(grids):
        stride = int(np.prod([gg.size for gg in grids[k + 1:]]))
        err = max(err, float(np.max(np.abs((w * g[(idx // stride) % g.size]).sum(1) - tg[:, k]))))
    out.append(("splitting_exactness", err, 1e-12, err <= 1e-12))
    model, cost, lat, tm, table, pol = _solve(cfg, h)
    worst = max(float(np.max(np.abs(np.asarray(P.sum(axis=1)).ravel() - 1))) for P in tm.diffuse)
    neg = min(float(P.data.min()) for P in tm.diffuse)
    out.append(("row_sums", worst, 1e-12, worst <= 1e-12))
    out.append(("min_probability", neg, 0.0, neg >= 0))
    aud = local_consistency_audit(tm, model, lat)
    out.append(("local_mean_error", aud["mean_error"], 1e-12, aud["mean_error"] <= 1e-12))
    out.append(("local_variance_error", aud["variance_error"], aud["variance_bound"],
                aud["variance_error"] <= aud["variance_bound"] * (1 + 1e-9) + 1e-15))
    worst = 0.0
    for k in range(n_tiny):
        m, c, l = random_tiny_instance(seed * 1000 + k)
        v, _ = backward_solve(m, c, l)
        worst = max(worst, float(np.max(np.abs(v.V0 - brute_force_value(m, c, l)))))
    out.append(("oracle_equivalence", worst, 1e-10, worst <= 1e-10))
    V = table.values
    Fv = np.exp(-cost.discount * lat.dt) * np.asarray(cost.stop_payoff(lat.x_grid))
    stopdom = float(np.min(V[:-1] - Fv.reshape(1, -1, *([1] * len(lat.sigma_shape)))))
    out.append(("stopping_dominance", stopdom, 0.0, stopdom >= -1e-12))
    if cost.injection_enabled:
        phis = np.array([cost.phi(t) for t in lat.times[:-1]])
        grad = float(np.max(np.diff(V[:-1], axis=1) - (phis * lat.h)[:, None, None]))
        out.append(("gradient_constraint", grad, 1e-10, grad <= 1e-10))
    i = lat.n_steps // 2
    Vi, _, _ = solve_layer(model, cost, lat, tm, i, table.layer(i + 1))
    fp = float(np.max(np.abs(Vi - table.layer(i))))
    out.append(("fixed_point", fp, 0.0, fp == 0.0))
    top = cfg.params.x_max
    ceil = float(np.maximum(top, 0) ** (1 - cfg.params.eta) / cfg.params.eta)
    lo, hi = float(V[0].min()), float(V[0].max())
    out.append(("value_lower_bound", lo, 0.0, lo >= -1e-12))
    out.append(("value_upper_bound", hi, ceil, hi <= ceil + 1e-12))
    mono = float(np.max(np.diff(V[0], axis=1)))
    out.append(("monotone_in_lambda", mono, 0.0, mono <= 1e-12))
    x0, l0 = cfg.solver.probes[0]
    s0 = cfg.lam_to_sigma(l0)
    Vp = query_value(table, 0.0, x0, s0)
    res = rollout_policy(pol, model, cost, lat, n_paths, seed, x0, s0, tm)
    gap = abs(res.mean - Vp)
    tol = max(3 * res.se, 0.05 * abs(Vp))
    out.append(("rollout_consistency", gap, tol, gap <= tol))
    return out


def cmd_check(ctx: Context, args):
    rows = run_checks(ctx.cfg, ctx.seed, n_paths=args.paths or 2000)
    body = _lines(["check", "value", "tolerance", "result"],
                  [[n, float(v), float(t), "pass" if ok else "fail"] for n, v, t, ok in rows])
    ctx.csv("check.csv", body, h=repr(ctx.cfg.lattice.h))
    bad = [n for n, _, _, ok in rows if not ok]
    if bad:
        raise InvariantError("failed checks: " + ", ".join(bad))


VERBS = {
    "simulate": cmd_simulate,
    "solve": cmd_solve,
    "rollout": cmd_rollout,
    "sweep": cmd_sweep,
    "stopping-study": cmd_stopping,
    "check": cmd_check,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hawkes-mca", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"hawkes-mca {__version__}")
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", help="TOML config file (default: the built-in preset)")
        p.add_argument("--preset", help="preset name when no config file is given")
        p.add_argument("--out", help="output directory (else config out_dir, $HAWKES_MCA_OUT, ./hawkes_mca_out)")
        p.add_argument("--seed", type=int)
        p.add_argument("--h", type=float, help="lattice spacing override")
        p.add_argument("--paths", type=int)
        if verb == "simulate":
            p.add_argument("--dt", type=float)
        if verb == "solve":
            p.add_argument("--export-transitions", action="store_true")
        if verb == "sweep":
            p.add_argument("--axis", choices=("h", "L"), default="h")
            p.add_argument("--h-list", type=float, nargs="+")
    return ap


def _error(kind: str, code: int, exc: BaseException, **extra) -> int:
    rec = {"status": "error", "kind": kind, "exit_code": code, "message": str(exc)}
    rec.update(extra)
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else parse_config(
            {"preset": args.preset} if args.preset else {})
        if args.h is not None:
            check_h("--h", args.h, cfg.params)
            cfg = replace(cfg, lattice=replace(cfg.lattice, h=float(args.h)))
        seed = args.seed if args.seed is not None else cfg.seed
        if args.verb in STOCHASTIC_VERBS and seed is None:
            raise ConfigError("seed", f"'{args.verb}' needs a seed (config 'seed' or --seed)")
        if seed is not None and seed < 0:
            raise ConfigError("seed", "must be nonnegative")
        cfg = replace(cfg, seed=seed)
        out = cfg.output_dir(args.out)
        ctx = Context(cfg, out, seed)
        t0 = time.perf_counter()
        VERBS[args.verb](ctx, args)
        print(json.dumps({"status": "ok", "verb": args.verb,
                          "files": [str(p) for p in ctx.written],
                          "seconds": round(time.perf_counter() - t0, 3)}, sort_keys=True))
        return EXIT_OK
    except ConfigError as exc:
        return _error("config", EXIT_CONFIG, exc, key=exc.key)
    except InvariantError as exc:
        return _error("invariant", EXIT_INVARIANT, exc)
    except (FloatingPointError, AssemblyError, ExplosionError, OverflowError, ZeroDivisionError) as exc:
        return _error("numeric", EXIT_NUMERIC, exc)
    except Exception as exc:  # noqa: BLE001 - every failure gets a record
        return _error(type(exc).__name__, EXIT_OTHER, exc)


if __name__ == "__main__":
    sys.exit(main())
