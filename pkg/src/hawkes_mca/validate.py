"""Oracles and studies that check the solver from the outside.

* ``brute_force_value``: top-down exhaustive recursion on tiny chains.
* ``rollout_policy`` / ``push_forward``: Monte Carlo and exact forward
  propagation of the discrete chain.
* ``local_consistency_audit``: moment errors of the diffusion sub-rows.
* ``h_sweep`` / ``L_sweep`` / ``stopping_study``: convergence and figure data.
"""
from __future__ import annotations

import io
import math
import sys
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dynamics import CostSpec, ModelSpec
from .lattice import LatticeSpec, TransitionModel, assemble_transitions, build_lattice
from .solver import DIFFUSE, INJECT, STOP, LayerTransitions, Policy, backward_solve, query_value

__all__ = [
    "SizeCapError",
    "brute_force_value",
    "RolloutResult",
    "rollout_policy",
    "push_forward",
    "chain_path",
    "local_consistency_audit",
    "row_moments",
    "SweepReport",
    "h_sweep",
    "L_sweep",
    "StoppingRow",
    "stopping_study",
    "stopping_csv",
    "random_tiny_instance",
    "InvariantError",
]

BRUTE_CAPS = {"nx": 7, "n_sigma": 4, "n_steps": 4, "pairs": 2}


class SizeCapError(ValueError):
    pass


class InvariantError(AssertionError):
    """A checked property of the solver or chain does not hold."""


# ---------------------------------------------------------------- brute force

def brute_force_value(model: ModelSpec, cost: CostSpec, lattice: LatticeSpec,
                      transitions: TransitionModel | None = None) -> np.ndarray:
    """Exact optimal ``V_0`` by recursion over every action and outcome.

    Plain Python over the same sparse rows the solver uses; each state's value
    is the best of stop, each control pair, and inject (which recurses into
    the state ``h`` higher at the same layer).
    """
    sizes = {"nx": lattice.nx, "n_sigma": lattice.n_sigma, "n_steps": lattice.n_steps,
             "pairs": len(model.control_pairs)}
    for k, cap in BRUTE_CAPS.items():
        if sizes[k] > cap:
            raise SizeCapError(f"{k}={sizes[k]} exceeds the brute-force cap {cap}")
    tms = LayerTransitions(model, cost, lattice, transitions)
    N, ns, dt, h = lattice.n_steps, lattice.n_sigma, lattice.dt, lattice.h
    r = cost.discount
    disc = math.exp(-r * dt)
    disc_stop = disc if cost.discount_stop else 1.0
    xg = [float(v) for v in lattice.x_grid]
    F = [float(np.asarray(cost.stop_payoff(np.array([x]))).ravel()[0]) for x in xg]
    G = [float(np.asarray(cost.terminal_payoff(np.array([x]))).ravel()[0]) for x in xg]
    spts = lattice.sigma_points()
    hk = model.hawkes

    def kappa(i, s, pair):
        if not cost.has_running:
            return 0.0
        t = i * dt
        ix, js = divmod(s, ns)
        lam = max(float(hk.baseline_at(t)) + float(spts[js] @ hk.weights), 0.0)
        val = cost.running_rate(t, np.array([xg[ix]]), np.array([lam]), pair[0], pair[1],
                                lattice.mark_sites, lattice.mark_weights)
        return float(np.asarray(val).ravel()[0])

    memo: dict = {}

    def value(i, s):
        key = (i, s)
        if key in memo:
            return memo[key]
        ix = s // ns
        if i == N:
            out = G[ix]
        else:
            tm = tms(i)
            best = disc_stop * F[ix]
            for p, pair in enumerate(tm.pairs):
                idx, pr = tm.row(p, s)
                acc = 0.0
                for j, w in zip(idx.tolist(), pr.tolist()):
                    acc += w * value(i + 1, j)
                best = max(best, disc * acc - kappa(i, s, pair) * dt)
            if cost.injection_enabled and ix < lattice.nx - 1:
                best = max(best, value(i, s + ns) - cost.phi(i * dt) * h)
            out = best
        memo[key] = out
        return out

    V0 = np.array([value(0, s) for s in range(lattice.n_states)])
    return V0.reshape(lattice.nx, *lattice.sigma_shape)


# ---------------------------------------------------------------- rollouts

@dataclass
class RolloutResult:
    mean: float
    se: float
    payoffs: np.ndarray
    stop_times: np.ndarray  # horizon for paths that reach maturity
    matured: np.ndarray  # bool

    @property
    def maturity_fraction(self) -> float:
        return float(np.mean(self.matured))

    @property
    def mean_stop_time(self) -> float:
        return float(np.mean(self.stop_times))


def _row_sampler(P):
    cum = np.cumsum(P.data)
    base = np.concatenate([[0.0], cum])[P.indptr[:-1]]
    return cum, base


def rollout_policy(policy: Policy, model: ModelSpec, cost: CostSpec, lattice: LatticeSpec,
                   n_paths: int, seed: int, x0: float, sigma0,
                   transitions: TransitionModel | None = None) -> RolloutResult:
    """Simulate the discrete chain under ``policy`` and average the payoff.

    The start ``(x0, sigma0)`` must be a lattice node.  Injections are applied
    within a layer until the policy says stop or diffuse.
    """
    if policy.lattice_hash != lattice.hash:
        raise ValueError("policy was solved on a different lattice")
    s0 = lattice.locate(x0, sigma0)
    rng = np.random.default_rng(seed)
    tms = LayerTransitions(model, cost, lattice, transitions)
    N, ns, dt, h = lattice.n_steps, lattice.n_sigma, lattice.dt, lattice.h
    r = cost.discount
    disc_stop = math.exp(-r * dt) if cost.discount_stop else 1.0
    F = np.asarray(cost.stop_payoff(lattice.x_grid), dtype=float) * np.ones(lattice.nx)
    G = np.asarray(cost.terminal_payoff(lattice.x_grid), dtype=float) * np.ones(lattice.nx)
    act = policy.action.reshape(N, lattice.n_states)
    ctl = policy.control.reshape(N, lattice.n_states)

    state = np.full(n_paths, s0, dtype=np.int64)
    payoff = np.zeros(n_paths)
    alive = np.ones(n_paths, dtype=bool)
    stop_t = np.full(n_paths, lattice.horizon)
    samplers: dict = {}
    for i in range(N):
        t = i * dt
        disc_i = math.exp(-r * t)
        tm = tms(i)
        # zero-duration injections
        for _ in range(lattice.nx):
            a = act[i, state]
            push = alive & (a == INJECT)
            if not push.any():
                break
            if np.any(state[push] // ns >= lattice.nx - 1):
                raise RuntimeError("policy injects at the upper boundary")
            payoff[push] -= disc_i * cost.phi(t) * h
            state[push] += ns
        a = act[i, state]
        stopping = alive & (a == STOP)
        if stopping.any():
            payoff[stopping] += disc_i * disc_stop * F[state[stopping] // ns]
            stop_t[stopping] = t
            alive &= ~stopping
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        u = rng.random(idx.size)
        pairs_here = ctl[i, state[idx]]
        for p in np.unique(pairs_here):
            sel = idx[pairs_here == p]
            cached = samplers.get(int(p))
            if cached is None or cached[0] is not tm:
                cached = samplers[int(p)] = (tm, *_row_sampler(tm.diffuse[p]))
            _, cum, base = cached
            P = tm.diffuse[p]
            rows = state[sel]
            lo, hi = P.indptr[rows], P.indptr[rows + 1]
            target = base[rows] + u[pairs_here == p] * (cum[hi - 1] - base[rows])
            k = np.searchsorted(cum, target, side="right")
            k = np.clip(k, lo, hi - 1)
            if cost.has_running:
                pair = tm.pairs[p]
                ix = rows // ns
                lam = np.maximum(model.hawkes.baseline_at(t)
                                 + lattice.sigma_points()[rows % ns] @ model.hawkes.weights, 0.0)
                rate = cost.running_rate(t, lattice.x_grid[ix], lam, pair[0], pair[1],
                                         lattice.mark_sites, lattice.mark_weights)
                payoff[sel] -= disc_i * np.asarray(rate) * dt
            state[sel] = P.indices[k]
        if np.any((state < 0) | (state >= lattice.n_states)):
            raise RuntimeError("chain left the lattice")
    payoff[alive] += math.exp(-r * lattice.horizon) * G[state[alive] // ns]
    se = float(np.std(payoff, ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
    return RolloutResult(float(np.mean(payoff)), se, payoff, stop_t, alive.copy())


def push_forward(model: ModelSpec, cost: CostSpec | None, lattice: LatticeSpec, x0: float, sigma0,
                 pair: int = 0, transitions: TransitionModel | None = None) -> np.ndarray:
    """Exact law of the never-stop, never-inject chain at maturity (flat states)."""
    tms = LayerTransitions(model, cost, lattice, transitions)
    dist = np.zeros(lattice.n_states)
    dist[lattice.locate(x0, sigma0)] = 1.0
    for i in range(lattice.n_steps):
        dist = tms(i).diffuse[pair].T @ dist
    return dist


def chain_path(model: ModelSpec, cost: CostSpec | None, lattice: LatticeSpec, x0: float, sigma0,
               seed: int, inject_time: float | None = None, inject_amount: float = 0.0,
               pair: int = 0, transitions: TransitionModel | None = None):
    """One path of the uncontrolled chain, with an optional deterministic push.

    The push is rounded to whole ``h`` steps and applied at the first layer
    at or after ``inject_time``.  Returns ``(t, x, lam)`` arrays of length
    ``N + 1``.
    """
    rng = np.random.default_rng(seed)
    tms = LayerTransitions(model, cost, lattice, transitions)
    ns = lattice.n_sigma
    s = lattice.locate(x0, sigma0)
    k_inj = -1
    if inject_time is not None and inject_amount:
        k_inj = int(np.ceil(inject_time / lattice.dt - 1e-9))
    n_push = int(round(inject_amount / lattice.h))
    spts = lattice.sigma_points()
    N = lattice.n_steps
    xs = np.empty(N + 1)
    lam = np.empty(N + 1)
    for i in range(N + 1):
        if i == k_inj:
            s = min(s // ns + n_push, lattice.nx - 1) * ns + s % ns
        xs[i] = lattice.x_grid[s // ns]
        lam[i] = model.hawkes.baseline_at(i * lattice.dt) + spts[s % ns] @ model.hawkes.weights
        if i == N:
            break
        idx, pr = tms(i).row(pair, s)
        s = int(idx[min(np.searchsorted(np.cumsum(pr), rng.random() * pr.sum(), side="right"),
                        idx.size - 1)])
    return lattice.times, xs, lam


# ---------------------------------------------------------------- audits

def local_consistency_audit(transitions: TransitionModel, model: ModelSpec,
                            lattice: LatticeSpec) -> dict:
    """Max mean and variance errors of the pure-diffusion sub-rows at interior x."""
    h, dt = lattice.h, lattice.dt
    x = lattice.x_grid[1:-1]
    mu = np.asarray(model.drift(x), dtype=float) * np.ones_like(x)
    mean_err = var_err = 0.0
    for bi, b in enumerate(model.controls_b):
        pu, pd = transitions.p_up[bi, 1:-1], transitions.p_down[bi, 1:-1]
        sig2 = np.asarray(model.volatility(x, b), dtype=float) ** 2 * np.ones_like(x)
        m = h * (pu - pd)
        v = h * h * (pu + pd) - m * m
        mean_err = max(mean_err, float(np.max(np.abs(m - mu * dt), initial=0.0)))
        var_err = max(var_err, float(np.max(np.abs(v - sig2 * dt), initial=0.0)))
    mu_all = np.abs(np.asarray(model.drift(lattice.x_grid), dtype=float)) * np.ones(lattice.nx)
    mmax = float(np.max(mu_all[1:-1], initial=0.0))
    bound = h * mmax * dt + (mmax * dt) ** 2
    return {"mean_error": mean_err, "variance_error": var_err, "variance_bound": bound}


def row_moments(transitions: TransitionModel, lattice: LatticeSpec, pair: int = 0):
    """``E[dX]`` and ``E[dX^2]`` of every assembled row, by direct summation."""
    P = transitions.diffuse[pair]
    ns = lattice.n_sigma
    xs = lattice.x_grid
    rows = np.repeat(np.arange(P.shape[0]), np.diff(P.indptr))
    dx = xs[P.indices // ns] - xs[rows // ns]
    m1 = np.bincount(rows, weights=P.data * dx, minlength=P.shape[0])
    m2 = np.bincount(rows, weights=P.data * dx * dx, minlength=P.shape[0])
    return m1, m2


# ---------------------------------------------------------------- sweeps

@dataclass
class SweepReport:
    """``values[k, p]`` is ``V_0`` at parameter ``grid[k]`` and probe ``probes[p]``."""

    axis: str
    grid: list
    probes: list  # (x0, lam0)
    values: np.ndarray
    wall_clock: list = field(default_factory=list)

    @property
    def diffs(self) -> np.ndarray:
        return np.abs(np.diff(self.values, axis=0))

    def cauchy_ok(self) -> bool:
        d = self.diffs
        return bool(d.shape[0] < 2 or np.all(np.diff(d, axis=0) <= 0))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"{self.axis},x0,lambda0,V0,diff_prev\n")
        d = self.diffs
        for k, g in enumerate(self.grid):
            for p, (x0, l0) in enumerate(self.probes):
                diff = "" if k == 0 else repr(float(d[k - 1, p]))
                buf.write(f"{float(g)!r},{float(x0)!r},{float(l0)!r},"
                          f"{float(self.values[k, p])!r},{diff}\n")
        return buf.getvalue()


def _probe_values(table, lam_to_sigma, probes):
    return [query_value(table, 0.0, x0, np.atleast_1d(lam_to_sigma(l0))) for x0, l0 in probes]


def h_sweep(model: ModelSpec, cost: CostSpec, h_list: Sequence[float], probes,
            lam_to_sigma: Callable, M=21, n_marks: int = 1, sigma_grids=None,
            log: bool = False) -> SweepReport:
    """Solve at each ``h`` (descending) and record ``V_0`` at the probes."""
    if any(b >= a for a, b in zip(h_list, h_list[1:])):
        raise ValueError("h_list must be strictly descending")
    vals, clock = [], []
    for h in h_list:
        t0 = time.perf_counter()
        lat = build_lattice(model, h, M=M, n_marks=n_marks, sigma_grids=sigma_grids)
        table, _ = backward_solve(model, cost, lat, keep="first")
        vals.append(_probe_values(table, lam_to_sigma, probes))
        clock.append(time.perf_counter() - t0)
        if log:
            print(f"h={h}: {clock[-1]:.1f}s", file=sys.stderr)
    return SweepReport("h", list(h_list), list(probes), np.array(vals), clock)


def L_sweep(factory: Callable, L_list: Sequence[float], h_rule: Callable, probes,
            M=21, n_marks: int = 1) -> SweepReport:
    """``factory(L) -> (model, cost, lam_to_sigma)``; ``h_rule(L) -> h``."""
    if any(b <= a for a, b in zip(L_list, L_list[1:])):
        raise ValueError("L_list must be strictly ascending")
    vals, clock = [], []
    for L in L_list:
        t0 = time.perf_counter()
        model, cost, l2s = factory(L)
        lat = build_lattice(model, h_rule(L), M=M, n_marks=n_marks)
        table, _ = backward_solve(model, cost, lat, keep="first")
        vals.append(_probe_values(table, l2s, probes))
        clock.append(time.perf_counter() - t0)
    return SweepReport("L", list(L_list), list(probes), np.array(vals), clock)


# ---------------------------------------------------------------- stopping study

@dataclass
class StoppingRow:
    phi: float | None
    lam0: float
    mean_tau: float
    maturity_fraction: float
    mean_payoff: float
    se: float


def stopping_study(factory: Callable, phis: Sequence, lam0_grid: Sequence[float], h: float,
                   x0: float, n_paths: int = 2000, seed: int = 0, M=21,
                   n_marks: int = 1) -> list[StoppingRow]:
    """Mean optimal stopping time and maturity fraction per ``(phi, lam0)``.

    ``factory(phi) -> (model, cost, lam_to_sigma)``; ``phi=None`` removes the
    inject action.  Every cell reuses ``seed`` so the variants share noise.
    """
    out = []
    for phi in phis:
        model, cost, l2s = factory(phi)
        lat = build_lattice(model, h, M=M, n_marks=n_marks)
        tm = assemble_transitions(model, cost, lat) if model.hawkes.constant_baseline else None
        _, pol = backward_solve(model, cost, lat, tm)
        for lam0 in lam0_grid:
            s0 = np.atleast_1d(l2s(lam0))
            res = rollout_policy(pol, model, cost, lat, n_paths, seed, x0, s0, tm)
            out.append(StoppingRow(phi, float(lam0), res.mean_stop_time, res.maturity_fraction,
                                   res.mean, res.se))
    return out


def stopping_csv(rows: Sequence[StoppingRow]) -> str:
    buf = io.StringIO()
    buf.write("phi,lambda0,mean_tau,maturity_fraction,mean_payoff,se\n")
    for r in rows:
        phi = "inf" if r.phi is None else repr(float(r.phi))
        buf.write(f"{phi},{r.lam0!r},{r.mean_tau!r},{r.maturity_fraction!r},"
                  f"{r.mean_payoff!r},{r.se!r}\n")
    return buf.getvalue()


# ---------------------------------------------------------------- tiny instances

def random_tiny_instance(seed: int):
    """Random model, cost and lattice inside the brute-force caps.

    Two control pairs, one or two excitation components, up to 7 x-nodes and
    at most 4 time layers.  Returns ``(model, cost, lattice)``.
    """
    import warnings

    from .hawkes import HawkesSpec, MarkMeasure

    rng = np.random.default_rng(seed)
    h = float(rng.choice([1 / 6, 0.2, 0.25, 1 / 3, 0.5]))
    n = int(rng.integers(1, 3))
    M = [2, 2] if n == 2 else [int(rng.integers(2, 5))]
    k_atoms = int(rng.integers(1, 3))
    marks = MarkMeasure.finite(rng.uniform(0.2, 1.5, k_atoms), rng.dirichlet(np.ones(k_atoms)))
    a0, a1 = rng.uniform(-1, 1, 2)
    s0, s1 = rng.uniform(0.2, 1.0), rng.uniform(-0.5, 0.5)
    j0 = rng.uniform(-0.8, 0.8)
    if rng.random() < 0.5:
        bs, gs = (1.0, float(rng.uniform(0.3, 1.5))), (0.0,)
    else:
        bs, gs = (1.0,), (0.0, float(rng.uniform(0.2, 1.0)))
    smax = float(rng.uniform(0.5, 2.0))
    weights = rng.uniform(-0.3, 1.0, n)
    decays = rng.uniform(0.5, 2.0, n)
    base = float(rng.uniform(0.2, 2.0))

    def drift(x):
        return a0 + a1 * np.asarray(x, dtype=float)

    def vol(x, b):
        return b * s0 * (1 + s1 * np.asarray(x, dtype=float))

    def jump(x, z, g):
        return (j0 - g) * np.asarray(z, dtype=float) * np.ones_like(np.asarray(x, dtype=float))

    # pick the horizon so that 1..4 layers appear
    xg = h * np.arange(int(round(1 / h)) + 1)
    qs = max(float(np.max(vol(xg, b) ** 2 + h * np.abs(drift(xg)))) for b in bs)
    N = int(rng.integers(1, 5))
    T = N * h * h / qs
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        hk = HawkesSpec(baseline=base, weights=weights, decays=decays, marks=marks, horizon=T,
                        allow_unstable=True)
    model = ModelSpec(drift=drift, volatility=vol, jump=jump, hawkes=hk, L=1.0, x_lower=0.0,
                      controls_b=bs, controls_g=gs, sigma_box=(0.0, smax))
    f0, f1 = rng.uniform(0, 2), rng.uniform(-2, 0)
    g0, g1, g2 = rng.uniform(-1, 1, 3)
    phi = None if rng.random() < 0.2 else float(rng.uniform(0.05, 3.0))
    kr = float(rng.uniform(0, 0.5))
    kj = float(rng.uniform(-0.5, 0.5))
    cost = CostSpec(
        stop_payoff=lambda x: f0 + f1 * np.asarray(x, dtype=float),
        terminal_payoff=lambda x: g0 + g1 * np.asarray(x, dtype=float) + g2 * np.asarray(x, dtype=float) ** 2,
        injection_cost=phi,
        jump_cost=(lambda t, x, z: kj * z * np.ones_like(np.asarray(x, dtype=float))) if rng.random() < 0.5 else None,
        running_cost=(lambda t, x, b, g: kr * (b * b + g) * np.ones_like(np.asarray(x, dtype=float))) if rng.random() < 0.5 else None,
        discount=float(rng.choice([0.0, rng.uniform(0, 1)])),
        discount_stop=bool(rng.random() < 0.7),
    )
    lattice = build_lattice(model, h, M=M, n_marks=k_atoms, max_jump_prob=1e9)
    return model, cost, lattice
