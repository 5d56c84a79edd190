"""Backward dynamic programme for the mixed stopping / singular-control chain.

At layer ``i`` the value is first ``C_i = max(stop, continuation)`` where the
continuation maximizes over control pairs ``(b, g)``.  Injections take no
physical time and move ``x`` up by ``h`` at cost ``phi(t_i) h``, so the layer
is finished by one sweep from the top of the x-grid downwards::

    V_i(x) = max(C_i(x), V_i(x + h) - phi(t_i) h)

Ties go to the earliest branch in the order stop, diffuse, inject.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .dynamics import CostSpec, ModelSpec
from .lattice import LatticeSpec, TransitionModel, assemble_transitions

__all__ = [
    "STOP",
    "DIFFUSE",
    "INJECT",
    "ValueTable",
    "Policy",
    "terminal_layer",
    "continuation_value",
    "solve_layer",
    "backward_solve",
    "query_value",
    "LayerTransitions",
]

STOP, DIFFUSE, INJECT = 0, 1, 2
ACTION_NAMES = {STOP: "stop", DIFFUSE: "diffuse", INJECT: "inject"}


@dataclass(eq=False)
class ValueTable:
    """``values[k]`` is the layer at time ``times[k]``, shape ``(nx, *sigma_shape)``."""

    values: np.ndarray
    layers: np.ndarray  # layer indices stored
    lattice: LatticeSpec

    @property
    def lattice_hash(self) -> str:
        return self.lattice.hash

    @property
    def times(self) -> np.ndarray:
        return self.layers * self.lattice.dt

    def layer(self, i: int) -> np.ndarray:
        k = np.flatnonzero(self.layers == i)
        if k.size == 0:
            raise KeyError(f"layer {i} was not kept")
        return self.values[k[0]]

    @property
    def V0(self) -> np.ndarray:
        return self.layer(0)


@dataclass(eq=False)
class Policy:
    """Action codes (stop/diffuse/inject) and the chosen control-pair index."""

    action: np.ndarray  # (n_layers, nx, *sigma_shape) int8, layers 0..N-1
    control: np.ndarray
    lattice_hash: str

    @classmethod
    def constant(cls, lattice: LatticeSpec, action: int, control: int = 0) -> "Policy":
        shape = (lattice.n_steps, lattice.nx, *lattice.sigma_shape)
        return cls(np.full(shape, action, dtype=np.int8), np.full(shape, control, dtype=np.int8),
                   lattice.hash)


class LayerTransitions:
    """Transition model per layer; assembled once when the baseline is constant."""

    def __init__(self, model: ModelSpec, cost: CostSpec | None, lattice: LatticeSpec,
                 transitions: TransitionModel | None = None):
        self.model, self.cost, self.lattice = model, cost, lattice
        self._fixed = None
        if model.hawkes.constant_baseline:
            self._fixed = transitions or assemble_transitions(model, cost, lattice)
            if self._fixed.lattice_hash != lattice.hash:
                raise ValueError("transition model was assembled on a different lattice")
        self._cache: dict[int, TransitionModel] = {}

    def __call__(self, i: int) -> TransitionModel:
        if self._fixed is not None:
            return self._fixed
        if i not in self._cache:
            self._cache.clear()
            self._cache[i] = assemble_transitions(self.model, self.cost, self.lattice,
                                                  t=i * self.lattice.dt)
        return self._cache[i]


def terminal_layer(lattice: LatticeSpec, cost: CostSpec) -> np.ndarray:
    g = np.asarray(cost.terminal_payoff(lattice.x_grid), dtype=float) * np.ones(lattice.nx)
    return np.broadcast_to(g.reshape(-1, *([1] * len(lattice.sigma_shape))),
                           (lattice.nx, *lattice.sigma_shape)).copy()


def _running(model, cost, lattice, t, pair):
    if not cost.has_running:
        return 0.0
    b, g = pair
    xs = np.repeat(lattice.x_grid, lattice.n_sigma)
    lam = np.maximum(model.hawkes.baseline_at(t) + lattice.sigma_points() @ model.hawkes.weights, 0.0)
    lam = np.tile(lam, lattice.nx)
    return cost.running_rate(t, xs, lam, b, g, lattice.mark_sites, lattice.mark_weights)


def continuation_value(model: ModelSpec, cost: CostSpec, lattice: LatticeSpec,
                       transitions: TransitionModel, i: int, V_next: np.ndarray, state=None):
    """Best continuation value and control-pair index.

    ``sup_(b,g) [-K dt + exp(-r dt) E V_next]``, for every state (flat) or a
    single flat ``state`` index.
    """
    t = i * lattice.dt
    disc = np.exp(-cost.discount * lattice.dt)
    vn = np.asarray(V_next, dtype=float).ravel()
    best = None
    arg = None
    for p, pair in enumerate(transitions.pairs):
        if state is None:
            c = disc * (transitions.diffuse[p] @ vn) - _running(model, cost, lattice, t, pair) * lattice.dt
        else:
            idx, pr = transitions.row(p, state)
            k = _running(model, cost, lattice, t, pair)
            k = k if np.isscalar(k) else k[state]
            c = disc * float(pr @ vn[idx]) - k * lattice.dt
        if best is None:
            best, arg = c, np.zeros(np.shape(c), dtype=np.int8)
        else:
            better = c > best
            best = np.where(better, c, best)
            arg = np.where(better, np.int8(p), arg)
    if state is not None:
        return float(best), int(arg)
    return best, arg


def solve_layer(model: ModelSpec, cost: CostSpec, lattice: LatticeSpec,
                transitions: TransitionModel, i: int, V_next: np.ndarray):
    """One backward step; returns ``(V_i, action_i, control_i)`` on the layer shape."""
    shape = (lattice.nx, *lattice.sigma_shape)
    t = i * lattice.dt
    cont, ctrl = continuation_value(model, cost, lattice, transitions, i, V_next)
    disc_stop = np.exp(-cost.discount * lattice.dt) if cost.discount_stop else 1.0
    stop = disc_stop * np.asarray(cost.stop_payoff(lattice.x_grid), dtype=float) * np.ones(lattice.nx)
    stop = np.repeat(stop, lattice.n_sigma)
    take_stop = stop >= cont
    V = np.where(take_stop, stop, cont).reshape(lattice.nx, lattice.n_sigma)
    act = np.where(take_stop, STOP, DIFFUSE).astype(np.int8).reshape(lattice.nx, lattice.n_sigma)
    if cost.injection_enabled:
        step_cost = cost.phi(t) * lattice.h
        for ix in range(lattice.nx - 2, -1, -1):
            cand = V[ix + 1] - step_cost
            push = cand > V[ix]
            if push.any():
                V[ix] = np.where(push, cand, V[ix])
                act[ix] = np.where(push, INJECT, act[ix])
    if not np.all(np.isfinite(V)):
        bad = np.argwhere(~np.isfinite(V))[0]
        raise FloatingPointError(
            f"non-finite value at layer {i}, x={lattice.x_grid[bad[0]]:.6g}, sigma index {bad[1]}")
    return V.reshape(shape), act.reshape(shape), np.asarray(ctrl, dtype=np.int8).reshape(shape)


def backward_solve(model: ModelSpec, cost: CostSpec, lattice: LatticeSpec,
                   transitions: TransitionModel | None = None, keep: str = "all"):
    """Solve every layer from ``N - 1`` down to ``0``.

    ``keep="all"`` stores every layer and the full policy; ``keep="first"``
    stores only ``V_0`` and ``V_N`` (the policy is then ``None``).
    """
    if transitions is not None and transitions.lattice_hash != lattice.hash:
        raise ValueError("transition model and lattice disagree (hash mismatch)")
    layer_tm = LayerTransitions(model, cost, lattice, transitions)
    N = lattice.n_steps
    shape = (lattice.nx, *lattice.sigma_shape)
    V_next = terminal_layer(lattice, cost)
    if keep == "all":
        values = np.empty((N + 1, *shape))
        values[N] = V_next
        action = np.empty((N, *shape), dtype=np.int8)
        control = np.empty((N, *shape), dtype=np.int8)
    for i in range(N - 1, -1, -1):
        V_i, a_i, c_i = solve_layer(model, cost, lattice, layer_tm(i), i, V_next)
        if keep == "all":
            values[i], action[i], control[i] = V_i, a_i, c_i
        V_next = V_i
    if keep == "all":
        return (ValueTable(values, np.arange(N + 1), lattice),
                Policy(action, control, lattice.hash))
    VN = terminal_layer(lattice, cost)
    return ValueTable(np.stack([V_next, VN]), np.array([0, N]), lattice), None


def query_value(table: ValueTable, t: float, x: float, sigma) -> float:
    """Multilinear interpolation in ``(x, sigma)`` on the last stored layer at or before ``t``."""
    lat = table.lattice
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    tol = 1e-12
    if not -tol <= t <= lat.horizon + tol:
        raise ValueError(f"t={t} outside [0, {lat.horizon}]")
    if not lat.x_grid[0] - tol <= x <= lat.x_grid[-1] + tol:
        raise ValueError(f"x={x} outside the domain")
    for g, s in zip(lat.sigma_grids, sigma):
        if not g[0] - tol <= s <= g[-1] + tol:
            raise ValueError(f"sigma={s} outside its grid [{g[0]}, {g[-1]}]")
    i = int(np.floor(t / lat.dt + 1e-9))
    avail = table.layers[table.layers <= i]
    if avail.size == 0:
        raise ValueError(f"no stored layer at or before t={t}")
    V = table.layer(int(avail.max()))
    interp = RegularGridInterpolator((lat.x_grid, *lat.sigma_grids), V, method="linear")
    pt = np.concatenate([[np.clip(x, lat.x_grid[0], lat.x_grid[-1])],
                         [np.clip(s, g[0], g[-1]) for g, s in zip(lat.sigma_grids, sigma)]])
    return float(interp(pt[None, :])[0])
