"""Discrete state space and one-step transition model of the Markov chain.

States are pairs ``(x, s)`` with ``x`` on the uniform grid ``{kh} n [x_lower, L]``
and ``s`` on a tensor grid of excitation values.  They are flattened in C
order as ``ix * n_sigma + js``.  A diffuse row mixes two branches:

* no jump (probability ``1 - p1``): the diffusion step ``x -> x +/- h`` and the
  decayed excitation split linearly onto the grid;
* one jump (probability ``p1 = lam dt exp(-lam dt)``): for every
  representative mark ``z_v`` with weight ``w_v``, ``x`` moves to the cell of
  ``x + chi_h(x, z_v, g)`` and the excitation ``s + rho(z_v)`` is split
  onto the grid.

Diffusion probabilities are normalized by ``h^2 / dt`` rather than ``Q*``
when the step had to be shrunk, so ``E[dX] = mu dt`` holds exactly and the
spare mass stays put.

Moves that leave ``[x_lower, L]`` land on the boundary node (the reflection
takes no time); excitation targets outside the box are clamped to its edge.
"""
from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .dynamics import CostSpec, ModelSpec
from .hawkes import MarkMeasure

__all__ = [
    "LatticeSpec",
    "TransitionModel",
    "AssemblyError",
    "build_lattice",
    "time_step",
    "diffusion_probs",
    "lin_split",
    "lin_split_arrays",
    "product_split",
    "voronoi_weights",
    "jump_cells",
    "assemble_transitions",
    "STOCHASTIC_TOL",
]

STOCHASTIC_TOL = 1e-12


class AssemblyError(ValueError):
    """A transition row failed the stochasticity check."""


@dataclass(frozen=True, eq=False)
class LatticeSpec:
    h: float
    x_grid: np.ndarray
    sigma_grids: tuple
    mark_sites: np.ndarray
    mark_weights: np.ndarray
    dt: float
    n_steps: int
    horizon: float
    q_star: float  # max_x,b sigma^2 + h|mu|
    q_eff: float  # h^2 / dt >= q_star; normalizes the diffusion probabilities

    @property
    def nx(self) -> int:
        return self.x_grid.size

    @property
    def sigma_shape(self) -> tuple:
        return tuple(g.size for g in self.sigma_grids)

    @property
    def n_sigma(self) -> int:
        return int(np.prod(self.sigma_shape))

    @property
    def n_states(self) -> int:
        return self.nx * self.n_sigma

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def sigma_points(self) -> np.ndarray:
        """All excitation grid vectors, shape ``(n_sigma, n)`` in C order."""
        mesh = np.meshgrid(*self.sigma_grids, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def state_index(self, ix: int, js) -> int:
        js = np.atleast_1d(js)
        return int(ix * self.n_sigma + np.ravel_multi_index(tuple(js), self.sigma_shape))

    def locate(self, x: float, sigma) -> int:
        """Index of the grid state at ``(x, sigma)``; both must be grid nodes."""
        ix = int(round((x - self.x_grid[0]) / self.h))
        if not 0 <= ix < self.nx or abs(self.x_grid[ix] - x) > 1e-9 * max(1.0, abs(x)):
            raise ValueError(f"x={x} is not a lattice node")
        sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
        js = []
        for g, s in zip(self.sigma_grids, sigma):
            j = int(np.argmin(np.abs(g - s)))
            if abs(g[j] - s) > 1e-9 * max(1.0, abs(s)):
                raise ValueError(f"sigma component {s} is not a grid node")
            js.append(j)
        return self.state_index(ix, js)

    @property
    def hash(self) -> str:
        m = hashlib.sha256()
        for arr in (self.x_grid, *self.sigma_grids, self.mark_sites, self.mark_weights,
                    np.array([self.h, self.dt, self.horizon, float(self.n_steps)])):
            m.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
            m.update(b"|")
        return m.hexdigest()[:16]


def _divides(span: float, h: float) -> int:
    k = span / h
    kr = round(k)
    if kr < 1 or abs(k - kr) > 1e-9 * max(1.0, k):
        raise ValueError(f"spacing h={h} does not divide the domain length {span}")
    return int(kr)


def time_step(model: ModelSpec, h: float, x_grid=None, horizon: float | None = None,
              sigma_grids=None, max_jump_prob: float = 0.1):
    """Uniform time step ``h^2 / Q*`` shrunk to divide the horizon.

    ``Q* = max over grid x and b of sigma^2(x, b) + h |mu(x)|``.  The step is
    shrunk further until ``lambda_max * dt <= max_jump_prob`` with
    ``lambda_max = max baseline + L * sum |d_j|``.
    Returns ``(dt, n_steps, Q*)``.
    """
    if x_grid is None:
        k = _divides(model.x_upper - model.x_lower, h)
        x_grid = model.x_lower + h * np.arange(k + 1)
    T = model.hawkes.horizon if horizon is None else horizon
    mu = np.abs(np.asarray(model.drift(x_grid), dtype=float) * np.ones_like(x_grid))
    D = np.max([np.asarray(model.volatility(x_grid, b), dtype=float) ** 2 * np.ones_like(x_grid)
                for b in model.controls_b], axis=0)
    q_star = float(np.max(D + h * mu))
    if not q_star > 0:
        raise ValueError("degenerate model: sigma == 0 and mu == 0 on the grid; "
                         "set a floor volatility so that the time step is finite")
    dt_raw = h * h / q_star
    lam_max = model.hawkes.baseline_max + model.L * float(np.sum(np.abs(model.hawkes.weights)))
    n = int(np.ceil(T / dt_raw - 1e-9))
    if lam_max > 0:
        n = max(n, int(np.ceil(T * lam_max / max_jump_prob - 1e-9)))
    n = max(n, 1)
    return T / n, n, q_star


def diffusion_probs(model: ModelSpec, x, b: float, h: float, q_star: float):
    """``(p_up, p_down, p_stay)`` of the diffusion step, vectorized over ``x``."""
    x = np.asarray(x, dtype=float)
    mu = np.asarray(model.drift(x), dtype=float) * np.ones_like(x)
    var = np.asarray(model.volatility(x, b), dtype=float) ** 2 * np.ones_like(x)
    p_up = (0.5 * var + h * np.maximum(mu, 0.0)) / q_star
    p_dn = (0.5 * var + h * np.maximum(-mu, 0.0)) / q_star
    p_st = 1.0 - p_up - p_dn
    if np.any(p_st < -1e-12):
        raise ValueError("normalizer too small: negative self-transition probability")
    return p_up, p_dn, np.maximum(p_st, 0.0)


def lin_split_arrays(targets, grid):
    """Vectorized two-point splitting.

    Returns ``(i0, w0, w1, clamped)``: mass ``w0`` on ``grid[i0]`` and ``w1``
    on ``grid[i0 + 1]`` (``i0 + 1`` is capped at the last node).  Targets
    outside the grid go to the nearest end with weight one.
    """
    grid = np.asarray(grid, dtype=float)
    v = np.asarray(targets, dtype=float)
    if grid.size == 0:
        raise ValueError("empty grid")
    if grid.size == 1:
        return (np.zeros(v.shape, dtype=np.int64), np.ones(v.shape), np.zeros(v.shape),
                v != grid[0])
    lo_out = v <= grid[0]
    hi_out = v >= grid[-1]
    i0 = np.clip(np.searchsorted(grid, v, side="right") - 1, 0, grid.size - 2)
    g0, g1 = grid[i0], grid[i0 + 1]
    w0 = (g1 - v) / (g1 - g0)
    w1 = (v - g0) / (g1 - g0)
    w0 = np.where(lo_out, 1.0, np.where(hi_out, 0.0, w0))
    w1 = np.where(lo_out, 0.0, np.where(hi_out, 1.0, w1))
    clamped = (v < grid[0]) | (v > grid[-1])
    return i0, w0, w1, clamped


def lin_split(target: float, grid):
    """Split ``target`` onto at most two adjacent grid nodes.

    Returns a list of ``(index, weight)`` with positive weights whose
    weighted mean is ``target``.
    """
    i0, w0, w1, _ = lin_split_arrays(np.array([target]), grid)
    out = []
    if w0[0] > 0:
        out.append((int(i0[0]), float(w0[0])))
    if w1[0] > 0:
        out.append((int(i0[0]) + 1, float(w1[0])))
    return out


def _product_split_arrays(targets, grids):
    """Corner indices (flat, C order) and weights, each ``(m, 2**n)``."""
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    m, n = targets.shape
    shape = tuple(g.size for g in grids)
    parts = []
    for k, g in enumerate(grids):
        i0, w0, w1, _ = lin_split_arrays(targets[:, k], g)
        i1 = np.minimum(i0 + 1, g.size - 1)
        parts.append(((i0, w0), (i1, w1)))
    idx = np.zeros((m, 2 ** n), dtype=np.int64)
    wts = np.ones((m, 2 ** n))
    strides = np.array([int(np.prod(shape[k + 1:])) for k in range(n)], dtype=np.int64)
    for c, corner in enumerate(itertools.product((0, 1), repeat=n)):
        for k, bit in enumerate(corner):
            ik, wk = parts[k][bit]
            idx[:, c] += ik * strides[k]
            wts[:, c] *= wk
    return idx, wts


def product_split(target, grids):
    """Multilinear splitting of a vector onto the tensor grid.

    Returns a list of ``(multi_index, weight)`` over the bracketing corners
    with positive weight.
    """
    grids = [np.asarray(g, dtype=float) for g in grids]
    idx, wts = _product_split_arrays(np.atleast_1d(target)[None, :], grids)
    shape = tuple(g.size for g in grids)
    acc: dict[tuple, float] = {}
    for i, w in zip(idx[0], wts[0]):
        if w > 0:
            key = tuple(int(v) for v in np.unravel_index(int(i), shape))
            acc[key] = acc.get(key, 0.0) + float(w)
    return sorted(acc.items())


def voronoi_weights(measure: MarkMeasure, n_sites: int):
    """Representative marks and the mass of their Voronoi cells.

    Sites are the quantile midpoints ``F^{-1}((v - 1/2) / n_sites)``; cells are
    delimited by midpoints between consecutive sites.  A finite measure with
    at most ``n_sites`` atoms is returned as is.
    """
    if n_sites < 1:
        raise ValueError("need at least one mark site")
    if measure.kind == "finite" and measure.atoms.size <= n_sites:
        keep = measure.weights > 0
        return measure.atoms[keep].copy(), measure.weights[keep].copy()
    u = (np.arange(n_sites) + 0.5) / n_sites
    sites = np.unique(measure.quantile(u))
    lo, hi = measure.support
    edges = np.concatenate([[lo], 0.5 * (sites[1:] + sites[:-1]), [np.nextafter(hi, np.inf)]])
    w = np.asarray(measure.mass(edges[:-1], edges[1:]), dtype=float)
    w = np.maximum(w, 0.0)
    w = w / w.sum()
    return sites, w


def jump_cells(model: ModelSpec, x, g: float, lattice: LatticeSpec):
    """Successor x-index for every mark site, shape ``(len(x), n_sites)``.

    Cells are ``[y - h/2, y + h/2)`` around the nodes ``y``; the two boundary
    cells extend to infinity so overshooting jumps land on the boundary.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    z = lattice.mark_sites
    y = x[:, None] + model.chi_h(x[:, None], z[None, :], g) * np.ones((1, z.size))
    u = np.floor((y - lattice.x_grid[0]) / lattice.h + 0.5 + 1e-12).astype(np.int64)
    return np.clip(u, 0, lattice.nx - 1)


def jump_cell_masses(model: ModelSpec, x: float, g: float, lattice: LatticeSpec) -> dict:
    """``Q_u(x)``: total mark weight sent to each successor node index ``u``."""
    u = jump_cells(model, [x], g, lattice)[0]
    out: dict[int, float] = {}
    for ui, w in zip(u, lattice.mark_weights):
        out[int(ui)] = out.get(int(ui), 0.0) + float(w)
    return out


def build_lattice(model: ModelSpec, h: float, M=21, n_marks: int = 1, sigma_grids=None,
                  horizon: float | None = None, max_jump_prob: float = 0.1) -> LatticeSpec:
    """Grids, mark quantization and the uniform time step.

    ``M`` is the number of points per excitation component (an int or one
    value per component) on ``model.sigma_box``; explicit ``sigma_grids``
    override it.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    # both walls must sit on {kh}
    for wall in (model.x_lower, model.x_upper):
        if wall != 0:
            _divides(abs(wall), h)
    k = _divides(model.x_upper - model.x_lower, h)
    x_grid = model.x_lower + h * np.arange(k + 1)
    x_grid[-1] = model.x_upper
    n = model.hawkes.n
    if sigma_grids is None:
        Ms = [int(M)] * n if np.isscalar(M) else [int(v) for v in M]
        if len(Ms) != n or min(Ms) < 2:
            raise ValueError("need at least two excitation grid points per component")
        lo, hi = model.sigma_box
        sigma_grids = tuple(np.linspace(lo, hi, m) for m in Ms)
    else:
        sigma_grids = tuple(np.asarray(g, dtype=float) for g in sigma_grids)
        if len(sigma_grids) != n or any(g.size < 2 or np.any(np.diff(g) <= 0) for g in sigma_grids):
            raise ValueError("excitation grids must be increasing with >= 2 points each")
    sites, weights = voronoi_weights(model.hawkes.marks, n_marks)
    dt, n_steps, q_star = time_step(model, h, x_grid, horizon, sigma_grids, max_jump_prob)
    T = model.hawkes.horizon if horizon is None else horizon
    return LatticeSpec(h=float(h), x_grid=x_grid, sigma_grids=sigma_grids, mark_sites=sites,
                       mark_weights=weights, dt=dt, n_steps=n_steps, horizon=float(T),
                       q_star=q_star, q_eff=h * h / dt)


@dataclass(eq=False)
class TransitionModel:
    """Sparse one-step transition rows for every state and control pair.

    ``diffuse[p]`` is the CSR row-stochastic matrix of control pair
    ``pairs[p]``.  ``inject_to[s]`` is the state reached by an injection of
    size ``h`` (``-1`` at the upper boundary).  ``reflect`` holds the
    deterministic boundary rows as ``(from, to)`` index arrays.
    """

    lattice_hash: str
    pairs: list
    diffuse: list
    inject_to: np.ndarray
    reflect: dict
    p_up: np.ndarray  # (n_b, nx)
    p_down: np.ndarray
    p_stay: np.ndarray
    p_jump: np.ndarray  # (n_states,)
    time: float
    clamped: int = 0
    meta: dict = field(default_factory=dict)

    def row(self, pair: int, state: int):
        P = self.diffuse[pair]
        a, b = P.indptr[state], P.indptr[state + 1]
        return P.indices[a:b], P.data[a:b]


def assemble_transitions(model: ModelSpec, cost: CostSpec | None, lattice: LatticeSpec,
                         t: float = 0.0, check: bool = True) -> TransitionModel:
    """Build every diffuse row; ``t`` only matters for a time-varying baseline."""
    hk = model.hawkes
    nx, ns = lattice.nx, lattice.n_sigma
    S = lattice.n_states
    h, dt = lattice.h, lattice.dt
    spts = lattice.sigma_points()  # (ns, n)
    lam_s = np.maximum(float(hk.baseline_at(t)) + spts @ hk.weights, 0.0)
    p1_s = lam_s * dt * np.exp(-lam_s * dt)
    p0_s = 1.0 - p1_s

    decayed = spts * np.exp(-hk.decays * dt)[None, :]
    nj_idx, nj_w = _product_split_arrays(decayed, lattice.sigma_grids)  # (ns, C)
    C = nj_idx.shape[1]
    rho_v = hk.rho(lattice.mark_sites) * np.ones(lattice.mark_sites.size)
    jmp = [_product_split_arrays(spts + r, lattice.sigma_grids) for r in rho_v]
    clamped = 0
    for k, g in enumerate(lattice.sigma_grids):
        clamped += int(np.sum((spts[:, k] + rho_v.max()) > g[-1]))

    ix = np.arange(nx)
    up_ix = np.minimum(ix + 1, nx - 1)
    dn_ix = np.maximum(ix - 1, 0)
    n_b = len(model.controls_b)
    P_up = np.zeros((n_b, nx))
    P_dn = np.zeros((n_b, nx))
    P_st = np.zeros((n_b, nx))
    for bi, b in enumerate(model.controls_b):
        P_up[bi], P_dn[bi], P_st[bi] = diffusion_probs(model, lattice.x_grid, b, h, lattice.q_eff)

    pairs = model.control_pairs
    mats = []
    state_ix = np.repeat(ix, ns)  # x index of each flat state
    state_js = np.tile(np.arange(ns), nx)
    rows_base = np.arange(S)
    for (b, g) in pairs:
        bi = model.controls_b.index(b)
        cols, rows, vals = [], [], []
        # no-jump branch: 3 x-moves times C excitation corners
        for xs, px in ((up_ix, P_up[bi]), (dn_ix, P_dn[bi]), (ix, P_st[bi])):
            succ_x = xs[state_ix]
            base_p = p0_s[state_js] * px[state_ix]
            for c in range(C):
                rows.append(rows_base)
                cols.append(succ_x * ns + nj_idx[state_js, c])
                vals.append(base_p * nj_w[state_js, c])
        # jump branch
        cells = jump_cells(model, lattice.x_grid, g, lattice)  # (nx, n_sites)
        for v, wv in enumerate(lattice.mark_weights):
            succ_x = cells[state_ix, v]
            base_p = p1_s[state_js] * wv
            jidx, jw = jmp[v]
            for c in range(C):
                rows.append(rows_base)
                cols.append(succ_x * ns + jidx[state_js, c])
                vals.append(base_p * jw[state_js, c])
        r = np.concatenate(rows)
        cidx = np.concatenate(cols)
        vv = np.concatenate(vals)
        keep = vv > 0
        P = sp.csr_matrix((vv[keep], (r[keep], cidx[keep])), shape=(S, S))
        P.sum_duplicates()
        P.sort_indices()
        if check:
            sums = np.asarray(P.sum(axis=1)).ravel()
            bad = np.flatnonzero(np.abs(sums - 1.0) > STOCHASTIC_TOL)
            if bad.size or (P.data.size and P.data.min() < 0):
                s0 = int(bad[0]) if bad.size else int(np.argmin(P.data))
                ixb, jsb = divmod(s0, ns)
                raise AssemblyError(
                    f"row for x={lattice.x_grid[ixb]:.6g}, sigma={spts[jsb]}, controls={(b, g)} "
                    f"sums to {sums[s0]!r}")
        mats.append(P)

    inject_to = np.where(state_ix < nx - 1, rows_base + ns, -1)
    top = np.flatnonzero(state_ix == nx - 1)
    bot = np.flatnonzero(state_ix == 0)
    reflect = {"-": (top, top - ns), "+": (bot, bot + ns)}
    for k, g in enumerate(lattice.sigma_grids):
        stride = int(np.prod(lattice.sigma_shape[k + 1:]))
        jk = (state_js // stride) % g.size
        frm = np.flatnonzero(jk == g.size - 1)
        reflect[f"{k + 1}-"] = (frm, frm - stride)
    p_jump = p1_s[state_js]
    return TransitionModel(lattice_hash=lattice.hash, pairs=pairs, diffuse=mats,
                           inject_to=inject_to, reflect=reflect, p_up=P_up, p_down=P_dn,
                           p_stay=P_st, p_jump=p_jump, time=float(t), clamped=clamped)
