"""Constrained controlled jump-diffusion driven by a marked Hawkes process.

One simulation step of length ``dt`` runs, in order: exact decay of the
excitation vector, an Euler step for drift and diffusion, the Hawkes events
falling inside the step (exact times from thinning), the injection prescribed
by the control plan, and finally the two-sided Skorokhod reflection of every
raw increment.  The excitation vector is clamped at the top of its box with
its own nondecreasing ledger.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .hawkes import HawkesSpec, MarkMeasure

__all__ = [
    "ModelSpec",
    "CostSpec",
    "ControlPlan",
    "PathRecord",
    "skorokhod_reflect",
    "simulate_controlled",
    "evaluate_payoff",
    "inject_once",
]


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Coefficients of the controlled SDE on the box ``[x_lower, L] x sigma_box^n``.

    ``drift(x)``, ``volatility(x, b)`` and ``jump(x, z, g)`` must accept numpy
    arrays.  ``sigma_box`` bounds every excitation component; it defaults to
    ``(0, L)``.  A negative lower bound is allowed so that initial
    intensities below the baseline can be represented.
    """

    drift: Callable
    volatility: Callable
    jump: Callable
    hawkes: HawkesSpec
    L: float
    controls_b: Sequence[float] = (1.0,)
    controls_g: Sequence[float] = (0.0,)
    x_lower: float | None = None
    sigma_box: tuple | None = None
    lipschitz_const: float | None = None

    def __post_init__(self):
        if not self.L > 0:
            raise ValueError("domain bound L must be positive")
        if len(self.controls_b) == 0 or len(self.controls_g) == 0:
            raise ValueError("control sets B and Gamma must be nonempty")
        lo = -self.L if self.x_lower is None else float(self.x_lower)
        if not lo < self.L:
            raise ValueError("x_lower must lie below L")
        object.__setattr__(self, "x_lower", lo)
        box = (0.0, float(self.L)) if self.sigma_box is None else tuple(map(float, self.sigma_box))
        if not box[0] <= 0.0 < box[1]:
            raise ValueError("sigma_box must satisfy lo <= 0 < hi")
        object.__setattr__(self, "sigma_box", box)
        object.__setattr__(self, "controls_b", tuple(float(b) for b in self.controls_b))
        object.__setattr__(self, "controls_g", tuple(float(g) for g in self.controls_g))
        if self.lipschitz_const is not None:
            self.check_lipschitz(self.lipschitz_const)

    @property
    def x_upper(self) -> float:
        return float(self.L)

    @property
    def control_pairs(self) -> list[tuple[float, float]]:
        return [(b, g) for b in self.controls_b for g in self.controls_g]

    def chi_h(self, x, z, g):
        """Jump map clipped to the domain width (bounded approximation)."""
        span = self.x_upper - self.x_lower
        return np.clip(np.asarray(self.jump(x, z, g), dtype=float), -span, span)

    def check_lipschitz(self, c: float, n_points: int = 201) -> list[str]:
        """Spot-check the Lipschitz and linear-growth bounds; returns warnings issued."""
        xs = np.linspace(self.x_lower, self.x_upper, n_points)
        issues = []
        mu = np.asarray(self.drift(xs), dtype=float) * np.ones_like(xs)
        slope = np.abs(np.diff(mu)) / np.diff(xs)
        if np.max(slope) > c:
            issues.append(f"drift slope {np.max(slope):.4g} exceeds {c}")
        if np.any(np.abs(mu) > c * (1 + np.abs(xs))):
            issues.append("drift violates linear growth")
        for b in self.controls_b:
            sg = np.asarray(self.volatility(xs, b), dtype=float) * np.ones_like(xs)
            if np.max(np.abs(np.diff(sg)) / np.diff(xs)) > c:
                issues.append(f"volatility(., {b}) slope exceeds {c}")
            if np.any(np.abs(sg) > c * (1 + np.abs(xs))):
                issues.append(f"volatility(., {b}) violates linear growth")
        for msg in issues:
            warnings.warn(msg, RuntimeWarning, stacklevel=3)
        return issues


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Payoffs and costs.

    ``injection_cost`` is a rate ``phi(t)`` or a constant; ``None`` removes the injection action altogether (infinite
    cost).  ``jump_cost(t, x, z)`` and ``running_cost(t, x, b, g)`` default to
    zero.  ``discount_stop`` applies the one-step discount to the stopping
    payoff inside the dynamic programme.
    """

    stop_payoff: Callable
    terminal_payoff: Callable
    injection_cost: Callable | None = None
    jump_cost: Callable | None = None
    running_cost: Callable | None = None
    discount: float = 0.0
    discount_stop: bool = True
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.discount < 0:
            raise ValueError("discount rate must be nonnegative")

    @property
    def injection_enabled(self) -> bool:
        return self.injection_cost is not None

    def phi(self, t) -> float:
        if self.injection_cost is None:
            return np.inf
        c = self.injection_cost
        val = float(c(t)) if callable(c) else float(c)
        if val < 0:
            raise ValueError(f"injection cost must be nonnegative, got {val} at t={t}")
        return val

    def running_rate(self, t, x, lam, b, g, sites, weights):
        """``int kappa(t,x,z) lam m(dz) - K(t,x,b,g)`` with the mark law given by atoms."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(np.broadcast(x, lam).shape)
        if self.jump_cost is not None:
            kbar = sum(w * np.asarray(self.jump_cost(t, x, z), dtype=float)
                       for z, w in zip(sites, weights))
            out = out + kbar * lam
        if self.running_cost is not None:
            out = out - np.asarray(self.running_cost(t, x, b, g), dtype=float)
        return out

    @property
    def has_running(self) -> bool:
        return self.jump_cost is not None or self.running_cost is not None


@dataclass(eq=False)
class ControlPlan:
    """Deterministic feedback rules of ``(t, x, sigma)``.

    ``selector`` returns a ``(b, g)`` pair, ``injection(t, x, sigma, dt)`` the
    amount pushed during the step starting at ``t`` and ``stop`` whether to
    stop at ``t``.
    """

    selector: Callable | None = None
    injection: Callable | None = None
    stop: Callable | None = None


def inject_once(time: float, amount: float) -> Callable:
    """Injection rule firing ``amount`` in the step that contains ``time``."""
    def rule(t, x, sigma, dt):
        return amount if t - 1e-12 <= time < t + dt - 1e-12 else 0.0
    return rule


@dataclass(eq=False)
class PathRecord:
    t: np.ndarray
    X: np.ndarray
    sigma: np.ndarray  # (n_steps + 1, n)
    lam: np.ndarray
    dxi: np.ndarray  # increments of step (t[k-1], t[k]] stored at index k; index 0 is 0
    dRplus: np.ndarray
    dRminus: np.ndarray
    dRsigma: np.ndarray  # (n_steps + 1, n)
    drift_inc: np.ndarray
    diffusion_inc: np.ndarray
    jump_inc: np.ndarray
    controls: np.ndarray  # (n_steps + 1, 2)
    events: list  # (time, mark, raw dX)
    tau: float | None
    seed: int
    tau_L: float | None = None

    @property
    def Rplus(self):
        return np.cumsum(self.dRplus)

    @property
    def Rminus(self):
        return np.cumsum(self.dRminus)

    @property
    def xi(self):
        return np.cumsum(self.dxi)

    @property
    def stop_index(self) -> int:
        return self.t.size - 1

    def csv_rows(self, path_id: int | None = None):
        n = self.sigma.shape[1]
        marks_by_step: dict[int, list[str]] = {}
        dt = self.t[1] - self.t[0] if self.t.size > 1 else 1.0
        for te, z, _ in self.events:
            k = min(int(np.floor(te / dt - 1e-12)) + 1, self.t.size - 1)
            marks_by_step.setdefault(k, []).append(repr(float(z)))
        for k in range(self.t.size):
            row = [] if path_id is None else [path_id]
            row += [repr(float(self.t[k])), repr(float(self.X[k])), repr(float(self.lam[k]))]
            row += [repr(float(v)) for v in self.sigma[k]]
            row += [repr(float(self.dxi[k])), repr(float(self.dRplus[k])), repr(float(self.dRminus[k])),
                    ";".join(marks_by_step.get(k, []))]
            yield row

    def csv_header(self, with_id: bool = False):
        n = self.sigma.shape[1]
        head = ["path"] if with_id else []
        return head + ["t", "X", "lambda"] + [f"sigma_{j + 1}" for j in range(n)] + [
            "dxi", "dRplus", "dRminus", "jump_mark"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_header())
        w.writerows(self.csv_rows())
        return buf.getvalue()


def skorokhod_reflect(raw_increments, start: float, L: float, lower: float | None = None):
    """Two-sided Skorokhod map on ``[lower, L]`` (``lower`` defaults to ``-L``).

    Returns the constrained path after each increment and the cumulative
    pushes ``R+`` (up, from the lower wall) and ``R-`` (down, from the upper
    wall), so that ``path = start + cumsum(raw) + R+ - R-``.
    """
    lo = -L if lower is None else lower
    if not L > 0 or not lo < L:
        raise ValueError("need lower < L and L > 0")
    if not lo <= start <= L:
        raise ValueError(f"start {start} outside [{lo}, {L}]")
    inc = np.asarray(raw_increments, dtype=float)
    path = np.empty_like(inc)
    rp = np.empty_like(inc)
    rm = np.empty_like(inc)
    x, up, down = float(start), 0.0, 0.0
    for k, dx in enumerate(inc):
        x += dx
        if x > L:
            down += x - L
            x = L
        elif x < lo:
            up += lo - x
            x = lo
        path[k], rp[k], rm[k] = x, up, down
    return path, rp, rm


def _reflect_one(x, lo, hi):
    if x > hi:
        return hi, 0.0, x - hi
    if x < lo:
        return lo, lo - x, 0.0
    return x, 0.0, 0.0


def _check_finite(name, value, t, x, s):
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite {name} at t={t:.6g}, x={x:.6g}, sigma={s}")


def simulate_controlled(model: ModelSpec, cost: CostSpec | None, plan: ControlPlan | None,
                        dt: float, seed: int, x0: float = 0.0, sigma0=None,
                        horizon: float | None = None) -> PathRecord:
    """Simulate one constrained path on a uniform grid with step ``dt``.

    ``dt`` is shrunk so that it divides the horizon exactly.  Drift, noise,
    jumps and injection of a step are summed and reflected once at the end
    of the step, so the ledgers only move at grid times where ``X`` sits on
    a wall.
    """
    if not dt > 0:
        raise ValueError("time step must be positive")
    hk = model.hawkes
    T = hk.horizon if horizon is None else horizon
    n_steps = max(1, int(np.ceil(T / dt - 1e-9)))
    dt = T / n_steps
    lo, hi = model.x_lower, model.x_upper
    s_lo, s_hi = model.sigma_box
    if not lo <= x0 <= hi:
        raise ValueError(f"x0={x0} outside [{lo}, {hi}]")
    s = np.zeros(hk.n) if sigma0 is None else np.array(sigma0, dtype=float).reshape(hk.n)
    if np.any(s < s_lo) or np.any(s > s_hi):
        raise ValueError("initial excitation outside its box")
    plan = plan or ControlPlan()
    rng = np.random.default_rng(seed)
    d, q = hk.weights, hk.decays
    pairs_default = (model.controls_b[0], model.controls_g[0])

    m = n_steps + 1
    t_grid = np.arange(m) * dt
    X = np.full(m, np.nan)
    S = np.full((m, hk.n), np.nan)
    lam = np.full(m, np.nan)
    dxi, drp, drm = np.zeros(m), np.zeros(m), np.zeros(m)
    drs = np.zeros((m, hk.n))
    d_drift, d_diff, d_jump = np.zeros(m), np.zeros(m), np.zeros(m)
    ctrl = np.full((m, 2), np.nan)
    events = []
    x = float(x0)
    X[0], S[0], lam[0] = x, s, max(float(hk.baseline_at(0.0) + d @ s), 0.0)
    tau = None
    last = n_steps
    for k in range(n_steps):
        t = t_grid[k]
        if plan.stop is not None and plan.stop(t, x, s.copy()):
            tau = t
            last = k
            break
        b, g = plan.selector(t, x, s.copy()) if plan.selector is not None else pairs_default
        ctrl[k] = b, g
        # diffuse
        mu = float(model.drift(x))
        sg = float(model.volatility(x, b))
        _check_finite("drift", mu, t, x, s)
        _check_finite("volatility", sg, t, x, s)
        a_drift = mu * dt
        a_diff = sg * np.sqrt(dt) * rng.standard_normal()
        d_drift[k + 1], d_diff[k + 1] = a_drift, a_diff
        # all moves of the step are summed and reflected once at the grid time
        raw = a_drift + a_diff
        # jumps at exact thinning times inside [t, t + dt)
        tc = t
        t_end = t + dt
        base_max = hk.baseline_max
        while True:
            bound = base_max + np.maximum(d * s, 0.0).sum()
            if bound <= 0:
                s = s * np.exp(-q * (t_end - tc))
                break
            w = rng.exponential(1.0 / bound)
            if tc + w >= t_end:
                s = s * np.exp(-q * (t_end - tc))
                break
            tc += w
            s = s * np.exp(-q * w)
            lam_c = max(float(hk.baseline_at(tc) + d @ s), 0.0)
            if rng.random() * bound <= lam_c:
                z = float(hk.marks.sample(rng))
                jx = float(model.chi_h(min(max(x + raw, lo), hi), z, g))
                _check_finite("jump", jx, tc, x, s)
                d_jump[k + 1] += jx
                raw += jx
                s = s + float(hk.rho(z))
                over = np.maximum(s - s_hi, 0.0)
                drs[k + 1] += over
                s = np.clip(s - over, s_lo, None)
                events.append((tc, z, jx))
                if len(events) > 10**6:
                    raise FloatingPointError(f"jump explosion before t={tc:.6g}")
        # injection
        if plan.injection is not None:
            amt = float(plan.injection(t, x, s.copy(), dt))
            _check_finite("injection", amt, t, x, s)
            if amt < 0:
                raise ValueError(f"negative injection {amt} at t={t}")
            dxi[k + 1] = amt
            raw += amt
        x, drp[k + 1], drm[k + 1] = _reflect_one(x + raw, lo, hi)
        X[k + 1] = x
        S[k + 1] = s
        lam[k + 1] = max(float(hk.baseline_at(t_end) + d @ s), 0.0)
    sl = slice(0, last + 1)
    return PathRecord(
        t=t_grid[sl], X=X[sl], sigma=S[sl], lam=lam[sl], dxi=dxi[sl], dRplus=drp[sl],
        dRminus=drm[sl], dRsigma=drs[sl], drift_inc=d_drift[sl], diffusion_inc=d_diff[sl],
        jump_inc=d_jump[sl], controls=ctrl[sl], events=events, tau=tau, seed=seed)


def evaluate_payoff(path: PathRecord, cost: CostSpec, model: ModelSpec | None = None,
                    horizon: float | None = None) -> float:
    """Discounted pathwise payoff with left-point sums on the path grid.

    The path is reflected, so it never leaves the domain and the exit time
    ``tau_L`` plays no role.
    """
    r = cost.discount
    t = path.t
    dt = t[1] - t[0] if t.size > 1 else 0.0
    T = horizon if horizon is not None else (model.hawkes.horizon if model is not None else t[-1])
    n = t.size - 1  # number of completed steps
    disc = np.exp(-r * t[:n])
    total = 0.0
    pushed = path.dxi[1:n + 1]
    if n and np.any(pushed > 0):
        phis = np.array([cost.phi(tt) if a > 0 else 0.0 for tt, a in zip(t[:n], pushed)])
        total -= float(np.sum(disc * phis * pushed))
    if n and cost.has_running:
        if model is None:
            raise ValueError("running costs need the model (mark law)")
        marks = model.hawkes.marks
        sites = marks.atoms if marks.kind == "finite" else marks.quantile((np.arange(64) + 0.5) / 64)
        weights = marks.weights if marks.kind == "finite" else np.full(64, 1 / 64)
        rate = np.array([float(cost.running_rate(t[k], path.X[k], path.lam[k], path.controls[k, 0],
                                                 path.controls[k, 1], sites, weights))
                         for k in range(n)])
        total -= float(np.sum(disc * rate * dt))
    if path.tau is not None and path.tau < T:
        total += np.exp(-r * path.tau) * float(cost.stop_payoff(path.X[-1]))
    else:
        total += np.exp(-r * T) * float(cost.terminal_payoff(path.X[-1]))
    return float(total)
