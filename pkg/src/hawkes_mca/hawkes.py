"""Marked Hawkes process with a sum-of-exponentials kernel.

The intensity is ``lambda(t) = baseline(t) + sum_j d_j * s_j(t)`` where every
excitation component ``s_j`` decays at rate ``q_j`` and jumps by ``rho(z)`` at
each event with mark ``z``.  Between events the state is exactly
``s_j * exp(-q_j * dt)``, which is what makes ``(lambda, s)`` Markov.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "MarkMeasure",
    "HawkesSpec",
    "IntensityState",
    "EventLog",
    "StabilityReport",
    "ExplosionError",
    "decay_step",
    "intensity_at",
    "simulate_hawkes",
    "simulate_many",
    "intensity_path",
    "compensator",
    "mean_intensity_ode",
]


class ExplosionError(RuntimeError):
    """Raised when a simulation produces more events than the configured cap."""


def _one(z):
    return np.ones_like(np.asarray(z, dtype=float))


class MarkMeasure:
    """Probability law of the marks, either finite-support or a density table.

    Use the constructors :meth:`dirac`, :meth:`finite`, :meth:`uniform` and
    :meth:`from_density` rather than ``__init__``.
    """

    def __init__(self, atoms=None, weights=None, grid=None, pdf=None):
        if atoms is not None:
            atoms = np.atleast_1d(np.asarray(atoms, dtype=float))
            weights = np.atleast_1d(np.asarray(weights, dtype=float))
            if atoms.shape != weights.shape or atoms.size == 0:
                raise ValueError("atoms and weights must be non-empty and of equal length")
            if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
                raise ValueError("mark weights must be nonnegative and sum to 1")
            if np.any(atoms[weights > 0] == 0.0):
                raise ValueError("mark measure must not charge z = 0")
            if not np.all(np.isfinite(atoms)):
                raise ValueError("mark support must be compact")
            order = np.argsort(atoms, kind="stable")
            self.kind = "finite"
            self.atoms, self.weights = atoms[order], weights[order]
            self.support = (float(atoms.min()), float(atoms.max()))
            self._cdf_grid = None
        else:
            grid = np.asarray(grid, dtype=float)
            pdf = np.asarray(pdf, dtype=float)
            if grid.ndim != 1 or grid.size < 2 or grid.shape != pdf.shape:
                raise ValueError("density table needs matching 1-d grid and pdf")
            if np.any(np.diff(grid) <= 0) or np.any(pdf < 0) or not np.all(np.isfinite(grid)):
                raise ValueError("density grid must be increasing and finite, pdf nonnegative")
            cdf = np.concatenate([[0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * np.diff(grid))])
            if cdf[-1] <= 0:
                raise ValueError("density integrates to zero")
            self.kind = "density"
            self.grid, self.pdf = grid, pdf / cdf[-1]
            self._cdf_grid = cdf / cdf[-1]
            self.support = (float(grid[0]), float(grid[-1]))
            self.atoms = self.weights = None

    @classmethod
    def dirac(cls, z: float) -> "MarkMeasure":
        return cls(atoms=[z], weights=[1.0])

    @classmethod
    def finite(cls, atoms: Sequence[float], weights: Sequence[float]) -> "MarkMeasure":
        return cls(atoms=atoms, weights=weights)

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "MarkMeasure":
        if not 0 <= lo < hi:
            raise ValueError("uniform marks need 0 <= lo < hi")
        return cls(grid=[lo, hi], pdf=[1.0, 1.0])

    @classmethod
    def from_density(cls, grid, pdf) -> "MarkMeasure":
        return cls(grid=grid, pdf=pdf)

    def cdf(self, z):
        """``m((-inf, z])``; for finite support this is right-continuous."""
        z = np.asarray(z, dtype=float)
        if self.kind == "finite":
            idx = np.searchsorted(self.atoms, z, side="right")
            return np.concatenate([[0.0], np.cumsum(self.weights)])[idx]
        return self.cdf_exact(z)

    def mass(self, a, b):
        """Mass of the half-open interval ``[a, b)``."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if self.kind == "finite":
            cum = np.concatenate([[0.0], np.cumsum(self.weights)])
            return cum[np.searchsorted(self.atoms, b, side="left")] - cum[
                np.searchsorted(self.atoms, a, side="left")]
        return self.cdf(b) - self.cdf(a)

    def quantile(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "finite":
            cum = np.cumsum(self.weights)
            idx = np.searchsorted(cum, u - 1e-15, side="left")
            return self.atoms[np.minimum(idx, self.atoms.size - 1)]
        # the cdf table is piecewise quadratic for a piecewise-linear pdf;
        # invert it on a refined grid so the sampler is accurate to ~1e-6
        fine = np.linspace(self.grid[0], self.grid[-1], max(2049, 8 * self.grid.size))
        fine_cdf = self.cdf_exact(fine)
        return np.interp(u, fine_cdf, fine)

    def cdf_exact(self, z):
        """Exact cdf of the piecewise-linear density (quadratic between nodes)."""
        z = np.clip(np.asarray(z, dtype=float), self.grid[0], self.grid[-1])
        i = np.clip(np.searchsorted(self.grid, z, side="right") - 1, 0, self.grid.size - 2)
        x0, x1 = self.grid[i], self.grid[i + 1]
        p0, p1 = self.pdf[i], self.pdf[i + 1]
        u = z - x0
        slope = (p1 - p0) / (x1 - x0)
        return self._cdf_grid[i] + p0 * u + 0.5 * slope * u * u

    def sample(self, rng: np.random.Generator, size=None):
        if self.kind == "finite":
            if self.atoms.size == 1:
                return self.atoms[0] if size is None else np.full(size, self.atoms[0])
            return rng.choice(self.atoms, size=size, p=self.weights)
        return self.quantile(rng.random(size))

    def expect(self, f: Callable) -> float:
        """``int f(z) m(dz)``; trapezoid quadrature on a fine grid for densities."""
        if self.kind == "finite":
            return float(np.sum(self.weights * np.asarray(f(self.atoms), dtype=float)))
        fine = np.linspace(self.grid[0], self.grid[-1], 4097)
        dens = np.interp(fine, self.grid, self.pdf)
        vals = np.asarray(f(fine), dtype=float) * dens
        return float(np.trapezoid(vals, fine))

    def to_dict(self) -> dict:
        if self.kind == "finite":
            return {"kind": "finite", "atoms": self.atoms.tolist(), "weights": self.weights.tolist()}
        return {"kind": "density", "grid": self.grid.tolist(), "pdf": self.pdf.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MarkMeasure":
        kind = d.get("kind")
        if kind == "finite":
            return cls.finite(d["atoms"], d["weights"])
        if kind == "density":
            return cls.from_density(d["grid"], d["pdf"])
        raise ValueError(f"unknown mark measure kind {kind!r}")


@dataclass(frozen=True)
class StabilityReport:
    branching_ratio: float
    regime: str  # "subcritical" | "critical" | "supercritical"
    baseline_max: float


@dataclass(frozen=True, eq=False)
class HawkesSpec:
    """Exponential-kernel marked Hawkes process on ``[0, horizon]``.

    ``baseline`` is a constant or a piecewise-linear table ``(times, values)``.
    ``weights``/``decays`` are the ``d_j``/``q_j`` of the kernel
    ``sum_j d_j exp(-q_j t)``.  ``allow_unstable`` lets critical or
    supercritical parameter sets through with a warning (finite horizons are
    always well defined).
    """

    baseline: float | tuple = 1.0
    weights: Sequence[float] = (1.0,)
    decays: Sequence[float] = (1.0,)
    marks: MarkMeasure = field(default_factory=lambda: MarkMeasure.dirac(1.0))
    mark_impact: Callable = _one
    horizon: float = 1.0
    allow_unstable: bool = False
    moment_order: float = 2.0

    def __post_init__(self):
        d = np.atleast_1d(np.asarray(self.weights, dtype=float))
        q = np.atleast_1d(np.asarray(self.decays, dtype=float))
        if d.shape != q.shape or d.size == 0:
            raise ValueError("weights and decays must be non-empty and of equal length")
        if np.any(q <= 0):
            raise ValueError("all decay rates must be positive")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        object.__setattr__(self, "weights", d)
        object.__setattr__(self, "decays", q)
        if np.isscalar(self.baseline):
            b_t = np.array([0.0, self.horizon])
            b_v = np.array([float(self.baseline)] * 2)
        else:
            b_t, b_v = (np.asarray(a, dtype=float) for a in self.baseline)
            if b_t.shape != b_v.shape or b_t.size < 1 or np.any(np.diff(b_t) <= 0):
                raise ValueError("baseline table must have increasing times")
        if np.any(b_v < 0) or not np.all(np.isfinite(b_v)):
            raise ValueError("baseline must be finite and nonnegative")
        object.__setattr__(self, "_bt", b_t)
        object.__setattr__(self, "_bv", b_v)
        report = self.stability()
        if report.regime != "subcritical":
            msg = (f"Hawkes branching ratio {report.branching_ratio:.4g} is "
                   f"{report.regime}; the stability condition fails")
            if not self.allow_unstable:
                raise ValueError(msg + " (set allow_unstable to run on a finite horizon)")
            warnings.warn(msg + "; proceeding on the finite horizon", RuntimeWarning, stacklevel=3)

    @property
    def n(self) -> int:
        return self.weights.size

    @property
    def constant_baseline(self) -> bool:
        return bool(np.all(self._bv == self._bv[0]))

    def baseline_at(self, t):
        return np.interp(t, self._bt, self._bv)

    @property
    def baseline_max(self) -> float:
        return float(self._bv.max())

    def rho(self, z):
        return np.asarray(self.mark_impact(z), dtype=float)

    @property
    def rho_mean(self) -> float:
        return self.marks.expect(self.rho)

    def stability(self) -> StabilityReport:
        rho_star = self.marks.expect(lambda z: np.abs(self.rho(z)) ** self.moment_order)
        ratio = float(rho_star * np.sum(self.weights / self.decays))
        if abs(ratio - 1.0) <= 1e-12:
            regime = "critical"
        elif ratio < 1.0:
            regime = "subcritical"
        else:
            regime = "supercritical"
        return StabilityReport(ratio, regime, self.baseline_max)

    def to_dict(self) -> dict:
        return {
            "baseline": (float(self._bv[0]) if self.constant_baseline
                         else {"times": self._bt.tolist(), "values": self._bv.tolist()}),
            "components": [{"d": float(d), "q": float(q)} for d, q in zip(self.weights, self.decays)],
            "mark_impact": getattr(self.mark_impact, "__name__", "custom"),
            "mark_measure": self.marks.to_dict(),
            "horizon": float(self.horizon),
        }

    @classmethod
    def from_dict(cls, d: dict, mark_impact: Callable | None = None, **kw) -> "HawkesSpec":
        """Inverse of ``to_dict``; a custom ``mark_impact`` must be passed back in."""
        if d.get("mark_impact", "_one") not in ("_one", "ones") and mark_impact is None:
            raise ValueError("custom mark_impact cannot be restored from its name")
        b = d["baseline"]
        baseline = b if np.isscalar(b) else (b["times"], b["values"])
        comps = d["components"]
        return cls(baseline=baseline, weights=[c["d"] for c in comps], decays=[c["q"] for c in comps],
                   marks=MarkMeasure.from_dict(d["mark_measure"]), horizon=d["horizon"],
                   mark_impact=mark_impact or _one, **kw)


@dataclass(frozen=True, eq=False)
class IntensityState:
    t: float
    sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "sigma", np.atleast_1d(np.asarray(self.sigma, dtype=float)))


@dataclass(frozen=True, eq=False)
class EventLog:
    times: np.ndarray
    marks: np.ndarray

    def __len__(self):
        return self.times.size

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "mark"])
        for t, z in zip(self.times, self.marks):
            w.writerow([repr(float(t)), repr(float(z))])
        return buf.getvalue()


def decay_step(state: IntensityState, dt: float, decays) -> IntensityState:
    if dt < 0:
        raise ValueError(f"decay step must be nonnegative, got {dt}")
    q = np.asarray(decays, dtype=float)
    return IntensityState(state.t + dt, state.sigma * np.exp(-q * dt))


def intensity_at(spec: HawkesSpec, state: IntensityState) -> float:
    return float(spec.baseline_at(state.t) + spec.weights @ state.sigma)


def simulate_hawkes(spec: HawkesSpec, seed: int, initial=None, max_events: int = 10**6):
    """Exact simulation by Ogata thinning.

    Between events each ``d_j s_j`` term moves monotonically toward zero, so
    ``max(baseline) + sum_j max(d_j s_j, 0)`` bounds the intensity until the
    next accepted event.
    """
    rng = np.random.default_rng(seed)
    s = np.zeros(spec.n) if initial is None else np.array(
        initial.sigma if isinstance(initial, IntensityState) else initial, dtype=float)
    d, q, T = spec.weights, spec.decays, spec.horizon
    lam_base = spec.baseline_max
    t = 0.0
    times: list[float] = []
    marks: list[float] = []
    while True:
        bound = lam_base + np.maximum(d * s, 0.0).sum()
        if bound <= 0.0:
            s = s * np.exp(-q * (T - t))
            break
        w = rng.exponential(1.0 / bound)
        if t + w > T:
            s = s * np.exp(-q * (T - t))
            break
        t += w
        s = s * np.exp(-q * w)
        lam = max(float(spec.baseline_at(t) + d @ s), 0.0)
        if rng.random() * bound <= lam:
            z = float(spec.marks.sample(rng))
            s = s + float(spec.rho(z))
            times.append(t)
            marks.append(z)
            if len(times) > max_events:
                raise ExplosionError(
                    f"more than {max_events} events before t={t:.6g} (intensity {lam:.4g})")
    log = EventLog(np.asarray(times, dtype=float), np.asarray(marks, dtype=float))
    return log, IntensityState(T, s)


def simulate_many(spec: HawkesSpec, seeds: Sequence[int], initial=None, max_events: int = 10**6):
    return [simulate_hawkes(spec, int(sd), initial, max_events)[0] for sd in seeds]


def _initial(spec, initial):
    if initial is None:
        return np.zeros(spec.n)
    return np.asarray(initial.sigma if isinstance(initial, IntensityState) else initial, dtype=float)


def intensity_path(spec: HawkesSpec, log: EventLog, times, initial=None) -> np.ndarray:
    """Left-limit intensity ``lambda(t-)`` at the requested times."""
    s0 = _initial(spec, initial)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    q, d = spec.decays, spec.weights
    out = spec.baseline_at(times) + (s0[None, :] * np.exp(-np.outer(times, q))) @ d
    if len(log):
        rho = spec.rho(log.marks)
        lag = times[:, None] - log.times[None, :]
        mask = lag > 0
        for j in range(spec.n):
            kern = np.where(mask, np.exp(-q[j] * np.where(mask, lag, 0.0)), 0.0)
            out = out + d[j] * kern @ rho
    return out


def compensator(spec: HawkesSpec, log: EventLog, t_end: float | None = None, initial=None) -> float:
    """Exact ``int_0^t_end lambda(s) ds`` for a nonnegative intensity."""
    T = spec.horizon if t_end is None else t_end
    s0 = _initial(spec, initial)
    q, d = spec.decays, spec.weights
    tt = np.concatenate([spec._bt[spec._bt < T], [T]])
    if tt[0] > 0:
        tt = np.concatenate([[0.0], tt])
    vv = spec.baseline_at(tt)
    total = float(np.sum(0.5 * (vv[1:] + vv[:-1]) * np.diff(tt)))
    total += float(d @ (s0 * (1 - np.exp(-q * T)) / q))
    keep = log.times <= T
    if np.any(keep):
        rho = spec.rho(log.marks[keep])
        rem = T - log.times[keep]
        for j in range(spec.n):
            total += d[j] * float(np.sum(rho * (1 - np.exp(-q[j] * rem)) / q[j]))
    return total


def mean_intensity_ode(spec: HawkesSpec, t, initial=None, rel_step: float = 1e-4):
    """``E[lambda_t]`` from the linear moment ODE, fixed-step RK4.

    ``dE[s_j]/dt = -q_j E[s_j] + rho_bar (baseline(t) + d . E[s])`` with
    ``rho_bar = int rho dm``; the step never exceeds ``rel_step * horizon``.
    """
    scalar = np.isscalar(t)
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(ts < 0):
        raise ValueError("times must be nonnegative")
    q, d = spec.decays, spec.weights
    rb = spec.rho_mean
    hmax = rel_step * spec.horizon

    def rhs(tau, m):
        return -q * m + rb * (spec.baseline_at(tau) + d @ m)

    m = _initial(spec, initial).copy()
    cur = 0.0
    out = np.empty_like(ts)
    order = np.argsort(ts, kind="stable")
    for k in order:
        target = ts[k]
        n_steps = int(np.ceil((target - cur) / hmax - 1e-9))
        if n_steps > 0:
            hs = (target - cur) / n_steps
            for i in range(n_steps):
                tau = cur + i * hs
                k1 = rhs(tau, m)
                k2 = rhs(tau + hs / 2, m + hs / 2 * k1)
                k3 = rhs(tau + hs / 2, m + hs / 2 * k2)
                k4 = rhs(tau + hs, m + hs * k3)
                m = m + hs / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            cur = target
        out[k] = spec.baseline_at(target) + d @ m
    return float(out[0]) if scalar else out
