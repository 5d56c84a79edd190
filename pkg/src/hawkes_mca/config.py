"""TOML run configuration with preset expansion.

A minimal file is ``preset = "ou-cyber-sec5"``.  Sections ``model``,
``hawkes``, ``cost``, ``lattice``, ``solver`` and ``simulate`` override the
preset defaults; unknown keys are rejected with their key path.
"""
from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .presets import PRESETS, OUCyberParams, lambda_to_sigma, ou_cyber

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["ConfigError", "RunConfig", "LatticeConf", "SolverConf", "SimulateConf",
           "load_config", "parse_config", "check_h", "OUT_ENV"]

OUT_ENV = "HAWKES_MCA_OUT"
DEFAULT_PRESET = "ou-cyber-sec5"


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class LatticeConf:
    h: float = 0.02
    M: int = 21
    marks: int = 8


@dataclass(frozen=True)
class SolverConf:
    probes: tuple = ((0.0, 1.0),)  # (x0, lambda0)
    h_list: tuple = (0.04, 0.02, 0.01, 0.005)
    L_list: tuple = (1.0, 2.0, 3.0)
    lambda0_grid: tuple = (0.5, 1.0, 2.0, 4.0)
    phis: tuple = (None, 3.0, 0.01)  # None: injection disabled
    paths: int = 2000
    x0: float = 0.0


@dataclass(frozen=True)
class SimulateConf:
    dt: float = 0.001
    paths: int = 1
    x0: float = 0.0
    lambda0: float = 1.0
    inject_time: float = 0.5
    inject_amount: float = 0.5
    chain_h: tuple = ()


@dataclass(frozen=True)
class RunConfig:
    preset: str
    params: OUCyberParams
    lattice: LatticeConf = LatticeConf()
    solver: SolverConf = SolverConf()
    simulate: SimulateConf = SimulateConf()
    tables: dict = field(default_factory=dict)  # explicit drift/vol/jump tables
    out_dir: str | None = None
    seed: int | None = None

    def model_cost(self, phi="default", **overrides):
        p = self.params
        if phi != "default":
            overrides["phi"] = phi
        if overrides:
            p = replace(p, **overrides)
        model, cost = ou_cyber(p)
        if self.tables:
            model = _apply_tables(model, self.tables)
        return model, cost

    def lam_to_sigma(self, lam0: float) -> np.ndarray:
        s = lambda_to_sigma(lam0, self.params)
        lo, hi = self.params.sigma_min, self.params.sigma_max
        if not lo - 1e-12 <= s <= hi + 1e-12:
            raise ConfigError("lambda0", f"lambda0={lam0} maps outside the excitation grid "
                                         f"[{lo}, {hi}]")
        return np.array([s])

    def to_dict(self) -> dict:
        d = {
            "preset": self.preset,
            "params": self.params.to_dict(),
            "lattice": asdict(self.lattice),
            "solver": {k: _jsonable(v) for k, v in asdict(self.solver).items()},
            "simulate": {k: _jsonable(v) for k, v in asdict(self.simulate).items()},
            "tables": self.tables,
            "seed": self.seed,
        }
        return d

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def output_dir(self, override: str | None = None) -> Path:
        return Path(override or self.out_dir or os.environ.get(OUT_ENV) or "hawkes_mca_out")


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


def _apply_tables(model, tables):
    from .dynamics import ModelSpec

    def interp(key):
        xs, ys = (np.asarray(v, dtype=float) for v in tables[key])
        return lambda x: np.interp(np.asarray(x, dtype=float), xs, ys)

    kw = {}
    if "drift" in tables:
        kw["drift"] = interp("drift")
    if "vol" in tables:
        f = interp("vol")
        kw["volatility"] = lambda x, b: b * f(x)
    if "jump" in tables:
        f = interp("jump")
        kw["jump"] = lambda x, z, g: f(x) * np.ones_like(np.asarray(z, dtype=float))
    return replace(model, **kw)


# key -> (section, field in OUCyberParams)
_PARAM_KEYS = {
    "model": {"alpha": "alpha", "delta": "delta", "vol": "vol", "x_min": "x_min",
              "x_max": "x_max", "L": "x_max", "sigma_min": "sigma_min", "sigma_max": "sigma_max"},
    "hawkes": {"q": "q", "a": "a", "d": "d", "T": "T"},
    "cost": {"phi": "phi", "r": "r", "I": "insured_floor", "eta": "eta",
             "discount_stop": "discount_stop"},
}
_TABLE_KEYS = ("drift_table", "vol_table", "jump_table")
_TOP_KEYS = {"preset", "seed", "out_dir", "model", "hawkes", "cost", "lattice", "solver", "simulate"}


def _num(key, v, positive=False, integer=False, allow_inf=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        if allow_inf and isinstance(v, str) and v.lower() in ("inf", "none", "off"):
            return None
        raise ConfigError(key, f"expected a number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigError(key, f"expected an integer, got {v!r}")
    if not np.isfinite(v):
        if allow_inf:
            return None
        raise ConfigError(key, "must be finite")
    if positive and not v > 0:
        raise ConfigError(key, f"must be positive, got {v!r}")
    return int(v) if integer else float(v)


def _multiple(a: float, h: float) -> bool:
    k = round(a / h)
    return k >= 1 and abs(k * h - a) <= 1e-9 * max(1.0, abs(a))


def parse_config(raw: dict, base_dir: Path | None = None) -> RunConfig:
    """Validate a parsed TOML mapping and expand the preset."""
    for k in raw:
        if k not in _TOP_KEYS:
            raise ConfigError(k, "unknown key")
    preset = raw.get("preset", DEFAULT_PRESET)
    if preset not in PRESETS:
        raise ConfigError("preset", f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
    over = {}
    tables = {}
    for sec, keys in _PARAM_KEYS.items():
        body = raw.get(sec, {})
        if not isinstance(body, dict):
            raise ConfigError(sec, "expected a table")
        for k, v in body.items():
            path = f"{sec}.{k}"
            if sec == "model" and k in _TABLE_KEYS:
                if (not isinstance(v, list) or len(v) != 2 or len(v[0]) != len(v[1])
                        or len(v[0]) < 2):
                    raise ConfigError(path, "expected [[x...], [value...]] of equal length >= 2")
                tables[k[:-len("_table")]] = [[float(a) for a in v[0]], [float(a) for a in v[1]]]
                continue
            if k not in keys:
                raise ConfigError(path, "unknown key")
            if k == "discount_stop":
                if not isinstance(v, bool):
                    raise ConfigError(path, "expected true/false")
                over[keys[k]] = v
            elif k == "phi":
                val = _num(path, v, allow_inf=True)
                if val is not None and val < 0:
                    raise ConfigError(path, "injection cost must be nonnegative")
                over["phi"] = val
            elif k in ("r",):
                val = _num(path, v)
                if val < 0:
                    raise ConfigError(path, "discount must be nonnegative")
                over[keys[k]] = val
            elif k in ("alpha", "x_min", "sigma_min"):
                over[keys[k]] = _num(path, v)
            elif k == "d":
                over[keys[k]] = _num(path, v)
            else:
                over[keys[k]] = _num(path, v, positive=True)
    params = replace(PRESETS[preset](), **over)
    if not params.x_min < params.x_max:
        raise ConfigError("model.x_min", f"x_min={params.x_min} must be below x_max={params.x_max}")
    if not params.sigma_min <= 0 < params.sigma_max:
        raise ConfigError("model.sigma_min", "need sigma_min <= 0 < sigma_max")
    if params.eta >= 1:
        raise ConfigError("cost.eta", "eta must lie in (0, 1)")

    lat = _section(raw, "lattice", LatticeConf, {
        "h": lambda p, v: _num(p, v, positive=True),
        "M": lambda p, v: _num(p, v, positive=True, integer=True),
        "marks": lambda p, v: _num(p, v, positive=True, integer=True),
    })
    if lat.M < 2:
        raise ConfigError("lattice.M", "need at least two excitation grid points")
    check_h("lattice.h", lat.h, params)

    def probes(p, v):
        if not isinstance(v, list) or not all(isinstance(q, list) and len(q) == 2 for q in v):
            raise ConfigError(p, "expected a list of [x0, lambda0] pairs")
        return tuple((_num(p, a), _num(p, b)) for a, b in v)

    def numlist(positive=False):
        def conv(p, v):
            if not isinstance(v, list) or not v:
                raise ConfigError(p, "expected a nonempty list of numbers")
            return tuple(_num(p, a, positive=positive) for a in v)
        return conv

    def phis(p, v):
        if not isinstance(v, list) or not v:
            raise ConfigError(p, "expected a nonempty list")
        return tuple(_num(p, a, allow_inf=True) for a in v)

    sol = _section(raw, "solver", SolverConf, {
        "probes": probes,
        "h_list": numlist(True),
        "L_list": numlist(True),
        "lambda0_grid": numlist(True),
        "phis": phis,
        "paths": lambda p, v: _num(p, v, positive=True, integer=True),
        "x0": lambda p, v: _num(p, v),
    })
    for h in sol.h_list:
        check_h("solver.h_list", h, params)
    if any(b >= a for a, b in zip(sol.h_list, sol.h_list[1:])):
        raise ConfigError("solver.h_list", "must be strictly descending")
    sim = _section(raw, "simulate", SimulateConf, {
        "dt": lambda p, v: _num(p, v, positive=True),
        "paths": lambda p, v: _num(p, v, positive=True, integer=True),
        "x0": lambda p, v: _num(p, v),
        "lambda0": lambda p, v: _num(p, v),
        "inject_time": lambda p, v: _num(p, v),
        "inject_amount": lambda p, v: _num(p, v),
        "chain_h": numlist(True),
    })
    for h in sim.chain_h:
        check_h("simulate.chain_h", h, params)
    for path, x in (("solver.x0", sol.x0), ("simulate.x0", sim.x0)):
        if not params.x_min <= x <= params.x_max:
            raise ConfigError(path, f"x0={x} outside [{params.x_min}, {params.x_max}]")
    seed = raw.get("seed")
    if seed is not None:
        seed = _num("seed", seed, integer=True)
        if seed < 0:
            raise ConfigError("seed", "must be nonnegative")
    out_dir = raw.get("out_dir")
    if out_dir is not None:
        if not isinstance(out_dir, str):
            raise ConfigError("out_dir", "expected a path string")
        if base_dir is not None and not os.path.isabs(out_dir):
            out_dir = str(base_dir / out_dir)
    cfg = RunConfig(preset=preset, params=params, lattice=lat, solver=sol, simulate=sim,
                    tables=tables, out_dir=out_dir, seed=seed)
    for lam0 in sol.lambda0_grid:
        cfg.lam_to_sigma(lam0)
    for _, lam0 in sol.probes:
        cfg.lam_to_sigma(lam0)
    return cfg


def check_h(key, h, p: OUCyberParams):
    for name, wall in (("x_max", p.x_max), ("x_min", p.x_min)):
        if wall != 0 and not _multiple(abs(wall), h):
            raise ConfigError(key, f"h={h} does not divide {name}={wall}")


def _section(raw, name, cls, conv):
    body = raw.get(name, {})
    if not isinstance(body, dict):
        raise ConfigError(name, "expected a table")
    known = {f.name for f in fields(cls)}
    vals = {}
    for k, v in body.items():
        if k not in known or k not in conv:
            raise ConfigError(f"{name}.{k}", "unknown key")
        vals[k] = conv[k](f"{name}.{k}", v)
    return cls(**vals)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("<file>", f"config file {path} does not exist")
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"cannot parse {path}: {exc}") from None
    return parse_config(raw, base_dir=path.parent)
