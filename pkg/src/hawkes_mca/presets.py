"""Ready-made model/cost pairs.

``ou_cyber`` is the mean-reverting project value hit by self-exciting
downward shocks::

    dX = (alpha - delta X) dt + sigma dW + dxi - dN
    dlam = -q (lam - a) dt + dN

with a put-style stop payoff ``(I - x)^+`` and terminal payoff
``(x^+)^(1 - eta) / eta``.  ``X`` lives on ``[x_min, 1]``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from .dynamics import CostSpec, ModelSpec
from .hawkes import HawkesSpec, MarkMeasure

__all__ = ["OUCyberParams", "ou_cyber", "lambda_to_sigma", "sigma_to_lambda", "PRESETS"]


@dataclass(frozen=True)
class OUCyberParams:
    alpha: float = 0.5
    delta: float = 1.0
    vol: float = 0.1
    eta: float = 0.1
    q: float = 1.0
    a: float = 1.0
    d: float = 1.0
    r: float = 0.0
    T: float = 1.0
    insured_floor: float = 0.5
    phi: float | None = 1.0  # None disables injection
    x_min: float = -1.0
    x_max: float = 1.0
    # excitation grid; ς = lam - a may be negative when lam0 < a
    sigma_min: float = -1.0
    sigma_max: float = 9.0
    discount_stop: bool = True
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def lambda_to_sigma(lam0: float, p: OUCyberParams) -> float:
    # without excitation the intensity is a regardless of s0
    if p.d == 0:
        return 0.0
    return (lam0 - p.a) / p.d


def sigma_to_lambda(s: float, p: OUCyberParams) -> float:
    return p.a + p.d * s


def ou_cyber(p: OUCyberParams | None = None, quiet: bool = True):
    """Build ``(ModelSpec, CostSpec)``.

    The kernel with ``d = q = 1`` and unit marks has branching ratio 1, so
    the process is critical; it is admitted over a finite horizon.
    """
    p = p or OUCyberParams()
    with warnings.catch_warnings():
        if quiet:
            warnings.simplefilter("ignore", RuntimeWarning)
        hk = HawkesSpec(baseline=p.a, weights=[p.d], decays=[p.q], marks=MarkMeasure.dirac(1.0),
                        horizon=p.T, allow_unstable=True)
    alpha, delta, vol = p.alpha, p.delta, p.vol
    model = ModelSpec(
        drift=lambda x: alpha - delta * np.asarray(x, dtype=float),
        volatility=lambda x, b: vol * b * np.ones_like(np.asarray(x, dtype=float)),
        jump=lambda x, z, g: -np.ones_like(np.asarray(x, dtype=float) * np.asarray(z, dtype=float)),
        hawkes=hk,
        L=p.x_max,
        x_lower=p.x_min,
        sigma_box=(p.sigma_min, p.sigma_max),
    )
    I, eta = p.insured_floor, p.eta
    cost = CostSpec(
        stop_payoff=lambda x: np.maximum(I - np.asarray(x, dtype=float), 0.0),
        terminal_payoff=lambda x: np.maximum(np.asarray(x, dtype=float), 0.0) ** (1 - eta) / eta,
        injection_cost=p.phi,
        discount=p.r,
        discount_stop=p.discount_stop,
        params=p.to_dict(),
    )
    return model, cost


PRESETS = {"ou-cyber-sec5": OUCyberParams}
