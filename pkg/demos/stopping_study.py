"""When does the manager abandon the project?

For three injection regimes (none, phi = 3, phi = 0.01) the optimal policy is
rolled out from x0 = 0 at several initial intensities.  Without injection
the project is stopped earlier as lambda0 grows; cheap injection keeps it
alive to maturity.

    python3 demos/stopping_study.py [n_paths]
"""
import sys

import numpy as np

from hawkes_mca.presets import OUCyberParams, lambda_to_sigma, ou_cyber
from hawkes_mca.validate import stopping_study

n_paths = int(sys.argv[1]) if len(sys.argv) > 1 else 2000


def factory(phi):
    p = OUCyberParams(phi=phi)
    m, c = ou_cyber(p)
    return m, c, lambda l: np.array([lambda_to_sigma(l, p)])


rows = stopping_study(factory, [None, 3.0, 0.01], [0.5, 1.0, 2.0, 4.0], h=0.005, x0=0.0,
                      n_paths=n_paths, seed=7, M=21, n_marks=8)
print(f"{'phi':>6} {'lambda0':>8} {'mean tau*':>10} {'matured':>8} {'payoff':>8}")
for r in rows:
    phi = "inf" if r.phi is None else f"{r.phi:g}"
    print(f"{phi:>6} {r.lam0:8.1f} {r.mean_tau:10.3f} {r.maturity_fraction:8.3f} {r.mean_payoff:8.3f}")
