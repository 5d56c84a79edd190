"""Self-exciting shocks: one sample path, the mean intensity and the compensator.

The kernel used by the OU cyber preset has d = q = 1 and unit marks, which
makes the branching ratio exactly one.  Over a unit horizon the mean
intensity still grows only linearly, E[lambda_t] = lambda_0 + t.

    python3 demos/hawkes_intensity.py [n_paths]
"""
import math
import sys
import warnings

import numpy as np

from hawkes_mca import HawkesSpec, MarkMeasure, compensator, intensity_path, mean_intensity_ode, simulate_hawkes

n_paths = int(sys.argv[1]) if len(sys.argv) > 1 else 5000

with warnings.catch_warnings():
    warnings.simplefilter("ignore", RuntimeWarning)
    spec = HawkesSpec(baseline=1.0, weights=[1.0], decays=[1.0], marks=MarkMeasure.dirac(1.0),
                      horizon=1.0, allow_unstable=True)
print(f"branching ratio {spec.stability().branching_ratio:.3f} ({spec.stability().regime})")

# a single path
log, _ = simulate_hawkes(spec, seed=2)
print(f"\nseed 2: {len(log)} events at", np.round(log.times, 3))
grid = np.linspace(0, 1, 11)
print("lambda(t-) on a coarse grid:", np.round(intensity_path(spec, log, grid), 3))

# many paths against the moment ODE
probe = np.array([0.25, 0.5, 1.0])
lam = np.empty((n_paths, probe.size))
resid = np.empty(n_paths)
for s in range(n_paths):
    log, _ = simulate_hawkes(spec, s)
    lam[s] = intensity_path(spec, log, probe + 1e-13)
    resid[s] = len(log) - compensator(spec, log)

ode = mean_intensity_ode(spec, probe)
se = lam.std(axis=0, ddof=1) / math.sqrt(n_paths)
print(f"\n{'t':>5} {'MC mean':>9} {'s.e.':>7} {'ODE':>7}")
for t, m, e, o in zip(probe, lam.mean(axis=0), se, ode):
    print(f"{t:5.2f} {m:9.4f} {e:7.4f} {o:7.4f}")
print(f"\nN_T - compensator: mean {resid.mean():+.4f}, s.e. {resid.std(ddof=1) / math.sqrt(n_paths):.4f}")
