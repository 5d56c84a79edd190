"""Value function of the OU cyber problem and its convergence in h.

Prints V_0 on a few (x0, lambda0) points at the finest spacing and the
successive differences |V^{h/2} - V^h|, which shrink roughly by half per
halving.  Near the cap x = 1 the value approaches the ceiling 1/eta = 10.

    python3 demos/value_surface.py [phi]
"""
import sys

import numpy as np

from hawkes_mca import backward_solve, build_lattice, query_value
from hawkes_mca.presets import OUCyberParams, lambda_to_sigma, ou_cyber
from hawkes_mca.validate import h_sweep

phi = float(sys.argv[1]) if len(sys.argv) > 1 else 1.0
p = OUCyberParams(phi=phi)
model, cost = ou_cyber(p)
to_sigma = lambda l: np.array([lambda_to_sigma(l, p)])

lat = build_lattice(model, 0.005, M=21, n_marks=8)
table, policy = backward_solve(model, cost, lat)
print(f"phi={phi}, h=0.005: {lat.nx} x-nodes, {lat.n_sigma} excitation nodes, {lat.n_steps} layers")

xs = (-0.5, 0.0, 0.5, 0.95)
lams = (0.5, 1.0, 2.0, 4.0)
print("\nV_0(x0, lambda0)")
print("x0 \\ lam0 " + "".join(f"{l:>9.1f}" for l in lams))
for x0 in xs:
    print(f"{x0:>9.2f} " + "".join(f"{query_value(table, 0.0, x0, to_sigma(l)):9.4f}" for l in lams))

probes = [(0.0, 0.5), (0.0, 1.0), (0.5, 0.5), (0.5, 1.0)]
rep = h_sweep(model, cost, [0.04, 0.02, 0.01, 0.005], probes, to_sigma, M=21, n_marks=8)
print("\nsuccessive differences |V^{h/2} - V^h|")
for k, (x0, l0) in enumerate(probes):
    print(f"  ({x0}, {l0}): " + "  ".join(f"{d:.4f}" for d in rep.diffs[:, k]))
print("nonincreasing:", rep.cauchy_ok())
