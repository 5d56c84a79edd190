"""Markov chain approximation for stopping and singular control under Hawkes jumps."""

__version__ = "0.1.0"

from .hawkes import (EventLog, ExplosionError, HawkesSpec, IntensityState, MarkMeasure,
                     compensator, decay_step, intensity_at, intensity_path, mean_intensity_ode,
                     simulate_hawkes, simulate_many)
from .dynamics import (ControlPlan, CostSpec, ModelSpec, PathRecord, evaluate_payoff, inject_once,
                       simulate_controlled, skorokhod_reflect)
from .lattice import (AssemblyError, LatticeSpec, TransitionModel, assemble_transitions,
                      build_lattice, diffusion_probs, jump_cell_masses, jump_cells, lin_split,
                      product_split, time_step, voronoi_weights)
from .solver import (DIFFUSE, INJECT, STOP, Policy, ValueTable, backward_solve,
                     continuation_value, query_value, terminal_layer)
from .validate import (SweepReport, brute_force_value, h_sweep, L_sweep, local_consistency_audit,
                       push_forward, rollout_policy, stopping_study)
from .presets import OUCyberParams, ou_cyber

__all__ = [
    "EventLog", "ExplosionError", "HawkesSpec", "IntensityState", "MarkMeasure", "compensator",
    "decay_step", "intensity_at", "intensity_path", "mean_intensity_ode", "simulate_hawkes",
    "simulate_many", "ControlPlan", "CostSpec", "ModelSpec", "PathRecord", "evaluate_payoff",
    "inject_once", "simulate_controlled", "skorokhod_reflect", "AssemblyError", "LatticeSpec",
    "TransitionModel", "assemble_transitions", "build_lattice", "diffusion_probs",
    "jump_cell_masses", "jump_cells", "lin_split", "product_split", "time_step", "voronoi_weights",
    "DIFFUSE", "INJECT", "STOP", "Policy", "ValueTable", "backward_solve", "continuation_value",
    "query_value", "terminal_layer", "SweepReport", "brute_force_value", "h_sweep", "L_sweep",
    "local_consistency_audit", "push_forward", "rollout_policy", "stopping_study",
    "OUCyberParams", "ou_cyber",
]
