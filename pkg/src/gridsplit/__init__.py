"""Two-stage hybrid domain decomposition for power-system dynamic simulation.

Subsystems are decoupled by Schwarz-style boundary-bus relaxation; each
subsystem is solved by a Schur-complement split into subdomains. Devices are
classical synchronous machines and a small-signal grid-forming inverter.
"""
from .decomp import DecomposedSolver, PartitionPlan, RelaxationDivergence, make_partition, schur_solve
from .devices import GfmParams, MachineParams, gfm_build_state_space, gfm_eigen_stability
from .engine import (Event, ScenarioSpec, compare_to_benchmark, initialize, load_scenario, run,
                     write_csv)
from .integrate import IntegratorKind, StepSchedule
from .netcore import PowerFlowCase, build_admittance, load_case, solve_power_flow

__all__ = [
    "DecomposedSolver", "Event", "GfmParams", "IntegratorKind", "MachineParams", "PartitionPlan",
    "PowerFlowCase", "RelaxationDivergence", "ScenarioSpec", "StepSchedule", "build_admittance",
    "compare_to_benchmark", "gfm_build_state_space", "gfm_eigen_stability", "initialize",
    "load_case", "load_scenario", "make_partition", "run", "schur_solve", "solve_power_flow",
    "write_csv",
]
__version__ = "0.1.0"
