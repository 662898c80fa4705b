"""Certified reduced basis model predictive control of parametrized parabolic PDEs."""

from .config import ExperimentConfig, load_config, preset_config
from .garding import GardingData, transform_spec, untransform_solution
from .mpc import MPCConfig, MPCTrace, adaptive_rb_mpc, fe_mpc, fe_mpc_step, rb_suboptimality
from .ocp import OCPSpec, DiscreteModel, SolverOptions, solve_ocp, kkt_direct_solve
from .problem import Problem
from .rb import (GreedyConfig, ReducedBasisBundle, ReducedSolver, load_bundle, pod_greedy,
                 save_bundle)

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "load_config", "preset_config", "GardingData", "transform_spec",
           "untransform_solution", "MPCConfig", "MPCTrace", "adaptive_rb_mpc", "fe_mpc",
           "fe_mpc_step", "rb_suboptimality", "OCPSpec", "DiscreteModel", "SolverOptions",
           "solve_ocp", "kkt_direct_solve", "Problem", "GreedyConfig", "ReducedBasisBundle",
           "ReducedSolver", "load_bundle", "pod_greedy", "save_bundle"]
