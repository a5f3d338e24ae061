"""Optimal control of semilinear parabolic equations and value-function checks."""

__version__ = "0.1.0"

from .core import (Field, Grid, InvalidArgument, ModelViolation, Nonlinearity, ProblemSpec,
                   PvlabError, SolverFailure, SpatialField, StructuralError, default_spec)
from .optim import (CONDITIONAL_GRADIENT, LBFGSB, PROJECTED_GRADIENT, ControlBlocks,
                    OptimizeOptions, OptimizeReport, minimize, objective, oracle_enumerate,
                    value)
from .pde import SolveOptions, solve_adjoint, solve_linear_parabolic, solve_linearized, \
    solve_state

__all__ = [
    "CONDITIONAL_GRADIENT", "LBFGSB", "PROJECTED_GRADIENT", "ControlBlocks", "Field", "Grid",
    "InvalidArgument", "ModelViolation", "Nonlinearity", "OptimizeOptions", "OptimizeReport",
    "ProblemSpec", "PvlabError", "SolveOptions", "SolverFailure", "SpatialField",
    "StructuralError", "default_spec", "minimize", "objective", "oracle_enumerate",
    "solve_adjoint", "solve_linear_parabolic", "solve_linearized", "solve_state", "value",
]
