"""Reaction-diffusion with a regularized drift on a perforated thin layer.

Solvers for the layer problem at finite ``eps``, for its four limit models,
and sweeps that compare them.
"""

from .drift import DriftPolynomial, Mollifier, RegularizedDrift, eval_P, eval_P_delta
from .errors import *  # noqa: F401,F403
from .fem import TransientField
from .geometry import LayerGeometry, StandardCell, TaggedMesh, build_standard_cell, triangulate
from .macro import (
    MacroS1Solution,
    MacroS2Solution,
    MacroS3Solution,
    solve_cell_problem_S1,
    solve_macro,
    solve_macro_S1,
    solve_macro_S2,
    solve_macro_S3S4,
)
from .micro import MicroSolution, energy_report, solve_micro
from .problem import (
    ProblemConfig,
    ScalingExponents,
    classify_scaling,
    config_from_dict,
    lambda_switches,
    load_config,
    validate_assumptions,
)
from .study import ConvergenceReport, fit_rate, l2_error, study_delta, study_eps

__version__ = "0.1.0"
