"""Finite-difference laboratory for parabolic complex Monge-Ampere flows on flat tori."""
from .chern_ricci import CRFProblem, estimate_tmax, run_crf, smoothing_diagnostic
from .elliptic import check_elliptic_stability, check_minimum_principle, psh_envelope, solve_elliptic
from .errors import (AdmissibilityError, CMAFError, ConfigurationError, DomainError, GeometryError,
                     PreconditionError, SolverError, StepError)
from .estimates import EstimateRecord, EstimateReport
from .experiment import run_experiment
from .flow import (FlowTrajectory, Schedule, graded_times, model_density, regularization_ladder, run_flow,
                   step_implicit)
from .grid import HermitianField, ScalarField, TorusGrid, build_degenerate_big_form, build_flat_geometry
from .ma_core import check_mixed_inequality, complex_hessian, ma_density

__version__ = "0.1.0"

__all__ = [
    "AdmissibilityError", "CMAFError", "CRFProblem", "ConfigurationError", "DomainError", "EstimateRecord",
    "EstimateReport", "FlowTrajectory", "GeometryError", "HermitianField", "PreconditionError", "ScalarField",
    "Schedule", "SolverError", "StepError", "TorusGrid", "build_degenerate_big_form", "build_flat_geometry",
    "check_elliptic_stability", "check_minimum_principle", "check_mixed_inequality", "complex_hessian",
    "estimate_tmax", "graded_times", "ma_density", "model_density", "psh_envelope", "regularization_ladder",
    "run_crf", "run_experiment", "run_flow", "smoothing_diagnostic", "solve_elliptic", "step_implicit",
]
