"""Discrete Wiener-space toolkit for drift transport and strong-solution diagnostics."""

from .drifts import DriftModel, audit_hypotheses, catalog, ito_f, make_drift
from .errors import (
    ConditioningError,
    DimensionError,
    DivergenceError,
    DomainError,
    DriftEvaluationError,
    GuardError,
    SdeLabError,
    ShapeError,
    ValidationError,
)
from .grid import CMVector, LowerPath, RngStream, SheetBatch, TimeGrid, UpperSheet, sample_sheets
from .heat import PathFunctional, ScoreField, martingale_diagnostics, q_estimate, score
from .transport import apply_V, det2, det2_causality_check, pushforward_density_check, solve_U
from .variational import FeedbackPolicy, K_direct, K_reduced, canonical_minimizer, minimize_K
from .regularization import RegularizedFunctional, build_f_n, extract_lower_drift, haar_basis

__all__ = [
    "DriftModel", "audit_hypotheses", "catalog", "ito_f", "make_drift",
    "ConditioningError", "DimensionError", "DivergenceError", "DomainError", "DriftEvaluationError",
    "GuardError", "SdeLabError", "ShapeError", "ValidationError",
    "CMVector", "LowerPath", "RngStream", "SheetBatch", "TimeGrid", "UpperSheet", "sample_sheets",
    "PathFunctional", "ScoreField", "martingale_diagnostics", "q_estimate", "score",
    "apply_V", "det2", "det2_causality_check", "pushforward_density_check", "solve_U",
    "FeedbackPolicy", "K_direct", "K_reduced", "canonical_minimizer", "minimize_K",
    "RegularizedFunctional", "build_f_n", "extract_lower_drift", "haar_basis",
]
