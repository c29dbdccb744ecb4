"""flowlab: simulate stochastic flows and test moment, Hoelder and derivative bounds."""

from .model import (
    DegeneratePairError,
    DomainError,
    EvaluationError,
    FlowlabError,
    Lyapunov,
    ModelSpec,
    quadratic_lyapunov,
    zero_lyapunov,
)
from .sim import FlowGrid, PathEnsemble, DerivativeEnsemble, simulate_flow, simulate_variational, difference_quotient
from .checker import SampleRegion, certify, fit_constants
from .estimate import BoundReport
from .zoo import model_by_name, NAMES

__version__ = "0.1.0"

__all__ = [
    "DegeneratePairError", "DomainError", "EvaluationError", "FlowlabError", "Lyapunov", "ModelSpec",
    "quadratic_lyapunov", "zero_lyapunov", "FlowGrid", "PathEnsemble", "DerivativeEnsemble", "simulate_flow",
    "simulate_variational", "difference_quotient", "SampleRegion", "certify", "fit_constants", "BoundReport",
    "model_by_name", "NAMES",
]
