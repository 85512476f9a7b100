"""Euler-Maruyama simulation of McKean-Vlasov SDEs with Wasserstein diagnostics."""

from ._backend import BACKEND
from .brownian import TimeGrid
from .measure import EmpiricalMeasure, w2
from .model import LINEAR_EXAMPLE_CONSTANTS, AssumptionConstants, LinearMeanFieldModel, ModelSpec
from .scheme import InitialLaw, Kind, simulate

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "AssumptionConstants",
    "EmpiricalMeasure",
    "InitialLaw",
    "Kind",
    "LINEAR_EXAMPLE_CONSTANTS",
    "LinearMeanFieldModel",
    "ModelSpec",
    "TimeGrid",
    "simulate",
    "w2",
]
