"""
Elastireg

Deformable image registration with a linear-elastic regularizer whose material
parameters are absorbed into the loss weights, a hypernetwork that amortizes
registration over those parameters, and a grid-search protocol for choosing them.
"""

from .amortizer import HyperNet, predict_field, train_amortized
from .energy import (
    AlphaWeighting,
    ElasticityParams,
    EnergyValue,
    RawElasticity,
    composite_loss_eq4,
    composite_loss_eq5,
    elastic_energy,
    ncc_local,
)
from .grid import DisplacementField, GridDomain, ScalarGrid, jacobian_determinant, warp
from .metrics import EvalCase, KeypointSet, LabelGrid, MetricsReport, evaluate_field
from .registration import OptimizerConfig, RegistrationResult, register_pair
from .sweep import enumerate_grid, run_sweep, select_optimum

__version__ = "0.1.0"
__all__ = [
    "AlphaWeighting",
    "DisplacementField",
    "ElasticityParams",
    "EnergyValue",
    "EvalCase",
    "GridDomain",
    "HyperNet",
    "KeypointSet",
    "LabelGrid",
    "MetricsReport",
    "OptimizerConfig",
    "RawElasticity",
    "RegistrationResult",
    "ScalarGrid",
    "composite_loss_eq4",
    "composite_loss_eq5",
    "elastic_energy",
    "enumerate_grid",
    "evaluate_field",
    "jacobian_determinant",
    "ncc_local",
    "predict_field",
    "register_pair",
    "run_sweep",
    "select_optimum",
    "train_amortized",
    "warp",
]
