"""Heteroskedasticity-robust batched OLS (BOLS) inference for batched adaptive experiments."""

from .core import (
    BatchSummary,
    BatchValidity,
    ExperimentTrace,
    UnitRecords,
    Validity,
    VarianceMode,
    summarize_batch,
    validate_batch,
)
from .estimators import (
    HET_BOLS,
    HOM_BOLS,
    ROBUST_OLS,
    EstimatorReport,
    het_bols,
    hom_bols,
    robust_ols,
    weight_table,
)
from .montecarlo import MCGridSpec, run_cell, run_experiment, run_grid
from .outcomes import ArmDistribution
from .policies import PolicyConfig, PolicyState, assign_batch, update_state
from .stats import RandomStream, ks_distance, normal_cdf, normal_quantile

__version__ = "0.1.0"

__all__ = [
    "ArmDistribution",
    "BatchSummary",
    "BatchValidity",
    "EstimatorReport",
    "ExperimentTrace",
    "HET_BOLS",
    "HOM_BOLS",
    "MCGridSpec",
    "PolicyConfig",
    "PolicyState",
    "ROBUST_OLS",
    "RandomStream",
    "UnitRecords",
    "Validity",
    "VarianceMode",
    "assign_batch",
    "het_bols",
    "hom_bols",
    "ks_distance",
    "normal_cdf",
    "normal_quantile",
    "robust_ols",
    "run_cell",
    "run_experiment",
    "run_grid",
    "summarize_batch",
    "update_state",
    "validate_batch",
    "weight_table",
]
