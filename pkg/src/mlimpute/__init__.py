"""Imputation of multilevel quantitative, categorical and mixed data."""

from .benchmark import (SimulationConfig, apply_mcar_mask, generate_multilevel_data,
                        impute_global, impute_mean_proportion, impute_separate,
                        run_benchmark, score)
from .data import ColumnSchema, GroupStructure, MixedDataset
from .encoding import disjunctive_code, famd_transform, hard_assign, mca_transform
from .errors import MLImputeError
from .imputation import ImputationOptions, impute_mlfamd, impute_mlmca, impute_mlpca
from .linalg import power_method, truncated_svd
from .multilevel import fit_mlfamd, fit_mlmca, fit_mlpca
from .selection import cross_validate_ranks

__version__ = "0.1.0"

__all__ = [
    "ColumnSchema", "GroupStructure", "ImputationOptions", "MLImputeError", "MixedDataset",
    "SimulationConfig", "apply_mcar_mask", "cross_validate_ranks", "disjunctive_code",
    "famd_transform", "fit_mlfamd", "fit_mlmca", "fit_mlpca", "generate_multilevel_data",
    "hard_assign", "impute_global", "impute_mean_proportion", "impute_mlfamd",
    "impute_mlmca", "impute_mlpca", "impute_separate", "mca_transform", "power_method",
    "run_benchmark", "score", "truncated_svd",
]
