"""Linear inverse problems solved in the latent space of a flow prior."""
from .experiments import (
    Cell,
    PerturbationTable,
    SweepTable,
    gamma_sweep,
    measurement_sweep,
    perturbation_sensitivity,
    run_cells,
)
from .lasso import dct_basis, lasso_cd, lasso_dct, soft_threshold
from .metrics import PSNR_CAP, psnr, ssim
from .operators import MeasurementOperator, make_measurements
from .solver import InitStrategy, InverseProblemSpec, RecoveryReport, lbfgs, solve
from .vecio import VectorFileError, read_samples, read_vector, write_vector

__all__ = [
    "Cell",
    "PerturbationTable",
    "SweepTable",
    "gamma_sweep",
    "measurement_sweep",
    "perturbation_sensitivity",
    "run_cells",
    "dct_basis",
    "lasso_cd",
    "lasso_dct",
    "soft_threshold",
    "PSNR_CAP",
    "psnr",
    "ssim",
    "MeasurementOperator",
    "make_measurements",
    "InitStrategy",
    "InverseProblemSpec",
    "RecoveryReport",
    "lbfgs",
    "solve",
    "VectorFileError",
    "read_samples",
    "read_vector",
    "write_vector",
]
