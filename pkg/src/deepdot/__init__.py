"""Diffuse optical tomography: diffusion forward model, classical inverse
solvers, a learned reconstruction network and evaluation tools."""

from .errors import (
    ContractViolation,
    DatasetError,
    DegenerateInput,
    DivergenceError,
    DOTError,
    GenerationFailure,
    InvalidArgument,
    SolverFailure,
)
from .forward import ForwardModel, OpticalMedium, born_jacobian, multistatic
from .geometry import DeltaMuVolume, Inclusion, Phantom, PhantomSpec, build_grid, grid_probe_layout
from .metrics import batch_evaluate, cnr, evaluate_pair, pearson, rmse, ssim
from .network import NetworkSpec, count_params, standard_spec, train
from .recon import LMConfig, SparseConfig, lm_reconstruct, mm_sparse_reconstruct

__version__ = "0.1.0"

__all__ = [
    "ContractViolation",
    "DatasetError",
    "DegenerateInput",
    "DivergenceError",
    "DOTError",
    "GenerationFailure",
    "InvalidArgument",
    "SolverFailure",
    "ForwardModel",
    "OpticalMedium",
    "born_jacobian",
    "multistatic",
    "DeltaMuVolume",
    "Inclusion",
    "Phantom",
    "PhantomSpec",
    "build_grid",
    "grid_probe_layout",
    "batch_evaluate",
    "cnr",
    "evaluate_pair",
    "pearson",
    "rmse",
    "ssim",
    "NetworkSpec",
    "count_params",
    "standard_spec",
    "train",
    "LMConfig",
    "SparseConfig",
    "lm_reconstruct",
    "mm_sparse_reconstruct",
]
