"""
opflayer - unsupervised AC-OPF learning with an embedded fixed-point power-flow layer
"""

from importlib.metadata import PackageNotFoundError, version

from .casefile import (
    LoadDataset,
    RawCase,
    ReferenceSet,
    generate_dataset,
    load_case,
    load_reference_solutions,
    parse_matpower,
    write_metrics_csv,
)
from .config import (
    DatasetConfig,
    EstimationConfig,
    RunConfig,
    SolverConfig,
    TrainConfig,
    load_run_config,
)
from .diffgrad import (
    exact_implicit_jacobian_T,
    exact_implicit_jacobian_h,
    finite_diff_jacobian,
    kstep_jacobian,
    refinement_vjp,
)
from .enums import BusRole, FdpfVariant, GradientMode, Quantity, RefinementKind
from .error import (
    CaseParseError,
    CaseStructureError,
    CheckpointError,
    ConfigError,
    ConnectivityError,
    FactorizationError,
    OpfLayerError,
    ReferenceDataError,
    SingularJacobianError,
    SolverDivergedError,
    TrainingAbortedError,
    UnsupportedTopologyError,
)
from .evaluation import alignment_report, estimate_constants, estimate_contraction, evaluate
from .grid import FdpfFactors, GridModel, Partition, build_fdpf_matrices, build_grid
from .loss import DualState
from .model import (
    PredictionNetwork,
    decode_prediction,
    forward_full,
    mlp_forward,
    parameter_gradient,
)
from .pf import (
    SolveResult,
    branch_flows,
    completion_residual,
    fdpf_step,
    hybrid_solve,
    nr_step,
    pf_jacobian_x,
    pf_jacobian_z,
    post_complete,
    power_injections,
)
from .result import AlignmentRow, MetricsRecord, TheoremConstants, TrainHistory
from .study import OpfStudy
from .train import (
    dual_update,
    equality_values,
    inequality_values,
    lagrangian,
    objective_cost,
    primal_dual_train,
)
from .utils import enable_debug, setup_logging

try:
    __version__ = version("opflayer")
except PackageNotFoundError:
    __version__ = "dev"  # Fallback when package is not installed

__all__ = [
    # Entry point
    "OpfStudy",
    # Case files and datasets
    "RawCase",
    "parse_matpower",
    "load_case",
    "LoadDataset",
    "generate_dataset",
    "ReferenceSet",
    "load_reference_solutions",
    "write_metrics_csv",
    # Grid
    "GridModel",
    "Partition",
    "FdpfFactors",
    "build_grid",
    "build_fdpf_matrices",
    # Power flow
    "SolveResult",
    "power_injections",
    "completion_residual",
    "pf_jacobian_z",
    "pf_jacobian_x",
    "fdpf_step",
    "nr_step",
    "hybrid_solve",
    "post_complete",
    "branch_flows",
    # Sensitivities
    "exact_implicit_jacobian_h",
    "exact_implicit_jacobian_T",
    "kstep_jacobian",
    "refinement_vjp",
    "finite_diff_jacobian",
    # Model
    "PredictionNetwork",
    "mlp_forward",
    "decode_prediction",
    "forward_full",
    "parameter_gradient",
    # Training
    "DualState",
    "inequality_values",
    "equality_values",
    "objective_cost",
    "lagrangian",
    "dual_update",
    "primal_dual_train",
    # Evaluation
    "evaluate",
    "estimate_contraction",
    "estimate_constants",
    "alignment_report",
    # Results
    "MetricsRecord",
    "TheoremConstants",
    "AlignmentRow",
    "TrainHistory",
    # Configuration
    "RunConfig",
    "SolverConfig",
    "DatasetConfig",
    "TrainConfig",
    "EstimationConfig",
    "load_run_config",
    # Enums
    "BusRole",
    "RefinementKind",
    "GradientMode",
    "FdpfVariant",
    "Quantity",
    # Exceptions
    "OpfLayerError",
    "CaseParseError",
    "CaseStructureError",
    "UnsupportedTopologyError",
    "ConnectivityError",
    "FactorizationError",
    "SingularJacobianError",
    "SolverDivergedError",
    "ReferenceDataError",
    "TrainingAbortedError",
    "CheckpointError",
    "ConfigError",
    # Utilities
    "setup_logging",
    "enable_debug",
]
