"""
OpfStudy: one case, its grid model and FDPF factors, and a resolved run configuration
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .casefile import (
    LoadDataset,
    RawCase,
    ReferenceSet,
    generate_dataset,
    load_case,
    load_reference_solutions,
    nominal_demand,
)
from .config import RunConfig, SolverConfig, load_run_config
from .diffgrad import sensitivity_report
from .enums import RefinementKind
from .error import ConfigError
from .evaluation import alignment_report, estimate_constants, evaluate, gradient_check
from .grid import FdpfFactors, GridModel, build_fdpf_matrices, build_grid
from .loss import DualState
from .model import PredictionNetwork, load_checkpoint
from .pf import SolveResult, hybrid_solve, nominal_controls, solve_fdpf, solve_newton
from .result import AlignmentRow, MetricsRecord, SensitivityReport, TheoremConstants
from .train import TrainOutcome, primal_dual_train, refinement_ablation
from .types import PathLike
from .utils import default_workers

log = logging.getLogger(__name__)


class OpfStudy:
    """Case-bound entry point for solving, training and evaluating"""

    def __init__(
        self,
        case: Optional[PathLike] = None,
        config: Optional[RunConfig] = None,
        config_path: Optional[str] = None,
        profile: Optional[str] = None,
        preset: Optional[str] = None,
        workers: Optional[int] = None,
        output_dir: Optional[PathLike] = None,
    ):
        """Load the case and prepare grid and factors

        Args:
            case: MATPOWER case file. Falls back to the config's `case`.
            config: Already resolved configuration (skips file loading)
            config_path: Explicit config file path (optional)
            profile: Config profile name
            preset: Built-in hyperparameter preset, overlaid below the file's values
            workers: Per-sample threads. Falls back to config, then $OPFLAYER_WORKERS,
                then the number of cores.
            output_dir: Artifact directory. Falls back to config, then
                $OPFLAYER_OUTPUT_DIR, then ./runs.

        Raises:
            ConfigError: No case given anywhere, or the configuration is invalid
        """
        if config is None:
            config = load_run_config(config_path, profile, preset)

        # Priority: explicit param > config file > environment variable > default
        case_path = case or config.case
        if not case_path:
            raise ConfigError(
                "case is required (pass it explicitly, or set 'case' in the config file)",
                key="case",
            )
        self.config = config
        self.case_path = Path(case_path)
        self.workers = workers or config.workers or default_workers()
        self.output_dir = Path(output_dir) if output_dir else config.resolved_output_dir()

        self.case: RawCase = load_case(self.case_path)
        self.grid: GridModel = build_grid(self.case)
        self.factors: FdpfFactors = build_fdpf_matrices(self.grid)
        self._dataset: Optional[LoadDataset] = None
        self._references: Optional[ReferenceSet] = None

    def __enter__(self) -> "OpfStudy":
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        self.close()

    def close(self) -> None:
        """Drop cached datasets and references"""
        self._dataset = None
        self._references = None

    def __repr__(self):
        return f"OpfStudy({self.grid.name}: {self.grid.summary()}, workers={self.workers})"

    # ------------------------------------------------------------------
    # data
    # ------------------------------------------------------------------

    @property
    def dataset(self) -> LoadDataset:
        """The configured dataset file, else a freshly generated one"""
        if self._dataset is None:
            if self.config.dataset_path:
                self._dataset = LoadDataset.load(self.config.dataset_path)
                expected = 2 * self.grid.n_bus
                if self._dataset.samples.shape[1] != expected:
                    raise ConfigError(
                        f"Dataset {self.config.dataset_path} has "
                        f"{self._dataset.samples.shape[1]} features, case needs {expected}",
                        key="dataset_path",
                    )
            else:
                self._dataset = self.generate_data()
        return self._dataset

    @property
    def references(self) -> Optional[ReferenceSet]:
        if self._references is None and self.config.references:
            self._references = load_reference_solutions(self.config.references)
        return self._references

    def generate_data(self) -> LoadDataset:
        cfg = self.config.dataset
        return generate_dataset(
            self.case, (cfg.low, cfg.high), cfg.count, cfg.split_fraction, cfg.seed
        )

    def nominal_point(self):
        """(x, d) from the case file's set points and demand"""
        return nominal_controls(self.grid), nominal_demand(self.case)

    # ------------------------------------------------------------------
    # solving
    # ------------------------------------------------------------------

    def solve(
        self,
        solver: str = "hybrid",
        solver_config: Optional[SolverConfig] = None,
        tolerance: Optional[float] = None,
        max_iter: Optional[int] = None,
    ) -> SolveResult:
        """Power flow at the nominal point

        Args:
            solver: `hybrid`, `nr` or `fdpf`
            solver_config: Hybrid layout (defaults to the run config's solver section)
            tolerance: Mismatch tolerance override
            max_iter: Iteration cap for `nr` / `fdpf`
        """
        x, d = self.nominal_point()
        if solver == "hybrid":
            cfg = solver_config or self.config.solver
            if tolerance is not None:
                cfg = cfg.model_copy(update={"tolerance": tolerance})
            return hybrid_solve(self.grid, self.factors, x, d, cfg)
        if solver == "nr":
            return solve_newton(self.grid, x, d, tol=tolerance or 1e-10, max_iter=max_iter or 30)
        if solver == "fdpf":
            return solve_fdpf(
                self.grid, self.factors, x, d, tol=tolerance or 1e-8, max_iter=max_iter or 100
            )
        raise ValueError(f"Unknown solver {solver!r} (expected 'hybrid', 'nr' or 'fdpf')")

    def sensitivities(self, K_R: int = 4) -> SensitivityReport:
        """Exact and K-step ∂z/∂x at the nominal point"""
        x, d = self.nominal_point()
        reference = solve_newton(self.grid, x, d)
        cfg = SolverConfig(
            guide_iterations=self.config.estimation.guide_iterations,
            refinement=RefinementKind.KSTEP_FDPF,
            refinement_iterations=K_R,
        )
        hybrid = hybrid_solve(self.grid, self.factors, x, d, cfg)
        return sensitivity_report(
            self.grid, self.factors, reference.z_star, hybrid.z_entry, x, d, K_R
        )

    # ------------------------------------------------------------------
    # learning
    # ------------------------------------------------------------------

    def load_network(self, path: Optional[PathLike] = None) -> PredictionNetwork:
        path = path or self.config.checkpoint
        if not path:
            raise ConfigError("checkpoint is required for this command", key="checkpoint")
        return load_checkpoint(path, self.grid)

    def train(self, network: Optional[PredictionNetwork] = None) -> TrainOutcome:
        return primal_dual_train(
            self.grid,
            self.factors,
            self.dataset,
            self.config.train,
            workers=self.workers,
            references=self.references,
            network=network,
        )

    def ablate(self) -> Dict[int, TrainOutcome]:
        return refinement_ablation(
            self.grid,
            self.factors,
            self.dataset,
            self.config.train,
            k_r_list=self.config.ablation_k_r,
            guide_iterations=self.config.ablation_guide_iterations,
            workers=self.workers,
            references=self.references,
        )

    def evaluate(self, network: PredictionNetwork, split: str = "test") -> MetricsRecord:
        indices, demands = self.dataset.split(split)
        return evaluate(
            network,
            self.grid,
            self.factors,
            demands,
            self.config.solver,
            references=self.references,
            indices=indices,
            workers=self.workers,
        )

    # ------------------------------------------------------------------
    # gradient analysis
    # ------------------------------------------------------------------

    def estimation_samples(self) -> np.ndarray:
        """The first `estimation.samples` rows of the test split"""
        _, demands = self.dataset.split("test")
        if len(demands) == 0:
            _, demands = self.dataset.split("train")
        return demands[: self.config.estimation.samples]

    def estimate_constants(
        self, network: PredictionNetwork, duals: Optional[DualState] = None
    ) -> List[TheoremConstants]:
        """Theorem constants for every K_R of the estimation sweep"""
        duals = duals or DualState.zeros(self.grid)
        samples = self.estimation_samples()
        return [
            estimate_constants(
                network,
                self.grid,
                self.factors,
                samples,
                duals,
                K_R,
                self.config.estimation,
                seed=self.config.seed,
            )
            for K_R in self.config.estimation.k_r_list
        ]

    def alignment(
        self, network: PredictionNetwork, duals: Optional[DualState] = None
    ) -> List[AlignmentRow]:
        return alignment_report(
            network,
            self.grid,
            self.factors,
            self.estimation_samples(),
            duals or DualState.zeros(self.grid),
            cfg=self.config.estimation,
            seed=self.config.seed,
        )

    def grad_check(
        self, network: Optional[PredictionNetwork] = None, K_R: int = 4
    ) -> Dict[str, float]:
        """Every sensitivity oracle at the nominal point

        Without a network a small seeded one is used for the parameter-gradient oracle.
        """
        x, d = self.nominal_point()
        if network is None:
            network = PredictionNetwork.for_grid(self.grid, [16], seed=self.config.seed)
            network.set_standardization(d[None, :])
        return gradient_check(
            self.grid,
            self.factors,
            d,
            x,
            network=network,
            K_R=K_R,
            guide_iterations=self.config.estimation.guide_iterations,
            seed=self.config.seed,
        )
