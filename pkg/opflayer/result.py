"""
Report data models: metrics, theorem constants, alignment rows and training history
"""

import math
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, computed_field

# Violation tolerance applied per constraint row
VIOLATION_TOL = 1e-4

METRICS_COLUMNS = [
    "epoch",
    "eq_mean_mismatch",
    "eq_max_mismatch",
    "eq_viol_num",
    "ineq_mean_mismatch",
    "ineq_max_mismatch",
    "ineq_viol_num",
    "objective_cost",
    "objective_gap_pct",
]

ALIGNMENT_COLUMNS = [
    "K_R",
    "cosine_mean",
    "cosine_std",
    "relerr_mean",
    "relerr_std",
    "rho_k",
    "L_T",
    "L_J",
    "C_1",
    "eps_k",
    "eps_inf",
    "bound",
    "bound_inf",
]


class MetricsRecord(BaseModel):
    """Constraint-satisfaction and cost metrics aggregated over a split"""

    epoch: Optional[int] = Field(default=None, description="Epoch the metrics belong to")
    eq_mean_mismatch: float = Field(..., description="Mean |h| over rows, averaged over samples")
    eq_max_mismatch: float = Field(..., description="Max |h| over all rows and samples")
    eq_viol_num: float = Field(..., description="Mean count of |h| rows above tolerance")
    ineq_mean_mismatch: float = Field(..., description="Mean g⁺ over rows, averaged")
    ineq_max_mismatch: float = Field(..., description="Max g⁺ over all rows and samples")
    ineq_viol_num: float = Field(..., description="Mean count of g rows above tolerance")
    objective_cost: float = Field(..., description="Mean generation cost")
    objective_gap_pct: float = Field(
        default=float("nan"), description="100·mean((cost − ref)/ref); NaN without references"
    )
    samples: int = Field(default=0, description="Samples that contributed")
    diverged: int = Field(default=0, description="Samples whose forward solve diverged")
    inference_seconds: Optional[float] = Field(
        default=None, description="Mean wall time per sample (network + completion)"
    )

    def to_row(self) -> Dict[str, Any]:
        """The CSV row (metrics columns only)"""
        return {column: getattr(self, column) for column in METRICS_COLUMNS}

    def to_dict(self) -> dict:
        """Convert to dictionary"""
        return self.model_dump()

    def __repr__(self):
        epoch = f"epoch {self.epoch} " if self.epoch is not None else ""
        return (
            f"MetricsRecord({epoch}eq_mean={self.eq_mean_mismatch:.3e} "
            f"ineq_viol={self.ineq_viol_num:.2f} cost={self.objective_cost:.2f})"
        )


class TheoremConstants(BaseModel):
    """Estimated constants of the gradient-alignment bound

    The composite quantities (C_1, ε_k, ε_∞ and both bounds) are computed from the stored
    parts on access, so they always recompute exactly.
    """

    K_R: int = Field(..., description="Refinement depth the composite constants refer to")
    k: int = Field(default=1, ge=0, description="Composite applications before refinement")
    rho_k: float = Field(..., ge=0, description="Contraction of T^{K_R} w.r.t. z")
    L_T: float = Field(..., ge=0, description="max ‖∂T^{K_R}/∂x‖")
    L_J: float = Field(..., ge=0, description="Lipschitz constant of ∂T^{K_R}/∂x in z")
    L_x: float = Field(..., ge=0, description="Lipschitz constant of ∂L_part/∂x in z")
    L_z: float = Field(..., ge=0, description="Lipschitz constant of ∂L_total/∂z in z")
    C_z: float = Field(..., ge=0, description="Bound on ‖∂L_total/∂z‖")
    sigma_J: float = Field(..., ge=0, description="‖∂z*/∂x‖ (exact Jacobian)")
    C_g: float = Field(..., ge=0, description="True-gradient norm lower estimate")
    sigma_A: float = Field(..., ge=0, description="‖∂x/∂φ‖ (network plus decode)")
    d_0: float = Field(..., ge=0, description="‖z_0 − z*‖ from the flat start")
    spread: Dict[str, float] = Field(
        default_factory=dict, description="Across-sample standard deviation per constant"
    )

    @property
    def c_g_flagged(self) -> bool:
        """True when the gradient is too small for the bound to be meaningful"""
        return self.C_g < 1e-12

    @computed_field
    @property
    def C_1(self) -> float:
        return self.rho_k * (self.L_x + self.L_z * self.sigma_J) + self.C_z * self.L_J

    def eps(self, k: Optional[int] = None) -> float:
        """ε for a guide depth of `k` composite steps (None: the asymptotic ε_∞)"""
        if self.c_g_flagged or self.rho_k >= 1.0:
            return math.inf
        steady = self.rho_k * self.L_T * self.C_z / (1.0 - self.rho_k)
        transient = 0.0 if k is None else self.rho_k**k * self.d_0 * self.C_1
        return (self.sigma_A / self.C_g) * (steady + transient)

    @computed_field
    @property
    def eps_k(self) -> float:
        return self.eps(self.k)

    @computed_field
    @property
    def eps_inf(self) -> float:
        return self.eps(None)

    @staticmethod
    def bound_from(eps: float) -> float:
        """Cosine lower bound (1−ε)/(1+ε); NaN when ε is undefined"""
        if not math.isfinite(eps):
            return float("nan")
        return (1.0 - eps) / (1.0 + eps)

    @computed_field
    @property
    def bound(self) -> float:
        return self.bound_from(self.eps_k)

    @computed_field
    @property
    def bound_inf(self) -> float:
        return self.bound_from(self.eps_inf)

    def __repr__(self):
        return f"TheoremConstants(K_R={self.K_R}, rho={self.rho_k:.3e}, eps_k={self.eps_k:.3e})"


class AlignmentRow(BaseModel):
    """Cosine and relative error of the K-step gradient against the exact one, per K_R"""

    K_R: int
    cosine_mean: float
    cosine_std: float
    relerr_mean: float
    relerr_std: float
    constants: TheoremConstants
    cosines: List[float] = Field(default_factory=list, description="Per-sample cosines")
    relerrs: List[float] = Field(default_factory=list, description="Per-sample relative errors")

    def to_row(self) -> Dict[str, Any]:
        """The CSV row"""
        c = self.constants
        return {
            "K_R": self.K_R,
            "cosine_mean": self.cosine_mean,
            "cosine_std": self.cosine_std,
            "relerr_mean": self.relerr_mean,
            "relerr_std": self.relerr_std,
            "rho_k": c.rho_k,
            "L_T": c.L_T,
            "L_J": c.L_J,
            "C_1": c.C_1,
            "eps_k": c.eps_k,
            "eps_inf": c.eps_inf,
            "bound": c.bound,
            "bound_inf": c.bound_inf,
        }


class EpochSummary(BaseModel):
    """Everything logged for one completed epoch"""

    epoch: int = Field(..., ge=1)
    train: MetricsRecord
    test: Optional[MetricsRecord] = None
    train_loss: float = Field(..., description="Mean Lagrangian over the pass")
    test_loss: Optional[float] = Field(default=None, description="Mean Lagrangian on test")
    lambda_norm: float = Field(..., ge=0)
    nu_norm: float = Field(..., ge=0)
    skipped: int = Field(default=0, ge=0, description="Samples left out of the gradient this epoch")
    diverged: int = Field(default=0, ge=0, description="Skipped samples whose solve diverged")
    seconds: float = Field(default=0.0, ge=0)


class TrainHistory(BaseModel):
    """Per-epoch training log"""

    epochs: List[EpochSummary] = Field(default_factory=list)

    def append(self, summary: EpochSummary) -> None:
        self.epochs.append(summary)

    @property
    def total_skipped(self) -> int:
        return sum(e.skipped for e in self.epochs)

    def train_records(self) -> List[MetricsRecord]:
        return [e.train for e in self.epochs]

    def test_records(self) -> List[MetricsRecord]:
        return [e.test for e in self.epochs if e.test is not None]

    def rows(self) -> List[Dict[str, Any]]:
        """Flat rows for history.csv"""
        return [
            {
                "epoch": e.epoch,
                "train_loss": e.train_loss,
                "test_loss": e.test_loss if e.test_loss is not None else float("nan"),
                "lambda_norm": e.lambda_norm,
                "nu_norm": e.nu_norm,
                "skipped": e.skipped,
                "diverged": e.diverged,
                "seconds": e.seconds,
            }
            for e in self.epochs
        ]

    def summary(self) -> str:
        """One-line summary"""
        if not self.epochs:
            return "no epochs"
        last = self.epochs[-1]
        test = f", test eq_mean={last.test.eq_mean_mismatch:.3e}" if last.test else ""
        return (
            f"{len(self.epochs)} epochs, loss={last.train_loss:.4g}{test}, "
            f"skipped={self.total_skipped}"
        )

    def __len__(self) -> int:
        return len(self.epochs)


class SensitivityReport(BaseModel):
    """Exact and approximate completion Jacobians with their agreement"""

    exact_via_h: np.ndarray
    exact_via_T: np.ndarray
    kstep: np.ndarray
    K_R: int
    cosine_to_exact: float
    relative_error: float

    model_config = ConfigDict(arbitrary_types_allowed=True)

    def __repr__(self):
        return (
            f"SensitivityReport(K_R={self.K_R}, cos={self.cosine_to_exact:.4f}, "
            f"relerr={self.relative_error:.3e})"
        )
