"""
Run configuration for opflayer

Supports:
- opflayer.yaml / opflayer.json in the current directory
- ~/.opflayer/config.yaml
- a `default` section with named `profiles` overlays (flat files count as `default`)
- Environment variable substitution (${VAR_NAME})
- built-in presets matching the benchmark hyperparameter table
"""

import copy
import logging
import os
import re
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .enums import GradientMode, RefinementKind
from .error import ConfigError
from .types import RawConfig

log = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "OPFLAYER_OUTPUT_DIR"

# Default config file locations (in order of priority)
CONFIG_PATHS = [
    Path("opflayer.yaml"),
    Path("opflayer.yml"),
    Path("opflayer.json"),
    Path.home() / ".opflayer" / "config.yaml",
]


class SolverConfig(BaseModel):
    """Forward fixed-point solver settings (guide phase plus refinement)"""

    guide_iterations: int = Field(default=9, ge=0, description="FDPF guide steps K_G")
    refinement: RefinementKind = Field(
        default=RefinementKind.SINGLE_NR, description="Differentiable refinement kind"
    )
    refinement_iterations: int = Field(default=1, ge=1, description="Refinement steps K_R")
    tolerance: float = Field(default=1e-5, gt=0, description="Mismatch tolerance (p.u.)")
    divergence_cap: float = Field(
        default=1e3, gt=0, description="Max mismatch inf-norm before the solve is abandoned"
    )
    v_clamp: Tuple[float, float] = Field(
        default=(0.1, 2.5), description="Box applied to load-bus voltages inside iterations"
    )

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _check(self) -> "SolverConfig":
        if self.refinement == RefinementKind.SINGLE_NR and self.refinement_iterations != 1:
            raise ValueError(
                "single_nr refinement takes exactly one step (refinement_iterations=1)"
            )
        lo, hi = self.v_clamp
        if not 0 < lo < hi:
            raise ValueError(f"v_clamp must satisfy 0 < low < high, got {self.v_clamp}")
        return self

    @property
    def total_iterations(self) -> int:
        return self.guide_iterations + self.refinement_iterations

    def __repr__(self):
        return (
            f"SolverConfig({self.guide_iterations} FDPF + {self.refinement_iterations} "
            f"{self.refinement.value}, tol={self.tolerance:g})"
        )


class DatasetConfig(BaseModel):
    """Load-profile dataset settings"""

    count: int = Field(default=5000, ge=1, description="Number of samples")
    low: float = Field(default=0.8, gt=0, description="Lower perturbation factor")
    high: float = Field(default=1.2, gt=0, description="Upper perturbation factor")
    split_fraction: float = Field(default=0.8, ge=0, le=1, description="Training fraction")
    seed: Optional[int] = Field(default=None, description="Dataset seed (run seed if unset)")

    @model_validator(mode="after")
    def _check(self) -> "DatasetConfig":
        if self.low > self.high:
            raise ValueError(f"low ({self.low}) must not exceed high ({self.high})")
        return self


class TrainConfig(BaseModel):
    """Primal-dual training settings"""

    hidden: List[int] = Field(default_factory=lambda: [200, 200], description="Hidden widths")
    lr_phi: float = Field(default=1e-3, ge=0, description="Adam learning rate η_φ")
    lr_lambda: float = Field(default=0.1, ge=0, description="Inequality dual step η_λ")
    lr_nu: float = Field(default=0.5, ge=0, description="Equality dual step η_ν")
    outer_iterations: int = Field(default=20, ge=1, description="Outer iterations 𝒯")
    inner_iterations: int = Field(default=25, ge=1, description="Inner passes ℐ per outer step")
    batch_size: int = Field(default=200, ge=1, description="Minibatch size")
    betas: Tuple[float, float] = Field(default=(0.9, 0.999), description="Adam betas")
    adam_eps: float = Field(default=1e-8, gt=0, description="Adam epsilon")
    grad_clip: Optional[float] = Field(default=10.0, description="Gradient-norm clip (None: off)")
    gradient_mode: GradientMode = Field(
        default=GradientMode.KSTEP, description="Jacobian used in the backward chain"
    )
    abort_fraction: float = Field(
        default=0.5, gt=0, le=1, description="Diverged fraction per epoch that aborts training"
    )
    eval_every: int = Field(default=1, ge=1, description="Evaluate the test split every N epochs")
    seed: int = Field(default=0, description="Seed for initialization and shuffling")
    solver: SolverConfig = Field(default_factory=SolverConfig, description="Forward solver")

    @field_validator("hidden")
    @classmethod
    def _widths(cls, value: List[int]) -> List[int]:
        if any(w < 1 for w in value):
            raise ValueError(f"hidden widths must be positive, got {value}")
        return value

    @property
    def epochs(self) -> int:
        """One epoch is one inner pass over the training split"""
        return self.outer_iterations * self.inner_iterations


class EstimationConfig(BaseModel):
    """Theorem-constant estimation and alignment study settings"""

    samples: int = Field(default=20, ge=2, description="Samples drawn from the test split")
    radius: float = Field(default=1e-2, gt=0, description="Stencil perturbation radius (p.u.)")
    directions: int = Field(default=8, ge=1, description="Stencil directions per sample")
    power_iterations: int = Field(default=20, ge=1, description="Power iterations for σ_A")
    guide_iterations: int = Field(default=8, ge=0, description="K_G used by the study")
    k_r_list: List[int] = Field(default_factory=lambda: [1, 2, 4, 8], description="K_R sweep")
    polish_tolerance: float = Field(
        default=1e-10, gt=0, description="Tolerance of the Newton polish to z*"
    )


class RunConfig(BaseModel):
    """Top-level run configuration (one JSON/YAML file per run)"""

    case: Optional[str] = Field(default=None, description="MATPOWER case file")
    dataset_path: Optional[str] = Field(default=None, description="Existing dataset (.npz)")
    references: Optional[str] = Field(default=None, description="Reference-solution CSV")
    checkpoint: Optional[str] = Field(default=None, description="Model checkpoint")
    output_dir: Optional[str] = Field(default=None, description="Artifact directory")
    seed: int = Field(default=0, description="Master seed")
    workers: Optional[int] = Field(default=None, ge=1, description="Per-sample worker threads")
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    estimation: EstimationConfig = Field(default_factory=EstimationConfig)
    ablation_k_r: List[int] = Field(default_factory=lambda: [1, 4, 8])
    ablation_guide_iterations: int = Field(default=8, ge=0)

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="after")
    def _propagate(self) -> "RunConfig":
        # top-level solver and seed are authoritative for training
        self.train = self.train.model_copy(update={"solver": self.solver, "seed": self.seed})
        if self.dataset.seed is None:
            self.dataset = self.dataset.model_copy(update={"seed": self.seed})
        return self

    def resolved_output_dir(self) -> Path:
        """Output directory: config value, else $OPFLAYER_OUTPUT_DIR, else ./runs"""
        return Path(self.output_dir or os.environ.get(OUTPUT_DIR_ENV) or "runs")


def _build_presets() -> Dict[str, Dict[str, Any]]:
    # hyperparameter table per benchmark, plus the two solver layouts per size class
    table = {
        "case57": ([200, 200], 1e-3, 0.1, 0.5, 20, 5000, (0.8, 1.2)),
        "case89": ([300, 300], 1e-3, 0.01, 0.05, 20, 5000, (0.8, 1.2)),
        "case118": ([200, 200], 1e-3, 0.01, 0.05, 20, 5000, (0.8, 1.2)),
        "case189": ([4096, 4096], 1e-4, 0.01, 0.05, 40, 10000, (0.9, 1.1)),
    }
    presets: Dict[str, Dict[str, Any]] = {}
    for name, (hidden, lr_phi, lr_lambda, lr_nu, outer, count, (low, high)) in table.items():
        large = name == "case189"
        solvers = {
            "nr": {"guide_iterations": 17 if large else 9, "refinement": "single_nr",
                   "refinement_iterations": 1},
            "kd": {"guide_iterations": 10 if large else 8, "refinement": "kstep_fdpf",
                   "refinement_iterations": 8 if large else 4},
        }
        for suffix, solver in solvers.items():
            presets[f"{name}-{suffix}"] = {
                "dataset": {"count": count, "low": low, "high": high, "split_fraction": 0.8},
                "solver": {**solver, "tolerance": 1e-5},
                "train": {
                    "hidden": hidden,
                    "lr_phi": lr_phi,
                    "lr_lambda": lr_lambda,
                    "lr_nu": lr_nu,
                    "outer_iterations": outer,
                    "inner_iterations": 25,
                    "batch_size": 200,
                },
            }
    return presets


PRESETS: Dict[str, Dict[str, Any]] = _build_presets()


def _substitute_env_vars(value: Any) -> Any:
    """Substitute ${VAR_NAME} with environment variable values"""
    if isinstance(value, str):
        pattern = r"\$\{([^}]+)\}"
        for var_name in re.findall(pattern, value):
            value = value.replace(f"${{{var_name}}}", os.environ.get(var_name, ""))
        return value
    elif isinstance(value, dict):
        return {k: _substitute_env_vars(v) for k, v in value.items()}
    elif isinstance(value, list):
        return [_substitute_env_vars(item) for item in value]
    return value


def deep_merge(base: RawConfig, overlay: RawConfig) -> RawConfig:
    """Recursively merge `overlay` into a copy of `base`"""
    merged = copy.deepcopy(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config(
    config_path: Optional[str] = None,
    profile: Optional[str] = None,
) -> RawConfig:
    """Load configuration from a YAML or JSON file

    Args:
        config_path: Explicit config file path (optional)
        profile: Profile name to overlay on the `default` section (optional)

    Returns:
        Configuration dictionary (possibly empty when no file is found)

    Raises:
        ConfigError: The explicit file is missing, unreadable or names an unknown profile
    """
    import yaml

    config_file = None
    if config_path:
        config_file = Path(config_path)
        if not config_file.exists():
            raise ConfigError(f"Config file not found: {config_path}", key="config")
    else:
        for path in CONFIG_PATHS:
            if path.exists():
                config_file = path
                break

    if not config_file:
        log.debug("No config file found")
        return {}

    log.debug(f"Loading config from: {config_file}")

    try:
        with open(config_file, "r", encoding="utf-8") as f:
            raw_config = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"Failed to load config file {config_file}: {e}", key="config") from e

    if not isinstance(raw_config, dict):
        raise ConfigError(f"Config file {config_file} must contain a mapping", key="config")

    # Flat files are the default section
    if "default" in raw_config or "profiles" in raw_config:
        config = dict(raw_config.get("default") or {})
    else:
        config = dict(raw_config)

    if profile and profile != "default":
        profiles = raw_config.get("profiles") or {}
        if profile not in profiles:
            raise ConfigError(f"Profile '{profile}' not found in config", key="profile")
        config = deep_merge(config, profiles[profile])

    return _substitute_env_vars(config)


def load_run_config(
    config_path: Optional[str] = None,
    profile: Optional[str] = None,
    preset: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """Resolve a RunConfig from preset, file and explicit overrides (in that priority order)

    Raises:
        ConfigError: Unknown preset or invalid values
    """
    data: Dict[str, Any] = {}
    if preset:
        if preset not in PRESETS:
            known = ", ".join(sorted(PRESETS))
            raise ConfigError(f"Unknown preset '{preset}' (known: {known})", key="preset")
        data = deep_merge(data, PRESETS[preset])
    data = deep_merge(data, load_config(config_path, profile))
    if overrides:
        data = deep_merge(data, {k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}", key="config") from e
