"""
Prediction network M_φ, output decoding, the full forward pass and its parameter gradient
"""

import logging
import math
import pickle
import time
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit
from torch import nn
from torch.func import functional_call, jvp, vjp

from .config import SolverConfig
from .diffgrad import exact_implicit_vjp, tape_vjp
from .enums import GradientMode
from .error import CheckpointError
from .grid import FdpfFactors, GridModel
from .loss import (
    DualState,
    equality_values,
    inequality_values,
    lagrangian_gradient_y,
    objective_cost,
)
from .pf import (
    SolveResult,
    assemble_y,
    hybrid_solve,
    post_complete,
    post_complete_jacobians,
    y_indices,
)
from .types import PathLike

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class PredictionNetwork(nn.Module):
    """Affine–ELU chain from the standardized demand vector to raw control outputs

    Weights start uniform in ±1/√fan_in from a seeded generator, biases at zero. The
    standardization statistics are buffers, so they travel with the state dict.
    """

    def __init__(self, n_in: int, n_out: int, hidden: Sequence[int] = (200, 200), seed: int = 0):
        super().__init__()
        self.widths = [int(n_in), *(int(w) for w in hidden), int(n_out)]
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=torch.float64)
            for a, b in zip(self.widths[:-1], self.widths[1:])
        )
        self.activation = nn.ELU(alpha=1.0)
        self.register_buffer("input_mean", torch.zeros(n_in, dtype=torch.float64))
        self.register_buffer("input_std", torch.ones(n_in, dtype=torch.float64))
        self.reset_parameters(seed)

    @classmethod
    def for_grid(cls, grid: GridModel, hidden: Sequence[int], seed: int = 0) -> "PredictionNetwork":
        return cls(2 * grid.n_bus, grid.partition.m, hidden, seed)

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for layer in self.layers:
                bound = 1.0 / math.sqrt(layer.in_features)
                weight = torch.rand(layer.weight.shape, generator=gen, dtype=torch.float64)
                layer.weight.copy_((2.0 * weight - 1.0) * bound)
                layer.bias.zero_()

    def set_standardization(self, samples: np.ndarray) -> None:
        """Per-feature mean/std of the training demands (unit std for constant features)"""
        mean = samples.mean(axis=0)
        std = samples.std(axis=0)
        std[std < 1e-12] = 1.0
        self.input_mean.copy_(torch.as_tensor(mean, dtype=torch.float64))
        self.input_std.copy_(torch.as_tensor(std, dtype=torch.float64))

    def forward(self, d: torch.Tensor) -> torch.Tensor:
        h = (d - self.input_mean) / self.input_std
        for layer in self.layers[:-1]:
            h = self.activation(layer(h))
        return self.layers[-1](h)

    def __repr__(self):
        return f"PredictionNetwork({'-'.join(str(w) for w in self.widths)})"


def mlp_forward(network: PredictionNetwork, d: np.ndarray) -> np.ndarray:
    """Raw outputs for one demand vector or a batch (rows)"""
    d = np.asarray(d, dtype=float)
    if d.shape[-1] != network.n_in:
        raise ValueError(f"d must have {network.n_in} entries, got {d.shape[-1]}")
    with torch.no_grad():
        return network(torch.as_tensor(d, dtype=torch.float64)).numpy()


def decode_prediction(raw: np.ndarray, grid: GridModel) -> np.ndarray:
    """Logistic squashing of raw outputs into the P^g (G) and V (G∪R) boxes"""
    bounds = grid.x_bounds
    lo, hi = bounds[:, 0], bounds[:, 1]
    return lo + expit(raw) * (hi - lo)


def decode_tensor(raw: torch.Tensor, bounds: torch.Tensor) -> torch.Tensor:
    """decode_prediction on tensors, differentiable in `raw`"""
    lo, hi = bounds[:, 0], bounds[:, 1]
    return lo + torch.sigmoid(raw) * (hi - lo)


class ForwardRecord(BaseModel):
    """One sample's pass through network, completion and loss evaluation"""

    d: np.ndarray
    x: np.ndarray
    raw: Optional[np.ndarray] = None
    solve: SolveResult
    z_tilde: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None
    f: float = float("nan")
    g: Optional[np.ndarray] = None
    h: Optional[np.ndarray] = None
    seconds: float = Field(default=0.0, description="Completion wall time")

    model_config = ConfigDict(arbitrary_types_allowed=True)

    @property
    def converged(self) -> bool:
        return self.solve.converged

    @property
    def usable(self) -> bool:
        """Finite loss pieces from a non-diverged solve"""
        return (
            not self.solve.diverged
            and self.y is not None
            and bool(np.isfinite(self.f))
            and bool(np.all(np.isfinite(self.g)))
            and bool(np.all(np.isfinite(self.h)))
        )

    def __repr__(self):
        return f"ForwardRecord({self.solve!r}, f={self.f:.4g})"


def complete_controls(
    grid: GridModel,
    factors: FdpfFactors,
    d: np.ndarray,
    x: np.ndarray,
    cfg: SolverConfig,
    raw: Optional[np.ndarray] = None,
) -> ForwardRecord:
    """Completion, post-completion, assembly and loss pieces for given controls"""
    start = time.perf_counter()
    solve = hybrid_solve(grid, factors, x, d, cfg)
    if solve.diverged:
        return ForwardRecord(d=d, x=x, raw=raw, solve=solve, seconds=time.perf_counter() - start)
    z_tilde = post_complete(grid, x, solve.z_star, d)
    y = assemble_y(grid, x, solve.z_star, z_tilde)
    seconds = time.perf_counter() - start
    return ForwardRecord(
        d=d,
        x=x,
        raw=raw,
        solve=solve,
        z_tilde=z_tilde,
        y=y,
        f=objective_cost(grid, y),
        g=inequality_values(grid, y),
        h=equality_values(grid, y, d),
        seconds=seconds,
    )


def forward_full(
    network: PredictionNetwork,
    grid: GridModel,
    factors: FdpfFactors,
    d: np.ndarray,
    cfg: SolverConfig,
) -> ForwardRecord:
    """mlp_forward → decode_prediction → hybrid_solve → post_complete → y → (f, g, h)

    A diverged solve is returned flagged, without loss pieces.
    """
    d = np.asarray(d, dtype=float)
    raw = mlp_forward(network, d)
    return complete_controls(grid, factors, d, decode_prediction(raw, grid), cfg, raw)


def loss_partials(
    grid: GridModel, x: np.ndarray, z: np.ndarray, d: np.ndarray, duals: DualState
) -> Tuple[np.ndarray, np.ndarray]:
    """Lagrangian partials at (x, z) with z̃ from post-completion

    Returns:
        (∂L/∂x + (∂L/∂z̃)(∂z̃/∂x), ∂L/∂z + (∂L/∂z̃)(∂z̃/∂z))
    """
    y = assemble_y(grid, x, z, post_complete(grid, x, z, d))
    gy = lagrangian_gradient_y(grid, y, d, duals)
    ix, iz, izt = y_indices(grid)
    dzt_dz, dzt_dx = post_complete_jacobians(grid, z, x)
    return gy[ix] + dzt_dx.T @ gy[izt], gy[iz] + dzt_dz.T @ gy[izt]


def control_gradient(
    record: ForwardRecord,
    duals: DualState,
    grid: GridModel,
    factors: FdpfFactors,
    mode: GradientMode = GradientMode.KSTEP,
) -> np.ndarray:
    """Total ∂L/∂x through the completion

    The partial through z is pushed through the K-step Jacobian of the recorded refinement
    (KSTEP) or through the implicit Jacobian at the record's state (EXACT).
    """
    if not record.usable:
        raise ValueError("control_gradient needs a non-diverged record")
    z, x = record.solve.z_star, record.x
    direct, through_z = loss_partials(grid, x, z, record.d, duals)
    if mode == GradientMode.EXACT:
        return direct + exact_implicit_vjp(grid, z, x, through_z)
    return direct + tape_vjp(grid, factors, record.solve.tape, x, record.d, through_z)


def pullback_controls(
    network: PredictionNetwork, d: np.ndarray, grid: GridModel, cotangent: np.ndarray
) -> Dict[str, torch.Tensor]:
    """cotangentᵀ ∂x/∂φ for every named parameter"""
    params = dict(network.named_parameters())
    bounds = torch.as_tensor(grid.x_bounds, dtype=torch.float64)
    x_t = decode_tensor(network(torch.as_tensor(d, dtype=torch.float64)), bounds)
    grads = torch.autograd.grad(
        x_t,
        list(params.values()),
        grad_outputs=torch.as_tensor(cotangent, dtype=torch.float64),
        allow_unused=True,
    )
    return {
        name: torch.zeros_like(p) if g is None else g for (name, p), g in zip(params.items(), grads)
    }


def parameter_gradient(
    network: PredictionNetwork,
    record: ForwardRecord,
    duals: DualState,
    grid: GridModel,
    factors: FdpfFactors,
    mode: GradientMode = GradientMode.KSTEP,
) -> Dict[str, torch.Tensor]:
    """∂L/∂φ for one converged record, chained through decode and the network by autograd"""
    if record.usable and not record.converged:
        raise ValueError(f"parameter_gradient needs a converged record, got {record.solve!r}")
    cotangent = control_gradient(record, duals, grid, factors, mode)
    return pullback_controls(network, record.d, grid, cotangent)


def flatten_gradient(grads: Dict[str, torch.Tensor]) -> np.ndarray:
    return torch.cat([g.reshape(-1) for g in grads.values()]).detach().numpy()


def control_jacobian_norm(
    network: PredictionNetwork,
    d: np.ndarray,
    grid: GridModel,
    iterations: int = 20,
    seed: int = 0,
) -> float:
    """‖∂x/∂φ‖₂ at d by power iteration on forward and reverse products"""
    params = {k: v.detach() for k, v in network.named_parameters()}
    buffers = {k: v.detach() for k, v in network.named_buffers()}
    d_t = torch.as_tensor(d, dtype=torch.float64)
    bounds = torch.as_tensor(grid.x_bounds, dtype=torch.float64)

    def controls(p):
        return decode_tensor(functional_call(network, (p, buffers), (d_t,)), bounds)

    gen = torch.Generator().manual_seed(int(seed))
    v = {k: torch.randn(t.shape, generator=gen, dtype=t.dtype) for k, t in params.items()}
    _, pullback = vjp(controls, params)
    sigma = 0.0
    for _ in range(iterations):
        norm = math.sqrt(sum(float((t**2).sum()) for t in v.values()))
        if norm == 0.0:
            return 0.0
        v = {k: t / norm for k, t in v.items()}
        _, u = jvp(controls, (params,), (v,))
        sigma = float(torch.linalg.norm(u))
        (v,) = pullback(u)
    return sigma


def save_checkpoint(network: PredictionNetwork, grid: GridModel, path: PathLike) -> Path:
    """Layer widths, parameters and standardization with version tag and partition fingerprint"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "fingerprint": grid.partition.fingerprint(),
            "widths": list(network.widths),
            "state_dict": network.state_dict(),
        },
        path,
    )
    log.info(f"Saved {network!r} to {path}")
    return path


def load_checkpoint(path: PathLike, grid: Optional[GridModel] = None) -> PredictionNetwork:
    """Inverse of save_checkpoint

    Raises:
        CheckpointError: Unreadable file, unknown version, or a partition fingerprint that
            does not match `grid`
    """
    path = Path(path)
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except (RuntimeError, ValueError, pickle.UnpicklingError, EOFError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}", path=str(path)) from e

    if not isinstance(blob, dict) or blob.get("version") != CHECKPOINT_VERSION:
        version = blob.get("version") if isinstance(blob, dict) else None
        raise CheckpointError(
            f"Unsupported checkpoint version {version!r} (expected {CHECKPOINT_VERSION})",
            path=str(path),
        )
    if grid is not None and blob["fingerprint"] != grid.partition.fingerprint():
        raise CheckpointError(
            f"Checkpoint {path} was trained on a different bus partition", path=str(path)
        )

    widths = blob["widths"]
    network = PredictionNetwork(widths[0], widths[-1], widths[1:-1])
    network.load_state_dict(blob["state_dict"])
    return network
