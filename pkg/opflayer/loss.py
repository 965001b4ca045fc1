"""
AC-OPF objective, constraint vectors, the Lagrangian and the dual state

All functions act on the assembled y = (V, θ, P^g, Q^g). Each value function has a dense
Jacobian counterpart with respect to y used by the backward chain.
"""

import logging
from pathlib import Path
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .grid import GridModel
from .pf import (
    branch_flow_derivatives,
    branch_flows,
    injection_derivatives,
    power_injections,
    split_demand,
    split_y,
)
from .types import PathLike

log = logging.getLogger(__name__)


def objective_cost(grid: GridModel, y: np.ndarray) -> float:
    """Σ c2·(P^g·base)² + c1·(P^g·base) + c0 over all in-service generators"""
    _, _, pg, _ = split_y(grid, y)
    mw = pg * grid.base_mva
    c2, c1, c0 = grid.cost_coeffs.T
    return float(np.sum(c2 * mw**2 + c1 * mw + c0))


def objective_gradient(grid: GridModel, y: np.ndarray) -> np.ndarray:
    _, _, pg, _ = split_y(grid, y)
    base = grid.base_mva
    c2, c1, _ = grid.cost_coeffs.T
    grad = np.zeros_like(y)
    grad[2 * grid.n_bus : 2 * grid.n_bus + grid.n_gen] = base * (2.0 * c2 * pg * base + c1)
    return grad


def _angle_rows(grid: GridModel) -> Tuple[np.ndarray, np.ndarray]:
    br = grid.branches
    return np.flatnonzero(np.isfinite(br.ang_min)), np.flatnonzero(np.isfinite(br.ang_max))


def inequality_values(grid: GridModel, y: np.ndarray) -> np.ndarray:
    """Signed slacks g(y), positive where violated

    Rows: P^g lower, P^g upper, Q^g lower, Q^g upper, V lower, V upper, |S_from|² − S̄²
    and |S_to|² − S̄² for rated branches, then angle-difference lower and upper rows for
    branches with finite limits.
    """
    vm, va, pg, qg = split_y(grid, y)
    br = grid.branches
    pf_, qf, pt, qt = branch_flows(grid, vm, va)
    rated = br.rated
    rate2 = br.rate[rated] ** 2
    lo_rows, hi_rows = _angle_rows(grid)
    diff = va[br.f_bus] - va[br.t_bus]
    return np.concatenate(
        [
            grid.pg_bounds[:, 0] - pg,
            pg - grid.pg_bounds[:, 1],
            grid.qg_bounds[:, 0] - qg,
            qg - grid.qg_bounds[:, 1],
            grid.v_bounds[:, 0] - vm,
            vm - grid.v_bounds[:, 1],
            pf_[rated] ** 2 + qf[rated] ** 2 - rate2,
            pt[rated] ** 2 + qt[rated] ** 2 - rate2,
            br.ang_min[lo_rows] - diff[lo_rows],
            diff[hi_rows] - br.ang_max[hi_rows],
        ]
    )


def inequality_jacobian(grid: GridModel, y: np.ndarray) -> np.ndarray:
    """∂g/∂y (n_ineq × |y|)"""
    vm, va, _, _ = split_y(grid, y)
    nb, ng = grid.n_bus, grid.n_gen
    br = grid.branches
    rated = br.rated
    lo_rows, hi_rows = _angle_rows(grid)
    jac = np.zeros((grid.n_ineq, y.size))

    gens = np.arange(ng)
    buses = np.arange(nb)
    pg_col, qg_col = 2 * nb + gens, 2 * nb + ng + gens
    jac[gens, pg_col] = -1.0
    jac[ng + gens, pg_col] = 1.0
    jac[2 * ng + gens, qg_col] = -1.0
    jac[3 * ng + gens, qg_col] = 1.0
    row = 4 * ng
    jac[row + buses, buses] = -1.0
    jac[row + nb + buses, buses] = 1.0
    row += 2 * nb

    sf, st, dsf_dva, dsf_dvm, dst_dva, dst_dvm = branch_flow_derivatives(grid, vm, va)
    nr = rated.size
    for s, ds_dva, ds_dvm in ((sf, dsf_dva, dsf_dvm), (st, dst_dva, dst_dvm)):
        conj = np.conj(s[rated])[:, None]
        jac[row : row + nr, :nb] = 2.0 * np.real(conj * ds_dvm[rated])
        jac[row : row + nr, nb : 2 * nb] = 2.0 * np.real(conj * ds_dva[rated])
        row += nr

    for rows, sign in ((lo_rows, -1.0), (hi_rows, 1.0)):
        k = np.arange(rows.size)
        jac[row + k, nb + br.f_bus[rows]] = sign
        jac[row + k, nb + br.t_bus[rows]] = -sign
        row += rows.size
    return jac


def equality_values(grid: GridModel, y: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Power balance at every bus: P_i − (P^g_i − P^d_i), then Q_i − (Q^g_i − Q^d_i)"""
    vm, va, pg, qg = split_y(grid, y)
    pd, qd = split_demand(grid, d)
    pinj, qinj = power_injections(grid, vm, va)
    pg_bus = np.bincount(grid.gen_bus, weights=pg, minlength=grid.n_bus)
    qg_bus = np.bincount(grid.gen_bus, weights=qg, minlength=grid.n_bus)
    return np.concatenate([pinj - pg_bus + pd, qinj - qg_bus + qd])


def equality_jacobian(grid: GridModel, y: np.ndarray) -> np.ndarray:
    """∂h/∂y (2·n_bus × |y|); the demand enters h additively"""
    vm, va, _, _ = split_y(grid, y)
    nb, ng = grid.n_bus, grid.n_gen
    ds_dva, ds_dvm = injection_derivatives(grid, vm, va)
    gens = np.arange(ng)
    jac = np.zeros((2 * nb, y.size))
    jac[:nb, :nb] = ds_dvm.real
    jac[:nb, nb : 2 * nb] = ds_dva.real
    jac[nb:, :nb] = ds_dvm.imag
    jac[nb:, nb : 2 * nb] = ds_dva.imag
    jac[grid.gen_bus, 2 * nb + gens] = -1.0
    jac[nb + grid.gen_bus, 2 * nb + ng + gens] = -1.0
    return jac


class DualState(BaseModel):
    """Lagrange multipliers λ (inequalities) and ν (equalities) with their step sizes"""

    lam: np.ndarray = Field(..., description="One multiplier per inequality row")
    nu: np.ndarray = Field(..., description="One multiplier per equality row")
    lr_lambda: float = Field(default=0.1, ge=0)
    lr_nu: float = Field(default=0.5, ge=0)

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    @model_validator(mode="after")
    def _nonnegative(self) -> "DualState":
        if np.any(self.lam < 0) or np.any(self.nu < 0):
            raise ValueError("multipliers must be nonnegative")
        return self

    @classmethod
    def zeros(cls, grid: GridModel, lr_lambda: float = 0.1, lr_nu: float = 0.5) -> "DualState":
        return cls(
            lam=np.zeros(grid.n_ineq), nu=np.zeros(grid.n_eq), lr_lambda=lr_lambda, lr_nu=lr_nu
        )

    @property
    def lambda_norm(self) -> float:
        return float(np.linalg.norm(self.lam))

    @property
    def nu_norm(self) -> float:
        return float(np.linalg.norm(self.nu))

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(
            path, lam=self.lam, nu=self.nu, lr=np.array([self.lr_lambda, self.lr_nu])
        )
        return path

    @classmethod
    def load(cls, path: PathLike) -> "DualState":
        with np.load(Path(path)) as data:
            lr_lambda, lr_nu = data["lr"].tolist()
            return cls(lam=data["lam"], nu=data["nu"], lr_lambda=lr_lambda, lr_nu=lr_nu)

    def __repr__(self):
        return f"DualState(|λ|={self.lambda_norm:.4g}, |ν|={self.nu_norm:.4g})"


def lagrangian_value(f: float, g: np.ndarray, h: np.ndarray, duals: DualState) -> float:
    """f + λᵀg⁺ + νᵀ|h|"""
    return float(f + duals.lam @ np.maximum(g, 0.0) + duals.nu @ np.abs(h))


def lagrangian_gradient_y(
    grid: GridModel, y: np.ndarray, d: np.ndarray, duals: DualState
) -> np.ndarray:
    """∂L/∂y, taking the zero subgradient at the kinks of (·)⁺ and |·|"""
    g = inequality_values(grid, y)
    h = equality_values(grid, y, d)
    grad = objective_gradient(grid, y)
    grad += inequality_jacobian(grid, y).T @ (duals.lam * (g > 0))
    grad += equality_jacobian(grid, y).T @ (duals.nu * np.sign(h))
    return grad


def dual_update(duals: DualState, mean_g_plus: np.ndarray, mean_abs_h: np.ndarray) -> DualState:
    """λ += η_λ·mean(g⁺), ν += η_ν·mean(|h|), clamped at zero"""
    if mean_g_plus.shape != duals.lam.shape or mean_abs_h.shape != duals.nu.shape:
        raise ValueError(
            f"statistics shapes {mean_g_plus.shape}/{mean_abs_h.shape} do not match "
            f"multipliers {duals.lam.shape}/{duals.nu.shape}"
        )
    return duals.model_copy(
        update={
            "lam": np.maximum(duals.lam + duals.lr_lambda * mean_g_plus, 0.0),
            "nu": np.maximum(duals.nu + duals.lr_nu * mean_abs_h, 0.0),
        }
    )
