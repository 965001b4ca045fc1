"""
Sensitivities of the completion map z*(x)

Exact implicit Jacobians (through h and through the FDPF operator T), the K-step
Jacobian of the recorded refinement, its reverse sweep, and finite-difference oracles.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Protocol, Tuple

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .enums import RefinementKind
from .error import FactorizationError, OpfLayerError
from .grid import FdpfFactors, GridModel
from .pf import (
    DEFAULT_V_CLAMP,
    FdpfStepRecord,
    NewtonStepRecord,
    RefinementTape,
    completion_residual,
    factorize_jacobian,
    fdpf_step_recorded,
    nr_step_recorded,
    pf_jacobians,
)
from .result import SensitivityReport
from .types import VectorMap

log = logging.getLogger(__name__)

CONVERGED_RESIDUAL = 1e-8


def finite_diff_jacobian(f: VectorMap, at: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian, one column per input coordinate"""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    at = np.asarray(at, dtype=float)
    columns = []
    for i in range(at.size):
        e = np.zeros_like(at)
        e[i] = step
        columns.append((np.asarray(f(at + e)) - np.asarray(f(at - e))) / (2.0 * step))
    return np.column_stack(columns) if columns else np.zeros((0, 0))


def compare_gradients(approx: np.ndarray, exact: np.ndarray) -> Tuple[float, float]:
    """(cosine, relative error) of two flattened arrays"""
    a, b = np.ravel(approx), np.ravel(exact)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    cosine = float(a @ b / (na * nb)) if na > 0 and nb > 0 else float("nan")
    relerr = float(np.linalg.norm(a - b) / nb) if nb > 0 else float("inf")
    return cosine, relerr


def _require_converged(grid, z_star, x, d) -> None:
    residual = float(np.max(np.abs(completion_residual(grid, z_star, x, d)), initial=0.0))
    if residual >= CONVERGED_RESIDUAL:
        raise OpfLayerError(
            f"Implicit Jacobian needs a converged state, residual is {residual:.3e}",
            detail={"residual": residual},
        )


def exact_implicit_jacobian_h(
    grid: GridModel, z_star: np.ndarray, x: np.ndarray, d: np.ndarray, check: bool = True
) -> np.ndarray:
    """∂z*/∂x = −(J_z h)⁻¹ J_x h, all columns through one factorization

    Raises:
        OpfLayerError: `z_star` is not converged (when `check` is set)
        SingularJacobianError: J_z h is singular
    """
    if check:
        _require_converged(grid, z_star, x, d)
    jz, jx = pf_jacobians(grid, z_star, x)
    return -lu_solve(factorize_jacobian(jz, z_star), jx)


def exact_implicit_vjp(
    grid: GridModel, z_star: np.ndarray, x: np.ndarray, cotangent: np.ndarray
) -> np.ndarray:
    """cotangentᵀ ∂z*/∂x via one adjoint solve"""
    jz, jx = pf_jacobians(grid, z_star, x)
    adjoint = lu_solve(factorize_jacobian(jz, z_star), cotangent, trans=1)
    return -jx.T @ adjoint


class _FdpfLinearization:
    """Partials of one FDPF step around its recorded intermediates"""

    def __init__(self, grid: GridModel, factors: FdpfFactors, rec: FdpfStepRecord, x, d):
        p = grid.partition
        self.factors = factors
        self.nt, self.nd, self.m = p.n_theta, p.load.size, p.m
        self.free = rec.free.astype(float)

        z_in = rec.z_in
        z_mid = np.concatenate([rec.theta_mid, z_in[p.z_vm]])
        jz_in, jx_in = pf_jacobians(grid, z_in, x)
        jz_mid, jx_mid = pf_jacobians(grid, z_mid, x)
        nt = self.nt

        self.a_th, self.a_v, self.a_x = jz_in[:nt, :nt], jz_in[:nt, nt:], jx_in[:nt]
        self.c_th, self.c_v, self.c_x = jz_mid[nt:, :nt], jz_mid[nt:, nt:], jx_mid[nt:]
        self.hp = completion_residual(grid, z_in, x, d)[:nt]
        self.hq = completion_residual(grid, z_mid, x, d)[nt:]
        self.v = z_in[p.z_vm]

        # V at the non-slack buses comes from z (load buses) or x (generator buses)
        self.s_d = np.zeros((nt, self.nd))
        self.s_d[p.load_in_nonslack, np.arange(self.nd)] = 1.0
        self.s_x = np.zeros((nt, self.m))
        self.s_x[p.gen_in_nonslack, p.gen.size + p.gen_in_controlled] = 1.0
        self.vns = self.s_d @ self.v + self.s_x @ x

    def jacobians(self) -> Tuple[np.ndarray, np.ndarray]:
        """Dense (∂T/∂z, ∂T/∂x)"""
        f, nt, nd = self.factors, self.nt, self.nd
        inv_vns = 1.0 / self.vns
        prod = (self.hp * inv_vns**2)[:, None]

        dr_dth = -self.a_th * inv_vns[:, None]
        dr_dv = -self.a_v * inv_vns[:, None] + prod * self.s_d
        dr_dx = -self.a_x * inv_vns[:, None] + prod * self.s_x
        dth_dth = np.eye(nt) + f.solve_prime(dr_dth)
        dth_dv = f.solve_prime(dr_dv)
        dth_dx = f.solve_prime(dr_dx)

        dq_dth = -self.c_th / self.v[:, None]
        dq_dv = -self.c_v / self.v[:, None] + np.diag(self.hq / self.v**2)
        dq_dx = -self.c_x / self.v[:, None]
        free = self.free[:, None]
        dv_dth = free * f.solve_double_prime(dq_dth @ dth_dth)
        dv_dv = free * (np.eye(nd) + f.solve_double_prime(dq_dth @ dth_dv + dq_dv))
        dv_dx = free * f.solve_double_prime(dq_dth @ dth_dx + dq_dx)

        tz = np.block([[dth_dth, dth_dv], [dv_dth, dv_dv]])
        tx = np.vstack([dth_dx, dv_dx])
        return tz, tx

    def vjp(self, g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(gᵀ ∂T/∂z, gᵀ ∂T/∂x) by transpose solves against B′ and B″"""
        f, nt = self.factors, self.nt
        g_th, g_v = g[:nt], g[nt:] * self.free

        gv = g_v.copy()
        gq = f.solve_double_prime(g_v, transpose=True)
        ghq = -gq / self.v
        gv += gq * self.hq / self.v**2
        g_mid = g_th + self.c_th.T @ ghq
        gv += self.c_v.T @ ghq
        gx = self.c_x.T @ ghq

        gth = g_mid.copy()
        gr = f.solve_prime(g_mid, transpose=True)
        ghp = -gr / self.vns
        gvns = gr * self.hp / self.vns**2
        gth += self.a_th.T @ ghp
        gv += self.a_v.T @ ghp + self.s_d.T @ gvns
        gx += self.a_x.T @ ghp + self.s_x.T @ gvns
        return np.concatenate([gth, gv]), gx


def fdpf_step_jacobians(
    grid: GridModel,
    factors: FdpfFactors,
    z: np.ndarray,
    x: np.ndarray,
    d: np.ndarray,
    v_clamp: Tuple[float, float] = DEFAULT_V_CLAMP,
) -> Tuple[np.ndarray, np.ndarray]:
    """(∂T/∂z, ∂T/∂x) of one FDPF step at (z, x)"""
    rec = fdpf_step_recorded(grid, factors, z, x, d, v_clamp)
    return _FdpfLinearization(grid, factors, rec, x, d).jacobians()


def exact_implicit_jacobian_T(
    grid: GridModel,
    factors: FdpfFactors,
    z_star: np.ndarray,
    x: np.ndarray,
    d: np.ndarray,
    check: bool = True,
) -> np.ndarray:
    """(I − ∂T/∂z)⁻¹ ∂T/∂x at the FDPF fixed point

    Raises:
        FactorizationError: The resolvent I − ∂T/∂z is singular
    """
    if check:
        _require_converged(grid, z_star, x, d)
    tz, tx = fdpf_step_jacobians(grid, factors, z_star, x, d)
    resolvent = np.eye(tz.shape[0]) - tz
    lu, piv = lu_factor(resolvent, check_finite=False)
    pivots = np.abs(np.diag(lu))
    if pivots.min() <= np.finfo(float).eps * max(pivots.max(), 1.0) * tz.shape[0]:
        raise FactorizationError("Resolvent I - dT/dz is singular", matrix="I - dT/dz")
    return lu_solve((lu, piv), tx)


# ---------------------------------------------------------------------------
# fixed-point operators
# ---------------------------------------------------------------------------


class FixedPointOperator(Protocol):
    """z ↦ T(z, x) for a fixed x, with its partial Jacobians"""

    def step(self, z: np.ndarray) -> np.ndarray: ...

    def jacobian_z(self, z: np.ndarray) -> np.ndarray: ...

    def jacobian_x(self, z: np.ndarray) -> np.ndarray: ...


@dataclass
class FdpfOperator:
    """The FDPF map at fixed (x, d)"""

    grid: GridModel
    factors: FdpfFactors
    x: np.ndarray
    d: np.ndarray
    v_clamp: Tuple[float, float] = DEFAULT_V_CLAMP

    def step(self, z: np.ndarray) -> np.ndarray:
        return fdpf_step_recorded(self.grid, self.factors, z, self.x, self.d, self.v_clamp).z_out

    def jacobians(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return fdpf_step_jacobians(self.grid, self.factors, z, self.x, self.d, self.v_clamp)

    def jacobian_z(self, z: np.ndarray) -> np.ndarray:
        return self.jacobians(z)[0]

    def jacobian_x(self, z: np.ndarray) -> np.ndarray:
        return self.jacobians(z)[1]


@dataclass
class NewtonOperator:
    """The Newton map at fixed (x, d), differentiated with its Jacobian factor frozen"""

    grid: GridModel
    x: np.ndarray
    d: np.ndarray

    def step(self, z: np.ndarray) -> np.ndarray:
        return nr_step_recorded(self.grid, z, self.x, self.d).z_out

    def jacobians(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        jz, jx = pf_jacobians(self.grid, z, self.x)
        return np.zeros_like(jz), -lu_solve(factorize_jacobian(jz, z), jx)

    def jacobian_z(self, z: np.ndarray) -> np.ndarray:
        return self.jacobians(z)[0]

    def jacobian_x(self, z: np.ndarray) -> np.ndarray:
        return self.jacobians(z)[1]


def composite_jacobians(
    op: FixedPointOperator, z: np.ndarray, k: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(∂T^k/∂z, ∂T^k/∂x, T^k(z)) with the entry state held constant"""
    jz_total: Optional[np.ndarray] = None
    jx_total: Optional[np.ndarray] = None
    for _ in range(k):
        if hasattr(op, "jacobians"):
            tz, tx = op.jacobians(z)
        else:
            tz, tx = op.jacobian_z(z), op.jacobian_x(z)
        jz_total = tz if jz_total is None else tz @ jz_total
        jx_total = tx if jx_total is None else tz @ jx_total + tx
        z = op.step(z)
    if jz_total is None:
        raise ValueError("k must be >= 1")
    return jz_total, jx_total, z


def make_operator(
    grid: GridModel,
    factors: FdpfFactors,
    x: np.ndarray,
    d: np.ndarray,
    kind: RefinementKind,
    v_clamp: Tuple[float, float] = DEFAULT_V_CLAMP,
) -> FixedPointOperator:
    if kind == RefinementKind.SINGLE_NR:
        return NewtonOperator(grid, x, d)
    return FdpfOperator(grid, factors, x, d, v_clamp)


def kstep_jacobian(
    grid: GridModel,
    factors: FdpfFactors,
    z_entry: np.ndarray,
    x: np.ndarray,
    d: np.ndarray,
    K_R: int,
    kind: RefinementKind,
    v_clamp: Tuple[float, float] = DEFAULT_V_CLAMP,
) -> np.ndarray:
    """∂T^{K_R}(z_entry, x)/∂x with z_entry treated as a constant"""
    if kind == RefinementKind.SINGLE_NR and K_R != 1:
        raise ValueError("single_nr refinement takes exactly one step")
    op = make_operator(grid, factors, x, d, kind, v_clamp)
    return composite_jacobians(op, np.asarray(z_entry, dtype=float), K_R)[1]


def record_refinement(
    grid: GridModel,
    factors: FdpfFactors,
    z_entry: np.ndarray,
    x: np.ndarray,
    d: np.ndarray,
    K_R: int,
    kind: RefinementKind,
    v_clamp: Tuple[float, float] = DEFAULT_V_CLAMP,
) -> RefinementTape:
    """Re-run the refinement from z_entry keeping every step's intermediates"""
    tape = RefinementTape(kind=kind, z_entry=np.asarray(z_entry, dtype=float))
    z = tape.z_entry
    for _ in range(K_R):
        if kind == RefinementKind.SINGLE_NR:
            rec = nr_step_recorded(grid, z, x, d)
        else:
            rec = fdpf_step_recorded(grid, factors, z, x, d, v_clamp)
        tape.steps.append(rec)
        z = rec.z_out
    return tape


def tape_vjp(
    grid: GridModel,
    factors: FdpfFactors,
    tape: RefinementTape,
    x: np.ndarray,
    d: np.ndarray,
    cotangent: np.ndarray,
) -> np.ndarray:
    """Reverse sweep over a recorded tape; the cotangent reaching z_entry is dropped"""
    g = np.asarray(cotangent, dtype=float)
    gx = np.zeros(grid.partition.m)
    for rec in reversed(tape.steps):
        if isinstance(rec, NewtonStepRecord):
            adjoint = lu_solve(rec.lu, g, trans=1)
            gx -= rec.jx.T @ adjoint
            g = np.zeros_like(g)
        else:
            g, gx_step = _FdpfLinearization(grid, factors, rec, x, d).vjp(g)
            gx += gx_step
    return gx


def refinement_vjp(
    grid: GridModel,
    factors: FdpfFactors,
    z_entry: np.ndarray,
    x: np.ndarray,
    d: np.ndarray,
    K_R: int,
    kind: RefinementKind,
    cotangent: np.ndarray,
    tape: Optional[RefinementTape] = None,
    v_clamp: Tuple[float, float] = DEFAULT_V_CLAMP,
) -> np.ndarray:
    """cotangentᵀ · kstep_jacobian without forming the Jacobian

    Args:
        z_entry: Detached guide-phase output
        K_R: Number of refinement steps
        kind: Refinement kind
        cotangent: n-vector
        tape: Records from the forward solve (recomputed from z_entry when omitted)

    Returns:
        m-vector
    """
    if tape is None:
        tape = record_refinement(grid, factors, z_entry, x, d, K_R, kind, v_clamp)
    elif len(tape) != K_R:
        raise ValueError(f"tape holds {len(tape)} steps, expected K_R={K_R}")
    return tape_vjp(grid, factors, tape, x, d, cotangent)


def sensitivity_report(
    grid: GridModel,
    factors: FdpfFactors,
    z_star: np.ndarray,
    z_entry: np.ndarray,
    x: np.ndarray,
    d: np.ndarray,
    K_R: int,
    kind: RefinementKind = RefinementKind.KSTEP_FDPF,
) -> SensitivityReport:
    """Exact Jacobians at z_star against the K-step Jacobian from z_entry"""
    via_h = exact_implicit_jacobian_h(grid, z_star, x, d)
    via_t = exact_implicit_jacobian_T(grid, factors, z_star, x, d)
    kstep = kstep_jacobian(grid, factors, z_entry, x, d, K_R, kind)
    cosine, relerr = compare_gradients(kstep, via_h)
    return SensitivityReport(
        exact_via_h=via_h,
        exact_via_T=via_t,
        kstep=kstep,
        K_R=K_R,
        cosine_to_exact=cosine,
        relative_error=relerr,
    )
