"""
Power-flow residuals, Jacobians, FDPF / Newton steps and the hybrid forward solver
"""

import logging
from dataclasses import dataclass, field
from typing import Any, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.linalg import lu_factor, lu_solve

from .config import SolverConfig
from .enums import RefinementKind
from .error import SingularJacobianError, SolverDivergedError
from .grid import FdpfFactors, GridModel

log = logging.getLogger(__name__)

DEFAULT_V_CLAMP = (0.1, 2.5)


# ---------------------------------------------------------------------------
# state layout helpers
# ---------------------------------------------------------------------------


def flat_start(grid: GridModel) -> np.ndarray:
    """z with θ = slack angle at G∪D and V = 1 p.u. at D"""
    p = grid.partition
    return np.concatenate([np.full(p.n_theta, grid.slack_angle), np.ones(p.load.size)])


def nominal_controls(grid: GridModel) -> np.ndarray:
    """x from the case file's generator set points (P^g at G, V^g at G∪R)"""
    p = grid.partition
    gen_of_bus = grid.gen_of_bus
    return np.concatenate([grid.pg0[gen_of_bus[p.gen]], grid.vg[gen_of_bus[p.controlled]]])


def voltage_profile(grid: GridModel, z: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Full (V, θ) per bus from the partitioned state"""
    p = grid.partition
    vm = np.empty(grid.n_bus)
    va = np.empty(grid.n_bus)
    vm[p.controlled] = x[p.x_vm]
    vm[p.load] = z[p.z_vm]
    va[p.slack] = grid.slack_angle
    va[p.nonslack] = z[p.z_va]
    return vm, va


def bus_generation(grid: GridModel, x: np.ndarray) -> np.ndarray:
    """P^g per bus as fixed by x (zero outside G)"""
    pg = np.zeros(grid.n_bus)
    pg[grid.partition.gen] = x[grid.partition.x_pg]
    return pg


def split_demand(grid: GridModel, d: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if d.shape != (2 * grid.n_bus,):
        raise ValueError(f"d must have shape ({2 * grid.n_bus},), got {d.shape}")
    return d[: grid.n_bus], d[grid.n_bus :]


# ---------------------------------------------------------------------------
# injections and residuals
# ---------------------------------------------------------------------------


def power_injections(
    grid: GridModel, vm: np.ndarray, va: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Net injections P_i, Q_i (p.u.) at every bus"""
    v = vm * np.exp(1j * va)
    s = v * np.conj(grid.ybus @ v)
    return s.real, s.imag


def injection_derivatives(
    grid: GridModel, vm: np.ndarray, va: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Complex ∂S/∂θ and ∂S/∂V over all buses (dense n_bus × n_bus)"""
    v = vm * np.exp(1j * va)
    vnorm = np.exp(1j * va)
    ibus = grid.ybus @ v
    ds_dvm = v[:, None] * np.conj(grid.ybus * vnorm[None, :]) + np.diag(np.conj(ibus) * vnorm)
    ds_dva = 1j * v[:, None] * np.conj(np.diag(ibus) - grid.ybus * v[None, :])
    return ds_dva, ds_dvm


def completion_residual(grid: GridModel, z: np.ndarray, x: np.ndarray, d: np.ndarray) -> np.ndarray:
    """h(z, x, d): P balance at G∪D, then Q balance at D"""
    p = grid.partition
    pd, qd = split_demand(grid, d)
    vm, va = voltage_profile(grid, z, x)
    pinj, qinj = power_injections(grid, vm, va)
    pg = bus_generation(grid, x)
    return np.concatenate(
        [pinj[p.nonslack] - (pg[p.nonslack] - pd[p.nonslack]), qinj[p.load] + qd[p.load]]
    )


def mismatch_norm(grid: GridModel, z: np.ndarray, x: np.ndarray, d: np.ndarray) -> float:
    """‖h‖∞"""
    return float(np.max(np.abs(completion_residual(grid, z, x, d)), initial=0.0))


def pf_jacobians(grid: GridModel, z: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(J_z h, J_x h) sharing one evaluation of the injection derivatives"""
    p = grid.partition
    vm, va = voltage_profile(grid, z, x)
    ds_dva, ds_dvm = injection_derivatives(grid, vm, va)
    ns, ld, ctl = p.nonslack, p.load, p.controlled

    jz = np.block(
        [
            [ds_dva.real[np.ix_(ns, ns)], ds_dvm.real[np.ix_(ns, ld)]],
            [ds_dva.imag[np.ix_(ld, ns)], ds_dvm.imag[np.ix_(ld, ld)]],
        ]
    )
    jx = np.zeros((p.n, p.m))
    jx[p.gen_in_nonslack, np.arange(p.gen.size)] = -1.0
    jx[: p.n_theta, p.x_vm] = ds_dvm.real[np.ix_(ns, ctl)]
    jx[p.n_theta :, p.x_vm] = ds_dvm.imag[np.ix_(ld, ctl)]
    return jz, jx


def pf_jacobian_z(grid: GridModel, z: np.ndarray, x: np.ndarray) -> np.ndarray:
    """∂h/∂z (n × n)"""
    return pf_jacobians(grid, z, x)[0]


def pf_jacobian_x(grid: GridModel, z: np.ndarray, x: np.ndarray) -> np.ndarray:
    """∂h/∂x (n × m)"""
    return pf_jacobians(grid, z, x)[1]


def factorize_jacobian(jz: np.ndarray, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """LU of J_z h; raises SingularJacobianError carrying the iterate"""
    if not np.all(np.isfinite(jz)):
        raise SingularJacobianError("Power-flow Jacobian has non-finite entries", iterate=z.copy())
    lu, piv = lu_factor(jz, check_finite=False)
    pivots = np.abs(np.diag(lu))
    if pivots.size and pivots.min() <= np.finfo(float).eps * max(pivots.max(), 1.0) * jz.shape[0]:
        raise SingularJacobianError("Power-flow Jacobian is singular", iterate=z.copy())
    return lu, piv


# ---------------------------------------------------------------------------
# fixed-point steps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FdpfStepRecord:
    """Intermediates of one recorded FDPF step (θ half-step, then V half-step)"""

    z_in: np.ndarray
    theta_mid: np.ndarray
    z_out: np.ndarray
    free: np.ndarray
    """Load-bus voltages that stayed inside the clamp box"""

    @property
    def clamped(self) -> bool:
        return not bool(self.free.all())


@dataclass(frozen=True)
class NewtonStepRecord:
    """Intermediates of one recorded Newton step (Jacobian factor frozen)"""

    z_in: np.ndarray
    z_out: np.ndarray
    lu: Tuple[np.ndarray, np.ndarray]
    jx: np.ndarray


StepRecord = Union[FdpfStepRecord, NewtonStepRecord]


@dataclass
class RefinementTape:
    """Records of the differentiable refinement steps; guide steps never appear here"""

    kind: RefinementKind
    z_entry: np.ndarray
    steps: List[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)


def fdpf_step_recorded(
    grid: GridModel,
    factors: FdpfFactors,
    z: np.ndarray,
    x: np.ndarray,
    d: np.ndarray,
    v_clamp: Tuple[float, float] = DEFAULT_V_CLAMP,
) -> FdpfStepRecord:
    """One FDPF iteration keeping the half-step intermediates"""
    p = grid.partition
    pd, qd = split_demand(grid, d)
    pg = bus_generation(grid, x)
    theta, v_load = z[p.z_va], z[p.z_vm]

    vm, va = voltage_profile(grid, z, x)
    pinj, _ = power_injections(grid, vm, va)
    dp = -(pinj[p.nonslack] - (pg[p.nonslack] - pd[p.nonslack]))
    if not np.all(np.isfinite(dp)):
        raise SolverDivergedError("Non-finite active-power mismatch in FDPF step")
    theta_mid = theta + factors.solve_prime(dp / vm[p.nonslack])

    va[p.nonslack] = theta_mid
    _, qinj = power_injections(grid, vm, va)
    dq = -(qinj[p.load] + qd[p.load])
    if not np.all(np.isfinite(dq)):
        raise SolverDivergedError("Non-finite reactive-power mismatch in FDPF step")
    v_new = v_load + factors.solve_double_prime(dq / v_load)

    lo, hi = v_clamp
    free = (v_new >= lo) & (v_new <= hi)
    v_new = np.clip(v_new, lo, hi)
    return FdpfStepRecord(
        z_in=z, theta_mid=theta_mid, z_out=np.concatenate([theta_mid, v_new]), free=free
    )


def fdpf_step(
    grid: GridModel,
    factors: FdpfFactors,
    z: np.ndarray,
    x: np.ndarray,
    d: np.ndarray,
    v_clamp: Tuple[float, float] = DEFAULT_V_CLAMP,
) -> np.ndarray:
    """T(z, x): θ update through B′, then V_D update through B″ at the refreshed angles

    Raises:
        SolverDivergedError: Non-finite mismatch
    """
    return fdpf_step_recorded(grid, factors, z, x, d, v_clamp).z_out


def nr_step_recorded(
    grid: GridModel, z: np.ndarray, x: np.ndarray, d: np.ndarray
) -> NewtonStepRecord:
    """One Newton step keeping the Jacobian factor for the reverse sweep"""
    h = completion_residual(grid, z, x, d)
    if not np.all(np.isfinite(h)):
        raise SolverDivergedError("Non-finite mismatch in Newton step")
    jz, jx = pf_jacobians(grid, z, x)
    lu = factorize_jacobian(jz, z)
    z_out = z - lu_solve(lu, h)
    return NewtonStepRecord(z_in=z, z_out=z_out, lu=lu, jx=jx)


def nr_step(grid: GridModel, z: np.ndarray, x: np.ndarray, d: np.ndarray) -> np.ndarray:
    """z − (J_z h)⁻¹ h

    Raises:
        SingularJacobianError: J_z h is singular at z (the error carries z)
    """
    return nr_step_recorded(grid, z, x, d).z_out


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------


class SolveResult(BaseModel):
    """Outcome of a forward power-flow solve"""

    z_star: np.ndarray = Field(..., description="Final completion state")
    z_entry: Optional[np.ndarray] = Field(default=None, description="Guide-phase output")
    iterations_used: int = Field(..., ge=0)
    final_mismatch_inf_norm: float = Field(..., description="‖h(z_star)‖∞ (p.u.)")
    tolerance: float = Field(..., gt=0)
    converged: bool
    diverged: bool = Field(default=False, description="Aborted by non-finite or capped mismatch")
    trace: List[float] = Field(default_factory=list, description="‖h‖∞ after each iteration")
    clamp_events: List[int] = Field(default_factory=list, description="Iterations that clamped V")
    tape: Optional[Any] = Field(
        default=None, repr=False, description="RefinementTape of the recorded steps"
    )

    model_config = ConfigDict(arbitrary_types_allowed=True)

    @model_validator(mode="after")
    def _converged_within_tolerance(self) -> "SolveResult":
        if self.converged and not self.final_mismatch_inf_norm < self.tolerance:
            raise ValueError("converged result must have mismatch below tolerance")
        return self

    def __bool__(self) -> bool:
        return self.converged

    def __repr__(self):
        status = "converged" if self.converged else ("diverged" if self.diverged else "open")
        return (
            f"SolveResult({status}, {self.iterations_used} it, "
            f"mismatch={self.final_mismatch_inf_norm:.3e})"
        )


class _Run:
    """Shared iteration bookkeeping for the solvers below"""

    def __init__(self, grid, x, d, tolerance, cap, z0=None):
        self.grid, self.x, self.d = grid, x, d
        self.tolerance, self.cap = tolerance, cap
        self.z = flat_start(grid) if z0 is None else np.asarray(z0, dtype=float).copy()
        self.trace: List[float] = []
        self.clamps: List[int] = []
        self.mismatch = mismatch_norm(grid, self.z, x, d)

    def advance(self, z_new: np.ndarray, clamped: bool = False) -> bool:
        """Accept an iterate; False when the run has to stop as diverged"""
        self.z = z_new
        self.mismatch = mismatch_norm(self.grid, z_new, self.x, self.d)
        self.trace.append(self.mismatch)
        if clamped:
            self.clamps.append(len(self.trace))
            log.debug(f"Load-bus voltage clamped at iteration {len(self.trace)}")
        return bool(np.isfinite(self.mismatch)) and self.mismatch <= self.cap

    def result(self, diverged=False, z_entry=None, tape=None) -> SolveResult:
        finite = bool(np.isfinite(self.mismatch))
        return SolveResult(
            z_star=self.z,
            z_entry=z_entry,
            iterations_used=len(self.trace),
            final_mismatch_inf_norm=self.mismatch if finite else float("inf"),
            tolerance=self.tolerance,
            converged=(not diverged) and finite and self.mismatch < self.tolerance,
            diverged=diverged,
            trace=self.trace,
            clamp_events=self.clamps,
            tape=tape,
        )


def hybrid_solve(
    grid: GridModel,
    factors: FdpfFactors,
    x: np.ndarray,
    d: np.ndarray,
    cfg: SolverConfig,
) -> SolveResult:
    """Guide phase of K_G plain FDPF steps, then the recorded refinement

    Guide iterates are discarded once taken; only the K_R refinement steps leave records
    on the returned tape. Divergence never raises: the result comes back non-converged.

    Args:
        grid: Network model
        factors: Pre-factorized B′ / B″
        x: Predicted controls
        d: Demand vector
        cfg: Solver configuration

    Returns:
        SolveResult with `z_entry` (guide output) and the refinement tape
    """
    run = _Run(grid, x, d, cfg.tolerance, cfg.divergence_cap)
    try:
        for _ in range(cfg.guide_iterations):
            rec = fdpf_step_recorded(grid, factors, run.z, x, d, cfg.v_clamp)
            if not run.advance(rec.z_out, rec.clamped):
                log.debug(f"Guide phase diverged: {run.mismatch:.3e}")
                return run.result(diverged=True)

        tape = RefinementTape(kind=cfg.refinement, z_entry=run.z.copy())
        for _ in range(cfg.refinement_iterations):
            if cfg.refinement == RefinementKind.SINGLE_NR:
                step: StepRecord = nr_step_recorded(grid, run.z, x, d)
                clamped = False
            else:
                step = fdpf_step_recorded(grid, factors, run.z, x, d, cfg.v_clamp)
                clamped = step.clamped
            tape.steps.append(step)
            if not run.advance(step.z_out, clamped):
                return run.result(diverged=True, z_entry=tape.z_entry)
    except (SolverDivergedError, SingularJacobianError) as e:
        log.debug(f"Forward solve aborted: {e}")
        return run.result(diverged=True)

    return run.result(z_entry=tape.z_entry, tape=tape)


def solve_newton(
    grid: GridModel,
    x: np.ndarray,
    d: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 30,
    z0: Optional[np.ndarray] = None,
    divergence_cap: float = 1e3,
) -> SolveResult:
    """Plain Newton-Raphson to tolerance (reference solver)"""
    run = _Run(grid, x, d, tol, divergence_cap, z0)
    try:
        while run.mismatch >= tol and len(run.trace) < max_iter:
            if not run.advance(nr_step(grid, run.z, x, d)):
                return run.result(diverged=True)
    except (SolverDivergedError, SingularJacobianError) as e:
        log.debug(f"Newton solve aborted: {e}")
        return run.result(diverged=True)
    return run.result()


def solve_fdpf(
    grid: GridModel,
    factors: FdpfFactors,
    x: np.ndarray,
    d: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 100,
    z0: Optional[np.ndarray] = None,
    divergence_cap: float = 1e3,
    v_clamp: Tuple[float, float] = DEFAULT_V_CLAMP,
) -> SolveResult:
    """Plain FDPF iterations to tolerance"""
    run = _Run(grid, x, d, tol, divergence_cap, z0)
    try:
        while run.mismatch >= tol and len(run.trace) < max_iter:
            rec = fdpf_step_recorded(grid, factors, run.z, x, d, v_clamp)
            if not run.advance(rec.z_out, rec.clamped):
                return run.result(diverged=True)
    except SolverDivergedError as e:
        log.debug(f"FDPF solve aborted: {e}")
        return run.result(diverged=True)
    return run.result()


# ---------------------------------------------------------------------------
# post-completion, assembly and flows
# ---------------------------------------------------------------------------


def post_complete(grid: GridModel, x: np.ndarray, z: np.ndarray, d: np.ndarray) -> np.ndarray:
    """z̃ = (P^g at R, Q^g at R∪G) from the balance equations"""
    p = grid.partition
    pd, qd = split_demand(grid, d)
    vm, va = voltage_profile(grid, z, x)
    pinj, qinj = power_injections(grid, vm, va)
    return np.concatenate(
        [pinj[p.slack] + pd[p.slack], qinj[p.controlled] + qd[p.controlled]]
    )


def post_complete_jacobians(
    grid: GridModel, z: np.ndarray, x: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """(∂z̃/∂z, ∂z̃/∂x)"""
    p = grid.partition
    vm, va = voltage_profile(grid, z, x)
    ds_dva, ds_dvm = injection_derivatives(grid, vm, va)
    rows_p, rows_q = p.slack, p.controlled

    dz = np.block(
        [
            [ds_dva.real[np.ix_(rows_p, p.nonslack)], ds_dvm.real[np.ix_(rows_p, p.load)]],
            [ds_dva.imag[np.ix_(rows_q, p.nonslack)], ds_dvm.imag[np.ix_(rows_q, p.load)]],
        ]
    )
    dx = np.zeros((p.n_tilde, p.m))
    dx[: p.slack.size, p.x_vm] = ds_dvm.real[np.ix_(rows_p, p.controlled)]
    dx[p.slack.size :, p.x_vm] = ds_dvm.imag[np.ix_(rows_q, p.controlled)]
    return dz, dx


def assemble_y(grid: GridModel, x: np.ndarray, z: np.ndarray, z_tilde: np.ndarray) -> np.ndarray:
    """y = (V, θ, P^g, Q^g); generators in in-service file order"""
    p = grid.partition
    gen_of_bus = grid.gen_of_bus
    vm, va = voltage_profile(grid, z, x)
    pg = np.empty(grid.n_gen)
    qg = np.empty(grid.n_gen)
    pg[gen_of_bus[p.gen]] = x[p.x_pg]
    pg[gen_of_bus[p.slack]] = z_tilde[p.zt_pg]
    qg[gen_of_bus[p.controlled]] = z_tilde[p.zt_qg]
    return np.concatenate([vm, va, pg, qg])


def split_y(
    grid: GridModel, y: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """y → (V, θ, P^g, Q^g)"""
    nb, ng = grid.n_bus, grid.n_gen
    if y.shape != (2 * nb + 2 * ng,):
        raise ValueError(f"y must have shape ({2 * nb + 2 * ng},), got {y.shape}")
    return y[:nb], y[nb : 2 * nb], y[2 * nb : 2 * nb + ng], y[2 * nb + ng :]


def disassemble_y(grid: GridModel, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of assemble_y: (x, z, z̃)"""
    p = grid.partition
    gen_of_bus = grid.gen_of_bus
    vm, va, pg, qg = split_y(grid, y)
    x = np.concatenate([pg[gen_of_bus[p.gen]], vm[p.controlled]])
    z = np.concatenate([va[p.nonslack], vm[p.load]])
    z_tilde = np.concatenate([pg[gen_of_bus[p.slack]], qg[gen_of_bus[p.controlled]]])
    return x, z, z_tilde


def y_indices(grid: GridModel) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positions of x, z and z̃ inside y (the slack angle is the only entry left out)"""
    p = grid.partition
    nb = grid.n_bus
    gen_of_bus = grid.gen_of_bus
    pg0, qg0 = 2 * nb, 2 * nb + grid.n_gen
    ix = np.concatenate([pg0 + gen_of_bus[p.gen], p.controlled])
    iz = np.concatenate([nb + p.nonslack, p.load])
    izt = np.concatenate([pg0 + gen_of_bus[p.slack], qg0 + gen_of_bus[p.controlled]])
    return ix, iz, izt


def branch_flows(
    grid: GridModel, vm: np.ndarray, va: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(P_from, Q_from, P_to, Q_to) per in-service branch, from each branch's own π-model"""
    br = grid.branches
    v = vm * np.exp(1j * va)
    vf, vt = v[br.f_bus], v[br.t_bus]
    sf = vf * np.conj(br.yff * vf + br.yft * vt)
    st = vt * np.conj(br.ytf * vf + br.ytt * vt)
    return sf.real, sf.imag, st.real, st.imag


def branch_flow_derivatives(grid: GridModel, vm: np.ndarray, va: np.ndarray):
    """Complex (Sf, St, ∂Sf/∂θ, ∂Sf/∂V, ∂St/∂θ, ∂St/∂V), dense n_branch × n_bus"""
    br = grid.branches
    v = vm * np.exp(1j * va)
    vnorm = np.exp(1j * va)
    cf, ct = br.incidence(grid.n_bus)
    yf = br.yff[:, None] * cf + br.yft[:, None] * ct
    yt = br.ytf[:, None] * cf + br.ytt[:, None] * ct
    i_f, i_t = yf @ v, yt @ v
    vf, vt = v[br.f_bus], v[br.t_bus]

    def _ends(y_end, i_end, c_end, v_end):
        s = v_end * np.conj(i_end)
        ds_dva = 1j * (np.conj(i_end)[:, None] * c_end * v[None, :]
                       - v_end[:, None] * np.conj(y_end * v[None, :]))
        ds_dvm = (v_end[:, None] * np.conj(y_end * vnorm[None, :])
                  + np.conj(i_end)[:, None] * c_end * vnorm[None, :])
        return s, ds_dva, ds_dvm

    sf, dsf_dva, dsf_dvm = _ends(yf, i_f, cf, vf)
    st, dst_dva, dst_dvm = _ends(yt, i_t, ct, vt)
    return sf, st, dsf_dva, dsf_dvm, dst_dva, dst_dvm
