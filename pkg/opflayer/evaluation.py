"""
Split metrics, contraction and theorem-constant estimation, the alignment study and gradient
oracles
"""

import logging
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from scipy.linalg import svdvals

from .casefile.reports import ReferenceSet
from .config import EstimationConfig, SolverConfig
from .diffgrad import (
    FixedPointOperator,
    compare_gradients,
    composite_jacobians,
    exact_implicit_jacobian_h,
    exact_implicit_jacobian_T,
    exact_implicit_vjp,
    finite_diff_jacobian,
    kstep_jacobian,
    make_operator,
    record_refinement,
    refinement_vjp,
)
from .enums import GradientMode, RefinementKind
from .error import ReferenceDataError
from .grid import FdpfFactors, GridModel
from .loss import DualState, lagrangian_value
from .model import (
    ForwardRecord,
    PredictionNetwork,
    complete_controls,
    control_gradient,
    control_jacobian_norm,
    decode_prediction,
    flatten_gradient,
    forward_full,
    loss_partials,
    mlp_forward,
    pullback_controls,
)
from .pf import flat_start, solve_newton
from .result import VIOLATION_TOL, AlignmentRow, MetricsRecord, TheoremConstants
from .utils import ordered_map

log = logging.getLogger(__name__)

# Dense SVD below this many rows, power iteration above
DENSE_NORM_ROWS = 600


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def run_records(
    network: PredictionNetwork,
    grid: GridModel,
    factors: FdpfFactors,
    demands: np.ndarray,
    cfg: SolverConfig,
    workers: int = 1,
) -> List[ForwardRecord]:
    """forward_full for every row of `demands`, in row order

    The network runs once on the whole batch; its wall time is shared out evenly over the
    records' `seconds`.
    """
    demands = np.atleast_2d(np.asarray(demands, dtype=float))
    if len(demands) == 0:
        return []
    start = time.perf_counter()
    raw = mlp_forward(network, demands)
    x = decode_prediction(raw, grid)
    network_share = (time.perf_counter() - start) / len(demands)

    def _complete(i: int) -> ForwardRecord:
        record = complete_controls(grid, factors, demands[i], x[i], cfg, raw[i])
        record.seconds += network_share
        return record

    return ordered_map(_complete, list(range(len(demands))), workers)


def _check_references(references: ReferenceSet, indices: Sequence[int]) -> None:
    missing = references.missing(indices)
    if missing:
        raise ReferenceDataError(
            f"No reference cost for {len(missing)} samples: {missing[:20]}", indices=missing
        )


def summarize_records(
    records: Sequence[ForwardRecord],
    references: Optional[ReferenceSet] = None,
    indices: Optional[Sequence[int]] = None,
    epoch: Optional[int] = None,
) -> MetricsRecord:
    """Aggregate per-sample loss pieces into the split metrics

    Diverged records are counted but contribute nothing else. The gap uses the
    references of `indices` (dataset sample indices aligned with `records`).

    Raises:
        ReferenceDataError: A sample has no reference cost
    """
    if references is not None:
        indices = list(range(len(records))) if indices is None else list(indices)
        _check_references(references, indices)

    used = [i for i, r in enumerate(records) if r.usable]
    diverged = len(records) - len(used)
    if diverged:
        log.warning(f"{diverged} of {len(records)} samples diverged")
    if not used:
        nan = float("nan")
        return MetricsRecord(
            epoch=epoch,
            eq_mean_mismatch=nan,
            eq_max_mismatch=nan,
            eq_viol_num=nan,
            ineq_mean_mismatch=nan,
            ineq_max_mismatch=nan,
            ineq_viol_num=nan,
            objective_cost=nan,
            samples=0,
            diverged=diverged,
        )

    abs_h = np.stack([np.abs(records[i].h) for i in used])
    g_plus = np.stack([np.maximum(records[i].g, 0.0) for i in used])
    costs = np.array([records[i].f for i in used])

    gap = float("nan")
    if references is not None:
        ref = np.array([references.cost(indices[i]) for i in used])
        gap = float(100.0 * np.mean((costs - ref) / ref))

    return MetricsRecord(
        epoch=epoch,
        eq_mean_mismatch=float(abs_h.mean(axis=1).mean()),
        eq_max_mismatch=float(abs_h.max()),
        eq_viol_num=float((abs_h > VIOLATION_TOL).sum(axis=1).mean()),
        ineq_mean_mismatch=float(g_plus.mean(axis=1).mean()) if g_plus.size else 0.0,
        ineq_max_mismatch=float(g_plus.max()) if g_plus.size else 0.0,
        ineq_viol_num=float((g_plus > VIOLATION_TOL).sum(axis=1).mean()),
        objective_cost=float(costs.mean()),
        objective_gap_pct=gap,
        samples=len(used),
        diverged=diverged,
        inference_seconds=float(np.mean([r.seconds for r in records])),
    )


def evaluate(
    network: PredictionNetwork,
    grid: GridModel,
    factors: FdpfFactors,
    demands: np.ndarray,
    cfg: SolverConfig,
    references: Optional[ReferenceSet] = None,
    indices: Optional[Sequence[int]] = None,
    epoch: Optional[int] = None,
    workers: int = 1,
) -> MetricsRecord:
    """Metrics of `network` on the demand rows (a dataset split)

    Args:
        network: Prediction network
        grid: Network model
        factors: FDPF factors
        demands: (samples, 2·n_bus) demand rows
        cfg: Forward-solver configuration
        references: Reference optima; enables the objective gap
        indices: Dataset index of each row (defaults to 0..samples-1)
        epoch: Epoch stamped on the record
        workers: Per-sample worker threads

    Raises:
        ReferenceDataError: `references` lacks one of the requested indices
    """
    if references is not None:
        indices = list(range(len(demands))) if indices is None else list(indices)
        _check_references(references, indices)
    records = run_records(network, grid, factors, demands, cfg, workers)
    metrics = summarize_records(records, references, indices, epoch)
    log.info(f"Evaluated {len(records)} samples: {metrics!r}")
    return metrics


# ---------------------------------------------------------------------------
# operator norms and contraction
# ---------------------------------------------------------------------------


def operator_norm(matrix: np.ndarray, iterations: int = 100, seed: int = 0) -> float:
    """Spectral norm: dense SVD for small matrices, power iteration on MᵀM otherwise"""
    if matrix.size == 0:
        return 0.0
    if matrix.shape[0] < DENSE_NORM_ROWS:
        return float(svdvals(matrix, check_finite=False)[0])
    v = np.random.default_rng(seed).standard_normal(matrix.shape[1])
    sigma = 0.0
    for _ in range(iterations):
        norm = np.linalg.norm(v)
        if norm == 0.0:
            return 0.0
        u = matrix @ (v / norm)
        sigma = float(np.linalg.norm(u))
        v = matrix.T @ u
    return sigma


def estimate_contraction(
    operator: Union[FixedPointOperator, Sequence[FixedPointOperator]],
    states: Sequence[np.ndarray],
    K_R: int,
) -> float:
    """max over states of ‖∂T^{K_R}/∂z‖₂

    Args:
        operator: One operator for all states, or one per state
        states: Completion states near the fixed point
        K_R: Composite depth
    """
    ops = list(operator) if isinstance(operator, (list, tuple)) else [operator] * len(states)
    if len(ops) != len(states):
        raise ValueError(f"{len(ops)} operators for {len(states)} states")
    rho = 0.0
    for op, z in zip(ops, states):
        jz, _, _ = composite_jacobians(op, np.asarray(z, dtype=float), K_R)
        rho = max(rho, operator_norm(jz))
    return rho


# ---------------------------------------------------------------------------
# theorem constants
# ---------------------------------------------------------------------------


@dataclass
class _Reference:
    """A sample solved to z* with its exact gradient"""

    index: int
    d: np.ndarray
    x: np.ndarray
    z_star: np.ndarray
    exact_phi: np.ndarray


def _unit_directions(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.standard_normal((count, n))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def _solve_references(
    network: PredictionNetwork,
    grid: GridModel,
    samples: np.ndarray,
    duals: DualState,
    tolerance: float,
) -> List[_Reference]:
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    x_all = decode_prediction(mlp_forward(network, samples), grid)
    refs = []
    for i, (d, x) in enumerate(zip(samples, x_all)):
        solve = solve_newton(grid, x, d, tol=tolerance)
        if not solve.converged:
            log.warning(f"Sample {i}: Newton polish did not converge ({solve!r}), skipped")
            continue
        direct, through_z = loss_partials(grid, x, solve.z_star, d, duals)
        exact_x = direct + exact_implicit_vjp(grid, solve.z_star, x, through_z)
        exact_phi = flatten_gradient(pullback_controls(network, d, grid, exact_x))
        refs.append(_Reference(i, d, x, solve.z_star, exact_phi))
    return refs


def _sample_constants(
    ref: _Reference,
    network: PredictionNetwork,
    grid: GridModel,
    factors: FdpfFactors,
    duals: DualState,
    K_R: int,
    cfg: EstimationConfig,
    kind: RefinementKind,
    rng: np.random.Generator,
) -> dict:
    op = make_operator(grid, factors, ref.x, ref.d, kind)
    z_star = ref.z_star
    rays = _unit_directions(z_star.size, cfg.directions, rng)

    jz0, jx0, _ = composite_jacobians(op, z_star, K_R)
    direct0, through0 = loss_partials(grid, ref.x, z_star, ref.d, duals)
    rho, l_t = operator_norm(jz0), operator_norm(jx0)
    c_z = float(np.linalg.norm(through0))
    l_x = l_z = l_j = 0.0

    # difference quotients along rays from z*, so |h| keeps its sign between the pair
    for u in rays:
        near, far = z_star + 0.5 * cfg.radius * u, z_star + cfg.radius * u
        step = 0.5 * cfg.radius
        jz_n, jx_n, _ = composite_jacobians(op, near, K_R)
        jz_f, jx_f, _ = composite_jacobians(op, far, K_R)
        rho = max(rho, operator_norm(jz_n), operator_norm(jz_f))
        l_t = max(l_t, operator_norm(jx_n), operator_norm(jx_f))
        l_j = max(l_j, operator_norm(jx_f - jx_n) / step)

        dx_n, dz_n = loss_partials(grid, ref.x, near, ref.d, duals)
        dx_f, dz_f = loss_partials(grid, ref.x, far, ref.d, duals)
        c_z = max(c_z, float(np.linalg.norm(dz_n)), float(np.linalg.norm(dz_f)))
        l_x = max(l_x, float(np.linalg.norm(dx_f - dx_n)) / step)
        l_z = max(l_z, float(np.linalg.norm(dz_f - dz_n)) / step)

    sigma_j = operator_norm(exact_implicit_jacobian_T(grid, factors, z_star, ref.x, ref.d))
    sigma_a = control_jacobian_norm(
        network, ref.d, grid, cfg.power_iterations, seed=int(rng.integers(2**31))
    )
    return {
        "rho_k": rho,
        "L_T": l_t,
        "L_J": l_j,
        "L_x": l_x,
        "L_z": l_z,
        "C_z": c_z,
        "sigma_J": sigma_j,
        "C_g": float(np.linalg.norm(ref.exact_phi)),
        "sigma_A": sigma_a,
        "d_0": float(np.linalg.norm(flat_start(grid) - z_star)),
    }


def composite_guide_depth(guide_iterations: int, K_R: int) -> int:
    """Whole applications of T^{K_R} contained in the guide phase"""
    return guide_iterations // K_R


def _aggregate(per_sample: List[dict], K_R: int, k: int) -> TheoremConstants:
    keys = per_sample[0].keys()
    values = {key: np.array([s[key] for s in per_sample]) for key in keys}
    constants = TheoremConstants(
        K_R=K_R,
        k=k,
        spread={key: float(v.std()) for key, v in values.items()},
        **{key: float(v.mean()) for key, v in values.items()},
    )
    if constants.c_g_flagged:
        log.warning(
            f"C_g={constants.C_g:.3e} below 1e-12, alignment bound undefined (K_R={K_R})"
        )
    return constants


def estimate_constants(
    network: PredictionNetwork,
    grid: GridModel,
    factors: FdpfFactors,
    samples: np.ndarray,
    duals: DualState,
    K_R: int,
    cfg: Optional[EstimationConfig] = None,
    kind: RefinementKind = RefinementKind.KSTEP_FDPF,
    seed: int = 0,
) -> TheoremConstants:
    """Mean (± std in `spread`) of the alignment-bound constants over `samples`

    Each sample is solved to z* by a Newton polish. Operator norms and Lipschitz
    difference quotients are taken over a stencil of rays of length `cfg.radius` around
    z*; σ_A comes from power iteration on ∂x/∂φ.

    Raises:
        ValueError: Fewer than two samples, or fewer than two that could be solved
    """
    cfg = cfg or EstimationConfig()
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if len(samples) < 2:
        raise ValueError(f"estimate_constants needs at least 2 samples, got {len(samples)}")
    refs = _solve_references(network, grid, samples, duals, cfg.polish_tolerance)
    if len(refs) < 2:
        raise ValueError(f"only {len(refs)} samples could be solved to z*")
    return _constants_from(refs, network, grid, factors, duals, K_R, cfg, kind, seed)


def _constants_from(refs, network, grid, factors, duals, K_R, cfg, kind, seed) -> TheoremConstants:
    rng = np.random.default_rng(seed)
    per_sample = [
        _sample_constants(ref, network, grid, factors, duals, K_R, cfg, kind, rng) for ref in refs
    ]
    k = composite_guide_depth(cfg.guide_iterations, K_R)
    constants = _aggregate(per_sample, K_R, k)
    log.info(f"Estimated {constants!r}")
    return constants


# ---------------------------------------------------------------------------
# alignment study
# ---------------------------------------------------------------------------


def kstep_parameter_gradient(
    network: PredictionNetwork,
    grid: GridModel,
    factors: FdpfFactors,
    d: np.ndarray,
    x: np.ndarray,
    duals: DualState,
    solver: SolverConfig,
) -> Optional[np.ndarray]:
    """Flattened K-step ∂L/∂φ after a hybrid solve; None when the solve diverged"""
    record = complete_controls(grid, factors, d, x, solver)
    if not record.usable:
        return None
    cotangent = control_gradient(record, duals, grid, factors, GradientMode.KSTEP)
    return flatten_gradient(pullback_controls(network, d, grid, cotangent))


def alignment_report(
    network: PredictionNetwork,
    grid: GridModel,
    factors: FdpfFactors,
    samples: np.ndarray,
    duals: DualState,
    k_r_list: Optional[Sequence[int]] = None,
    cfg: Optional[EstimationConfig] = None,
    seed: int = 0,
) -> List[AlignmentRow]:
    """Cosine and relative error of the K-step gradient against the exact one, per K_R

    The exact gradient uses the implicit Jacobian at the Newton-polished z*; the K-step
    gradient follows the hybrid forward solve with `cfg.guide_iterations` guide steps and
    K_R recorded FDPF steps. Theorem constants are estimated alongside for each K_R.
    """
    cfg = cfg or EstimationConfig()
    k_r_list = list(k_r_list or cfg.k_r_list)
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    refs = _solve_references(network, grid, samples, duals, cfg.polish_tolerance)
    if len(refs) < 2:
        raise ValueError(f"alignment study needs at least 2 solvable samples, got {len(refs)}")

    rows = []
    for K_R in k_r_list:
        solver = SolverConfig(
            guide_iterations=cfg.guide_iterations,
            refinement=RefinementKind.KSTEP_FDPF,
            refinement_iterations=K_R,
        )
        cosines, relerrs = [], []
        for ref in refs:
            approx = kstep_parameter_gradient(network, grid, factors, ref.d, ref.x, duals, solver)
            if approx is None:
                log.warning(f"Sample {ref.index}: hybrid solve diverged at K_R={K_R}, skipped")
                continue
            cosine, relerr = compare_gradients(approx, ref.exact_phi)
            cosines.append(cosine)
            relerrs.append(relerr)

        constants = _constants_from(
            refs, network, grid, factors, duals, K_R, cfg, RefinementKind.KSTEP_FDPF, seed
        )
        row = AlignmentRow(
            K_R=K_R,
            cosine_mean=float(np.mean(cosines)) if cosines else float("nan"),
            cosine_std=float(np.std(cosines)) if cosines else float("nan"),
            relerr_mean=float(np.mean(relerrs)) if relerrs else float("nan"),
            relerr_std=float(np.std(relerrs)) if relerrs else float("nan"),
            constants=constants,
            cosines=cosines,
            relerrs=relerrs,
        )
        log.info(
            f"K_R={K_R}: cos={row.cosine_mean:.4f}±{row.cosine_std:.4f} "
            f"relerr={row.relerr_mean:.3e} bound={constants.bound:.4f}"
        )
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# gradient oracles
# ---------------------------------------------------------------------------

# Forward configuration whose output sits on z*(x) to round-off
_TIGHT_SOLVER = SolverConfig(
    guide_iterations=60, refinement=RefinementKind.SINGLE_NR, tolerance=1e-9
)


def _relative(approx: np.ndarray, exact: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(exact)), 1e-30)
    return float(np.linalg.norm(np.ravel(approx) - np.ravel(exact)) / scale)


def _parameter_oracle(
    network: PredictionNetwork,
    grid: GridModel,
    factors: FdpfFactors,
    d: np.ndarray,
    duals: DualState,
    parameters: int,
    step: float,
    rng: np.random.Generator,
) -> float:
    """Exact-mode ∂L/∂φ against central differences over randomly chosen scalar parameters"""
    record = forward_full(network, grid, factors, d, _TIGHT_SOLVER)
    if not record.usable:
        raise ValueError("forward pass diverged at the gradient-check sample")
    cotangent = control_gradient(record, duals, grid, factors, GradientMode.EXACT)
    analytic = flatten_gradient(pullback_controls(network, d, grid, cotangent))

    flat = [p.data.view(-1) for p in network.parameters()]
    sizes = np.cumsum([0] + [p.numel() for p in flat])
    chosen = rng.choice(sizes[-1], size=min(parameters, int(sizes[-1])), replace=False)
    numeric = np.empty(chosen.size)
    with torch.no_grad():
        for k, flat_index in enumerate(chosen):
            layer = int(np.searchsorted(sizes, flat_index, side="right") - 1)
            entry = flat[layer][int(flat_index - sizes[layer])]
            original = entry.item()
            values = []
            for sign in (1.0, -1.0):
                entry.fill_(original + sign * step)
                shifted = forward_full(network, grid, factors, d, _TIGHT_SOLVER)
                values.append(lagrangian_value(shifted.f, shifted.g, shifted.h, duals))
            entry.fill_(original)
            numeric[k] = (values[0] - values[1]) / (2.0 * step)
    return _relative(analytic[chosen], numeric)


def gradient_check(
    grid: GridModel,
    factors: FdpfFactors,
    d: np.ndarray,
    x: np.ndarray,
    network: Optional[PredictionNetwork] = None,
    duals: Optional[DualState] = None,
    K_R: int = 4,
    guide_iterations: int = 8,
    parameters: int = 50,
    seed: int = 0,
) -> Dict[str, float]:
    """Relative errors of every sensitivity oracle at one operating point

    Returns:
        Mapping oracle name → relative error (the VJP entry also gets its absolute
        difference under `kstep_vjp_abs`)
    """
    rng = np.random.default_rng(seed)
    d = np.asarray(d, dtype=float)
    x = np.asarray(x, dtype=float)
    solve = solve_newton(grid, x, d, tol=1e-12)
    if not solve.converged:
        raise ValueError(f"operating point does not solve: {solve!r}")
    z_star = solve.z_star
    report: Dict[str, float] = {}

    via_h = exact_implicit_jacobian_h(grid, z_star, x, d)
    via_t = exact_implicit_jacobian_T(grid, factors, z_star, x, d)
    report["implicit_h_vs_T"] = _relative(via_t, via_h)

    def fixed_point(xp):
        return solve_newton(grid, xp, d, tol=1e-13, z0=z_star).z_star

    report["implicit_h_vs_fd"] = _relative(via_h, finite_diff_jacobian(fixed_point, x, 1e-6))

    guide = make_operator(grid, factors, x, d, RefinementKind.KSTEP_FDPF)
    z_entry = flat_start(grid)
    for _ in range(guide_iterations):
        z_entry = guide.step(z_entry)
    kstep = kstep_jacobian(grid, factors, z_entry, x, d, K_R, RefinementKind.KSTEP_FDPF)

    def kstep_map(xp):
        return record_refinement(
            grid, factors, z_entry, xp, d, K_R, RefinementKind.KSTEP_FDPF
        ).steps[-1].z_out

    report["kstep_vs_fd"] = _relative(kstep, finite_diff_jacobian(kstep_map, x, 1e-6))

    cotangent = rng.standard_normal(grid.partition.n)
    worst_abs = 0.0
    worst_rel = 0.0
    for kind, depth in ((RefinementKind.KSTEP_FDPF, K_R), (RefinementKind.SINGLE_NR, 1)):
        dense = kstep_jacobian(grid, factors, z_entry, x, d, depth, kind)
        swept = refinement_vjp(grid, factors, z_entry, x, d, depth, kind, cotangent)
        worst_abs = max(worst_abs, float(np.max(np.abs(swept - cotangent @ dense))))
        worst_rel = max(worst_rel, _relative(swept, cotangent @ dense))
    report["kstep_vjp"] = worst_rel
    report["kstep_vjp_abs"] = worst_abs

    if network is not None:
        if duals is None:
            duals = DualState(
                lam=rng.uniform(0.0, 1.0, grid.n_ineq), nu=rng.uniform(0.0, 1.0, grid.n_eq)
            )
        report["parameter_gradient_vs_fd"] = _parameter_oracle(
            network, grid, factors, d, duals, parameters, 1e-5, rng
        )

    for name, value in report.items():
        log.info(f"{name}: {value:.3e}")
    return report
