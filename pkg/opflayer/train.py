"""
Primal-dual training: minibatch Adam on the network, dual ascent on the multipliers
"""

import logging
import time
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .casefile.dataset import LoadDataset
from .casefile.reports import ReferenceSet
from .config import SolverConfig, TrainConfig
from .enums import RefinementKind
from .error import OpfLayerError, TrainingAbortedError
from .evaluation import run_records, summarize_records
from .grid import FdpfFactors, GridModel
from .loss import (
    DualState,
    dual_update,
    equality_values,
    inequality_values,
    lagrangian_value,
    objective_cost,
)
from .model import (
    ForwardRecord,
    PredictionNetwork,
    complete_controls,
    control_gradient,
    decode_tensor,
)
from .result import EpochSummary, TrainHistory
from .utils import ordered_map

log = logging.getLogger(__name__)

__all__ = [
    "inequality_values",
    "equality_values",
    "objective_cost",
    "lagrangian",
    "dual_update",
    "primal_dual_train",
    "refinement_ablation",
    "TrainOutcome",
]


def trainable(record: ForwardRecord) -> bool:
    """Finite loss pieces from a solve that reached the mismatch tolerance"""
    return record.usable and record.converged


def lagrangian(record: ForwardRecord, duals: DualState) -> float:
    """f + λᵀg⁺ + νᵀ|h| of a forward record"""
    if not record.usable:
        raise ValueError("lagrangian needs a non-diverged record")
    return lagrangian_value(record.f, record.g, record.h, duals)


class PassStatistics:
    """Running sums over the converged records of one pass, reduced in sample order

    Diverged and non-converged records are both skipped; `diverged` counts the former.
    """

    def __init__(self, grid: GridModel):
        self.g_plus = np.zeros(grid.n_ineq)
        self.abs_h = np.zeros(grid.n_eq)
        self.loss = 0.0
        self.used = 0
        self.skipped = 0
        self.diverged = 0

    def add(self, record: ForwardRecord, duals: DualState) -> None:
        if not trainable(record):
            self.skipped += 1
            if not record.usable:
                self.diverged += 1
            return
        self.g_plus += np.maximum(record.g, 0.0)
        self.abs_h += np.abs(record.h)
        self.loss += lagrangian(record, duals)
        self.used += 1

    @property
    def mean_loss(self) -> float:
        return self.loss / self.used if self.used else float("nan")

    def means(self) -> Tuple[np.ndarray, np.ndarray]:
        """Dataset means of g⁺ and |h| over the converged records"""
        if not self.used:
            return np.zeros_like(self.g_plus), np.zeros_like(self.abs_h)
        return self.g_plus / self.used, self.abs_h / self.used


class TrainOutcome(NamedTuple):
    network: PredictionNetwork
    history: TrainHistory
    duals: DualState


def _train_batch(
    network: PredictionNetwork,
    optimizer: torch.optim.Optimizer,
    grid: GridModel,
    factors: FdpfFactors,
    demands: np.ndarray,
    duals: DualState,
    config: TrainConfig,
    bounds: torch.Tensor,
    workers: int,
) -> List[ForwardRecord]:
    """One Adam step on the mean batch Lagrangian; returns the batch records"""
    optimizer.zero_grad()
    x_t = decode_tensor(network(torch.as_tensor(demands, dtype=torch.float64)), bounds)
    x = x_t.detach().numpy()

    def _sample(i: int):
        record = complete_controls(grid, factors, demands[i], x[i], config.solver)
        if not trainable(record):
            return record, None
        try:
            return record, control_gradient(record, duals, grid, factors, config.gradient_mode)
        except OpfLayerError as e:
            log.debug(f"Gradient unavailable for batch sample {i}: {e}")
            return record, None

    results = ordered_map(_sample, list(range(len(demands))), workers)
    used = [i for i, (_, cot) in enumerate(results) if cot is not None]
    if used and config.lr_phi > 0:
        cotangents = np.zeros_like(x)
        for i in used:
            cotangents[i] = results[i][1]
        x_t.backward(torch.as_tensor(cotangents / len(used)))
        if config.grad_clip:
            nn.utils.clip_grad_norm_(network.parameters(), config.grad_clip)
        optimizer.step()
    return [record for record, _ in results]


def _covering(references: Optional[ReferenceSet], indices: np.ndarray) -> Optional[ReferenceSet]:
    if references is None or references.missing(indices):
        return None
    return references


def primal_dual_train(
    grid: GridModel,
    factors: FdpfFactors,
    dataset: LoadDataset,
    config: TrainConfig,
    workers: int = 1,
    references: Optional[ReferenceSet] = None,
    network: Optional[PredictionNetwork] = None,
) -> TrainOutcome:
    """Train the prediction network on the Lagrangian of the training split

    There are outer_iterations × inner_iterations epochs, one inner pass over the
    shuffled training split each. After the last pass of every outer iteration the
    multipliers take one ascent step from that pass's mean g⁺ and |h|. Samples whose solve
    diverged or ended above the mismatch tolerance are left out of both the gradient and
    the dual statistics, and counted in `skipped`.

    Args:
        grid: Network model
        factors: FDPF factors
        dataset: Demand samples with their split
        config: Training configuration (the solver section drives the forward pass)
        workers: Per-sample worker threads
        references: Reference optima for the objective gap
        network: Start from this network instead of a fresh seeded one

    Returns:
        TrainOutcome(network, history, duals)

    Raises:
        TrainingAbortedError: More than `abort_fraction` of an epoch's samples diverged
    """
    train_idx, train_d = dataset.split("train")
    test_idx, test_d = dataset.split("test")
    if len(train_d) == 0:
        raise ValueError("training split is empty")

    if network is None:
        network = PredictionNetwork.for_grid(grid, config.hidden, seed=config.seed)
        network.set_standardization(train_d)
    optimizer = torch.optim.Adam(
        network.parameters(), lr=config.lr_phi, betas=config.betas, eps=config.adam_eps
    )
    duals = DualState.zeros(grid, config.lr_lambda, config.lr_nu)
    bounds = torch.as_tensor(grid.x_bounds, dtype=torch.float64)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    train_refs = _covering(references, train_idx)
    test_refs = _covering(references, test_idx)

    log.info(
        f"Training {network!r} on {len(train_d)} samples for {config.epochs} epochs "
        f"({config.solver!r}, {config.gradient_mode.value} gradients)"
    )
    epoch = 0
    for outer in range(config.outer_iterations):
        for inner in range(config.inner_iterations):
            epoch += 1
            start = time.perf_counter()
            order = rng.permutation(len(train_d))
            stats = PassStatistics(grid)
            records: List[ForwardRecord] = []
            for lo in range(0, len(order), config.batch_size):
                batch = order[lo : lo + config.batch_size]
                batch_records = _train_batch(
                    network,
                    optimizer,
                    grid,
                    factors,
                    train_d[batch],
                    duals,
                    config,
                    bounds,
                    workers,
                )
                for record in batch_records:
                    stats.add(record, duals)
                records.extend(batch_records)

            if stats.diverged > config.abort_fraction * len(order):
                raise TrainingAbortedError(
                    f"Epoch {epoch}: {stats.diverged} of {len(order)} samples diverged "
                    f"(limit {config.abort_fraction:.0%})",
                    epoch=epoch,
                )
            if stats.skipped:
                log.warning(
                    f"Epoch {epoch}: skipped {stats.skipped} samples "
                    f"({stats.diverged} diverged, {stats.skipped - stats.diverged} not converged)"
                )
            clamped = sum(1 for record in records if record.solve.clamp_events)
            if clamped:
                log.warning(f"Epoch {epoch}: load-bus voltage clamped in {clamped} samples")

            train_loss = stats.mean_loss
            if inner == config.inner_iterations - 1:
                duals = dual_update(duals, *stats.means())

            train_metrics = summarize_records(records, train_refs, train_idx[order], epoch)
            test_metrics, test_loss = None, None
            if len(test_d) and epoch % config.eval_every == 0:
                test_records = run_records(network, grid, factors, test_d, config.solver, workers)
                test_metrics = summarize_records(test_records, test_refs, test_idx, epoch)
                test_stats = PassStatistics(grid)
                for record in test_records:
                    test_stats.add(record, duals)
                test_loss = test_stats.mean_loss

            summary = EpochSummary(
                epoch=epoch,
                train=train_metrics,
                test=test_metrics,
                train_loss=train_loss,
                test_loss=test_loss,
                lambda_norm=duals.lambda_norm,
                nu_norm=duals.nu_norm,
                skipped=stats.skipped,
                diverged=stats.diverged,
                seconds=time.perf_counter() - start,
            )
            history.append(summary)
            log.info(
                f"Epoch {epoch}/{config.epochs} (outer {outer + 1}): loss={train_loss:.6g} "
                f"eq_mean={train_metrics.eq_mean_mismatch:.3e} "
                f"ineq_viol={train_metrics.ineq_viol_num:.2f} {duals!r}"
            )

    log.info(f"Training finished: {history.summary()}")
    return TrainOutcome(network, history, duals)


def refinement_ablation(
    grid: GridModel,
    factors: FdpfFactors,
    dataset: LoadDataset,
    config: TrainConfig,
    k_r_list: Sequence[int] = (1, 4, 8),
    guide_iterations: int = 8,
    workers: int = 1,
    references: Optional[ReferenceSet] = None,
) -> Dict[int, TrainOutcome]:
    """Train the same configuration once per refinement depth with K_G fixed"""
    outcomes = {}
    for K_R in k_r_list:
        solver = SolverConfig(
            guide_iterations=guide_iterations,
            refinement=RefinementKind.KSTEP_FDPF,
            refinement_iterations=K_R,
            tolerance=config.solver.tolerance,
            divergence_cap=config.solver.divergence_cap,
            v_clamp=config.solver.v_clamp,
        )
        log.info(f"Ablation run K_G={guide_iterations}, K_R={K_R}")
        run_config = config.model_copy(update={"solver": solver})
        outcomes[K_R] = primal_dual_train(grid, factors, dataset, run_config, workers, references)
    return outcomes
