import logging

import numpy as np
import pytest
import torch

from opflayer.casefile import generate_dataset, write_metrics_csv
from opflayer.config import SolverConfig, TrainConfig
from opflayer.enums import RefinementKind
from opflayer.error import TrainingAbortedError
from opflayer.loss import DualState
from opflayer.model import PredictionNetwork
from opflayer.train import PassStatistics, primal_dual_train, refinement_ablation, trainable


@pytest.fixture
def ring_data(ring_case):
    return generate_dataset(ring_case, (0.9, 1.1), count=12, split_fraction=0.75, seed=0)


@pytest.fixture
def small_config():
    return TrainConfig(
        hidden=[8],
        outer_iterations=2,
        inner_iterations=2,
        batch_size=4,
        lr_phi=1e-3,
        seed=5,
        solver=SolverConfig(guide_iterations=6),
    )


def _parameters(network):
    return [p.detach().clone() for p in network.parameters()]


class TestPrimalDualTrain:
    def test_history(self, ring_grid, ring_factors, ring_data, small_config):
        outcome = primal_dual_train(ring_grid, ring_factors, ring_data, small_config)
        epochs = outcome.history.epochs
        assert [e.epoch for e in epochs] == [1, 2, 3, 4]
        assert all(e.skipped == 0 for e in epochs)
        assert all(e.test is not None for e in epochs)
        assert epochs[0].train.samples == 9
        assert epochs[0].test.samples == 3

    def test_multipliers_move_after_each_outer_iteration(
        self, ring_grid, ring_factors, ring_data, small_config
    ):
        epochs = primal_dual_train(ring_grid, ring_factors, ring_data, small_config).history.epochs
        assert epochs[0].nu_norm == 0.0
        assert epochs[0].lambda_norm == 0.0
        assert epochs[1].nu_norm > 0.0
        assert epochs[2].nu_norm == epochs[1].nu_norm
        assert epochs[3].nu_norm >= epochs[1].nu_norm

    def test_deterministic(self, ring_grid, ring_factors, ring_data, small_config):
        a = primal_dual_train(ring_grid, ring_factors, ring_data, small_config)
        b = primal_dual_train(ring_grid, ring_factors, ring_data, small_config)
        assert [e.train_loss for e in a.history.epochs] == [e.train_loss for e in b.history.epochs]
        for pa, pb in zip(_parameters(a.network), _parameters(b.network)):
            assert torch.equal(pa, pb)
        np.testing.assert_array_equal(a.duals.nu, b.duals.nu)

    def test_same_seed_writes_identical_metrics(
        self, tmp_path, ring_grid, ring_factors, ring_data, small_config
    ):
        paths = []
        for run in ("a", "b"):
            outcome = primal_dual_train(ring_grid, ring_factors, ring_data, small_config)
            history = outcome.history
            paths.append(
                (
                    write_metrics_csv(history.train_records(), tmp_path / f"{run}_train.csv"),
                    write_metrics_csv(history.test_records(), tmp_path / f"{run}_test.csv"),
                )
            )
        for first, second in zip(*paths):
            assert first.read_bytes() == second.read_bytes()

    def test_zero_learning_rate_keeps_parameters(
        self, ring_grid, ring_factors, ring_data, small_config
    ):
        config = small_config.model_copy(update={"lr_phi": 0.0})
        network = PredictionNetwork.for_grid(ring_grid, config.hidden, seed=1)
        before = _parameters(network)
        outcome = primal_dual_train(ring_grid, ring_factors, ring_data, config, network=network)
        assert outcome.network is network
        for p0, p1 in zip(before, _parameters(network)):
            assert torch.equal(p0, p1)

    def test_aborts_when_samples_diverge(self, ring_grid, ring_factors, ring_data, small_config):
        config = small_config.model_copy(update={"solver": SolverConfig(divergence_cap=1e-12)})
        with pytest.raises(TrainingAbortedError, match="9 of 9 samples diverged") as exc:
            primal_dual_train(ring_grid, ring_factors, ring_data, config)
        assert exc.value.epoch == 1

    def test_skips_a_few_diverged_samples(
        self, mocker, ring_grid, ring_factors, ring_data, small_config
    ):
        import opflayer.train as train_module

        real = train_module.complete_controls
        diverging = SolverConfig(divergence_cap=1e-12)
        calls = {"n": 0}

        def flaky(grid, factors, d, x, cfg, raw=None):
            calls["n"] += 1
            return real(grid, factors, d, x, diverging if calls["n"] == 1 else cfg, raw)

        mocker.patch.object(train_module, "complete_controls", side_effect=flaky)
        outcome = primal_dual_train(ring_grid, ring_factors, ring_data, small_config)
        assert outcome.history.epochs[0].skipped == 1
        assert outcome.history.epochs[0].diverged == 1
        assert outcome.history.total_skipped == 1

    def test_skips_samples_short_of_tolerance(
        self, ring_grid, ring_factors, ring_data, small_config
    ):
        loose = SolverConfig(guide_iterations=1, tolerance=1e-14)
        config = small_config.model_copy(update={"solver": loose})
        network = PredictionNetwork.for_grid(ring_grid, config.hidden, seed=1)
        before = _parameters(network)
        outcome = primal_dual_train(ring_grid, ring_factors, ring_data, config, network=network)
        for epoch in outcome.history.epochs:
            assert epoch.skipped == 9
            assert epoch.diverged == 0
            assert np.isnan(epoch.train_loss)
        for p0, p1 in zip(before, _parameters(network)):
            assert torch.equal(p0, p1)
        assert outcome.duals.lambda_norm == outcome.duals.nu_norm == 0.0

    def test_reports_clamped_samples_once_per_epoch(
        self, caplog, ring_grid, ring_factors, ring_data, small_config
    ):
        clamping = SolverConfig(guide_iterations=4, v_clamp=(1.05, 2.0))
        config = small_config.model_copy(
            update={"solver": clamping, "outer_iterations": 1, "inner_iterations": 1}
        )
        with caplog.at_level(logging.WARNING, logger="opflayer.train"):
            primal_dual_train(ring_grid, ring_factors, ring_data, config)
        warnings = [r.getMessage() for r in caplog.records if "clamped" in r.getMessage()]
        assert warnings == ["Epoch 1: load-bus voltage clamped in 9 samples"]

    def test_empty_training_split(self, ring_case, ring_grid, ring_factors, small_config):
        data = generate_dataset(ring_case, (0.9, 1.1), count=4, split_fraction=0.0, seed=0)
        with pytest.raises(ValueError, match="training split is empty"):
            primal_dual_train(ring_grid, ring_factors, data, small_config)


def test_pass_statistics_skip_diverged_and_unconverged(ring_grid, ring_factors, nominal_ring):
    from opflayer.model import complete_controls

    x, d = nominal_ring
    good = complete_controls(ring_grid, ring_factors, d, x, SolverConfig())
    bad = complete_controls(ring_grid, ring_factors, d, x, SolverConfig(divergence_cap=1e-12))
    short = complete_controls(
        ring_grid, ring_factors, d, x, SolverConfig(guide_iterations=1, tolerance=1e-14)
    )
    assert trainable(good)
    assert not trainable(bad)
    assert short.usable and not trainable(short)
    stats = PassStatistics(ring_grid)
    duals = DualState.zeros(ring_grid)
    for record in (good, bad, short, good):
        stats.add(record, duals)
    assert (stats.used, stats.skipped, stats.diverged) == (2, 2, 1)
    g_plus, abs_h = stats.means()
    np.testing.assert_allclose(abs_h, np.abs(good.h))
    assert stats.mean_loss == pytest.approx(good.f)


def test_refinement_ablation(mocker, ring_grid, ring_factors, ring_data, small_config):
    train = mocker.patch("opflayer.train.primal_dual_train", return_value="outcome")
    outcomes = refinement_ablation(
        ring_grid, ring_factors, ring_data, small_config, k_r_list=(1, 4), guide_iterations=3
    )
    assert outcomes == {1: "outcome", 4: "outcome"}
    solvers = [call.args[3].solver for call in train.call_args_list]
    assert [s.refinement_iterations for s in solvers] == [1, 4]
    assert all(s.refinement == RefinementKind.KSTEP_FDPF for s in solvers)
    assert all(s.guide_iterations == 3 for s in solvers)
    assert small_config.solver.refinement == RefinementKind.SINGLE_NR
