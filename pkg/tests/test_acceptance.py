"""
Benchmark-scale checks on the bundled case57 (run with --runslow)
"""

import re

import numpy as np
import pytest

from opflayer.casefile import generate_dataset, load_case, nominal_demand
from opflayer.config import RunConfig, SolverConfig, load_run_config
from opflayer.diffgrad import (
    FdpfOperator,
    exact_implicit_jacobian_h,
    kstep_jacobian,
    sensitivity_report,
)
from opflayer.enums import RefinementKind
from opflayer.evaluation import estimate_contraction, evaluate
from opflayer.grid import build_fdpf_matrices, build_grid
from opflayer.pf import (
    fdpf_step,
    flat_start,
    hybrid_solve,
    mismatch_norm,
    nominal_controls,
    nr_step,
    solve_newton,
)
from opflayer.train import primal_dual_train

from .conftest import CASE57_PATH, find_case

pytestmark = pytest.mark.slow

KSTEP = RefinementKind.KSTEP_FDPF


@pytest.fixture
def grid57(case57):
    return build_grid(case57)


@pytest.fixture
def factors57(grid57):
    return build_fdpf_matrices(grid57)


@pytest.fixture
def nominal57(case57, grid57):
    return nominal_controls(grid57), nominal_demand(case57)


@pytest.fixture
def solved57(grid57, nominal57):
    x, d = nominal57
    return solve_newton(grid57, x, d, tol=1e-11).z_star


def _guide(grid, factors, x, d, steps):
    z = flat_start(grid)
    for _ in range(steps):
        z = fdpf_step(grid, factors, z, x, d)
    return z


class TestCase57Model:
    def test_counts(self, grid57, factors57):
        assert grid57.summary() == "57 buses, 7 generators, 80 branches, n=106, m=13"
        assert grid57.base_mva == 100
        assert grid57.n_ineq == 302
        assert grid57.n_eq == 114
        assert factors57.b_prime.shape == (56, 56)
        assert factors57.b_double_prime.shape == (50, 50)

    def test_total_demand_matches_raw_text(self, case57):
        text = CASE57_PATH.read_text()
        block = re.search(r"mpc\.bus\s*=\s*\[(.*?)\];", text, re.S).group(1)
        total = 0.0
        for line in block.splitlines():
            fields = line.split("%")[0].replace(";", " ").split()
            if fields:
                total += float(fields[2])
        assert case57.total_pd == pytest.approx(total)

    def test_dataset_split(self, case57):
        data = generate_dataset(case57, (0.8, 1.2), count=5000, split_fraction=0.8, seed=0)
        assert (data.train_idx.size, data.test_idx.size) == (4000, 1000)


class TestCase57Solvers:
    def test_fdpf_converges_linearly(self, grid57, factors57, nominal57):
        x, d = nominal57
        assert mismatch_norm(grid57, _guide(grid57, factors57, x, d, 20), x, d) < 1e-6

    def test_newton_from_warm_start(self, grid57, factors57, nominal57):
        x, d = nominal57
        z = nr_step(grid57, _guide(grid57, factors57, x, d, 10), x, d)
        assert mismatch_norm(grid57, z, x, d) < 1e-10

    @pytest.mark.parametrize(
        "cfg, limit",
        [
            (SolverConfig(guide_iterations=9, tolerance=1e-5), 10),
            (
                SolverConfig(
                    guide_iterations=8, refinement=KSTEP, refinement_iterations=4, tolerance=1e-5
                ),
                12,
            ),
        ],
    )
    def test_hybrid_layouts(self, grid57, factors57, nominal57, cfg, limit):
        x, d = nominal57
        result = hybrid_solve(grid57, factors57, x, d, cfg)
        assert result.converged
        assert result.iterations_used <= limit


class TestCase57Sensitivities:
    def test_alignment_rises_with_depth(self, grid57, factors57, nominal57, solved57):
        x, d = nominal57
        z_entry = _guide(grid57, factors57, x, d, 8)
        reports = [
            sensitivity_report(grid57, factors57, solved57, z_entry, x, d, K_R)
            for K_R in (1, 2, 4, 8)
        ]
        cosines = [r.cosine_to_exact for r in reports]
        assert cosines == sorted(cosines)
        assert cosines[2] > 0.9
        assert reports[3].relative_error < reports[0].relative_error / 3

    def test_error_falls_with_guide_depth(self, grid57, factors57, nominal57, solved57):
        x, d = nominal57
        exact = exact_implicit_jacobian_h(grid57, solved57, x, d)
        errors = []
        for k in (2, 4, 8, 16):
            z_entry = _guide(grid57, factors57, x, d, k)
            kstep = kstep_jacobian(grid57, factors57, z_entry, x, d, 1, KSTEP)
            errors.append(np.linalg.norm(kstep - exact) / np.linalg.norm(exact))
        for before, after in zip(errors, errors[1:]):
            assert after <= 1.05 * before

    def test_contraction_composes(self, grid57, factors57, nominal57, solved57):
        x, d = nominal57
        op = FdpfOperator(grid57, factors57, x, d)
        states = [solved57, _guide(grid57, factors57, x, d, 12)]
        rho_1 = estimate_contraction(op, states, 1)
        assert rho_1 < 1.0
        assert estimate_contraction(op, states, 8) <= 10 * rho_1**8


def test_desk_scale_training(case57, grid57, factors57):
    config: RunConfig = load_run_config(
        preset="case57-nr",
        overrides={"dataset": {"count": 1000}, "train": {"outer_iterations": 4}},
    )
    data = generate_dataset(case57, (0.8, 1.2), 1000, 0.8, seed=0)
    outcome = primal_dual_train(grid57, factors57, data, config.train)
    assert len(outcome.history) == 100
    idx, demands = data.split("test")
    metrics = evaluate(outcome.network, grid57, factors57, demands, config.solver, indices=idx)
    assert metrics.eq_mean_mismatch < 1e-6
    assert metrics.ineq_viol_num < 1.0


@pytest.mark.parametrize("layout", ["nr", "kd"])
@pytest.mark.parametrize("name", ["case89", "case118", "case189"])
def test_larger_benchmarks_converge_within_budget(name, layout):
    path = find_case(name)
    if path is None:
        pytest.skip(f"{name}.m not found; set $OPFLAYER_CASE_DIR")
    case = load_case(path)
    grid = build_grid(case)
    solver = load_run_config(preset=f"{name}-{layout}").solver
    result = hybrid_solve(
        grid, build_fdpf_matrices(grid), nominal_controls(grid), nominal_demand(case), solver
    )
    assert result.converged
    assert result.iterations_used <= solver.total_iterations
