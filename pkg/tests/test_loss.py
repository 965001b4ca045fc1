import numpy as np
import pytest
from pydantic import ValidationError

from opflayer import train
from opflayer.casefile import parse_matpower
from opflayer.diffgrad import finite_diff_jacobian
from opflayer.grid import build_grid
from opflayer.loss import (
    DualState,
    dual_update,
    equality_jacobian,
    equality_values,
    inequality_jacobian,
    inequality_values,
    lagrangian_gradient_y,
    lagrangian_value,
    objective_cost,
    objective_gradient,
)
from opflayer.pf import assemble_y, post_complete, solve_newton

from .conftest import THREE_BUS_RING


def _relative(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def _random_y(grid, rng):
    nb, ng = grid.n_bus, grid.n_gen
    return np.concatenate(
        [
            1.0 + 0.05 * rng.standard_normal(nb),
            0.1 * rng.standard_normal(nb),
            1.0 + 0.3 * rng.standard_normal(ng),
            0.2 * rng.standard_normal(ng),
        ]
    )


@pytest.fixture
def solved_y9(grid9, nominal9):
    x, d = nominal9
    z = solve_newton(grid9, x, d, tol=1e-11).z_star
    return assemble_y(grid9, x, z, post_complete(grid9, x, z, d)), d


@pytest.fixture
def angle_limited_ring():
    text = THREE_BUS_RING.replace("-360\t360", "-30\t30", 1)
    return build_grid(parse_matpower(text, name="ring3-angles"))


class TestObjective:
    def test_quadratic_cost_in_megawatts(self, grid9):
        y = np.zeros(2 * grid9.n_bus + 2 * grid9.n_gen)
        y[2 * grid9.n_bus : 2 * grid9.n_bus + 3] = [0.9, 1.3, 0.8]
        expected = (0.11 * 90**2 + 5 * 90 + 150) + (0.085 * 130**2 + 1.2 * 130 + 600)
        expected += 0.1225 * 80**2 + 80 + 335
        assert objective_cost(grid9, y) == pytest.approx(expected)

    def test_gradient(self, grid9, rng):
        y = _random_y(grid9, rng)
        numeric = finite_diff_jacobian(lambda v: np.array([objective_cost(grid9, v)]), y)[0]
        np.testing.assert_allclose(objective_gradient(grid9, y), numeric, rtol=1e-6, atol=1e-6)

    def test_rejects_wrong_length(self, grid9):
        with pytest.raises(ValueError, match="y must have shape"):
            objective_cost(grid9, np.zeros(3))


class TestInequalities:
    def test_row_count(self, grid9, rng):
        assert inequality_values(grid9, _random_y(grid9, rng)).shape == (48,)

    def test_signs_at_solution(self, grid9, solved_y9):
        y, _ = solved_y9
        g = inequality_values(grid9, y)
        # bounds rows of the nominal operating point are all satisfied
        assert np.all(g[: 4 * grid9.n_gen + 2 * grid9.n_bus] <= 0)

    def test_jacobian(self, grid9, rng):
        y = _random_y(grid9, rng)
        numeric = finite_diff_jacobian(lambda v: inequality_values(grid9, v), y)
        assert _relative(inequality_jacobian(grid9, y), numeric) < 1e-7

    def test_angle_difference_rows(self, angle_limited_ring, rng):
        grid = angle_limited_ring
        assert grid.n_ineq == 4 * 2 + 2 * 3 + 2
        y = _random_y(grid, rng)
        y[grid.n_bus : 2 * grid.n_bus] = [0.0, np.deg2rad(-40.0), np.deg2rad(-10.0)]
        g = inequality_values(grid, y)
        assert g[-2] == pytest.approx(np.deg2rad(-30.0) - np.deg2rad(40.0))
        assert g[-1] == pytest.approx(np.deg2rad(40.0) - np.deg2rad(30.0))
        numeric = finite_diff_jacobian(lambda v: inequality_values(grid, v), y)
        np.testing.assert_allclose(inequality_jacobian(grid, y)[-2:], numeric[-2:], atol=1e-8)

    def test_unrated_branches_have_no_flow_rows(self, ring_grid):
        assert ring_grid.n_ineq == 4 * 2 + 2 * 3


class TestEqualities:
    def test_balanced_at_solution(self, grid9, solved_y9):
        y, d = solved_y9
        h = equality_values(grid9, y, d)
        assert h.shape == (18,)
        assert np.max(np.abs(h)) < 1e-9

    def test_jacobian(self, grid9, nominal9, rng):
        _, d = nominal9
        y = _random_y(grid9, rng)
        numeric = finite_diff_jacobian(lambda v: equality_values(grid9, v, d), y)
        assert _relative(equality_jacobian(grid9, y), numeric) < 1e-7


class TestDualState:
    def test_zeros(self, grid9):
        duals = DualState.zeros(grid9)
        assert duals.lam.shape == (48,)
        assert duals.nu.shape == (18,)
        assert duals.lambda_norm == duals.nu_norm == 0.0

    def test_rejects_negative_multipliers(self):
        with pytest.raises(ValidationError, match="nonnegative"):
            DualState(lam=np.array([-1.0]), nu=np.zeros(1))

    def test_rejects_negative_step(self):
        with pytest.raises(ValidationError):
            DualState(lam=np.zeros(1), nu=np.zeros(1), lr_nu=-0.5)

    def test_save_and_load(self, tmp_path):
        duals = DualState(lam=np.array([0.5, 0.0]), nu=np.array([2.0]), lr_lambda=0.2, lr_nu=0.7)
        loaded = DualState.load(duals.save(tmp_path / "out" / "duals.npz"))
        np.testing.assert_array_equal(loaded.lam, duals.lam)
        np.testing.assert_array_equal(loaded.nu, duals.nu)
        assert (loaded.lr_lambda, loaded.lr_nu) == (0.2, 0.7)


class TestLagrangian:
    def test_value(self):
        duals = DualState(lam=np.array([2.0, 3.0]), nu=np.array([1.0, 4.0]))
        value = lagrangian_value(2.0, np.array([1.0, -1.0]), np.array([-0.5, 0.5]), duals)
        assert value == pytest.approx(2.0 + 2.0 + 0.5 + 2.0)

    def test_gradient_away_from_kinks(self, grid9, nominal9, rng):
        _, d = nominal9
        y = _random_y(grid9, rng)
        duals = DualState(lam=rng.uniform(0.1, 1.0, grid9.n_ineq), nu=rng.uniform(0.1, 1.0, 18))

        def value(v):
            f = objective_cost(grid9, v)
            g = inequality_values(grid9, v)
            h = equality_values(grid9, v, d)
            return np.array([lagrangian_value(f, g, h, duals)])

        numeric = finite_diff_jacobian(value, y)[0]
        assert _relative(lagrangian_gradient_y(grid9, y, d, duals), numeric) < 1e-6

    def test_zero_multipliers_leave_objective(self, grid9, nominal9, rng):
        _, d = nominal9
        y = _random_y(grid9, rng)
        np.testing.assert_array_equal(
            lagrangian_gradient_y(grid9, y, d, DualState.zeros(grid9)), objective_gradient(grid9, y)
        )


class TestDualUpdate:
    def test_ascent_step(self):
        duals = DualState(lam=np.array([1.0, 0.0]), nu=np.array([0.0]), lr_lambda=0.1, lr_nu=0.5)
        updated = dual_update(duals, np.array([0.5, 2.0]), np.array([0.4]))
        np.testing.assert_allclose(updated.lam, [1.05, 0.2])
        np.testing.assert_allclose(updated.nu, [0.2])
        np.testing.assert_array_equal(duals.lam, [1.0, 0.0])
        assert updated.lr_lambda == 0.1

    def test_shape_mismatch(self, grid9):
        with pytest.raises(ValueError, match="do not match"):
            dual_update(DualState.zeros(grid9), np.zeros(3), np.zeros(18))


def test_training_uses_the_same_functions():
    assert train.DualState is DualState
    assert train.dual_update is dual_update
    assert train.lagrangian_value is lagrangian_value
