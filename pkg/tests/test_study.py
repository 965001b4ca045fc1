import numpy as np
import pytest

from opflayer.casefile import generate_dataset, load_case
from opflayer.config import RunConfig
from opflayer.error import ConfigError
from opflayer.model import PredictionNetwork, save_checkpoint
from opflayer.study import OpfStudy


@pytest.fixture(autouse=True)
def _isolated(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setattr("opflayer.config.CONFIG_PATHS", [tmp_path / "opflayer.yaml"])
    monkeypatch.delenv("OPFLAYER_OUTPUT_DIR", raising=False)
    monkeypatch.delenv("OPFLAYER_WORKERS", raising=False)


@pytest.fixture
def small_config(case9_path):
    return RunConfig(case=str(case9_path), dataset={"count": 6, "split_fraction": 0.5})


class TestSetup:
    def test_explicit_case_wins(self, case9_path):
        study = OpfStudy(case9_path, workers=2, output_dir="artifacts")
        assert study.grid.n_bus == 9
        assert study.workers == 2
        assert study.output_dir.name == "artifacts"
        assert repr(study) == (
            "OpfStudy(case9: 9 buses, 3 generators, 9 branches, n=14, m=5, workers=2)"
        )

    def test_case_from_config(self, small_config):
        study = OpfStudy(config=small_config)
        assert study.case_path.name == "case9.m"
        assert str(study.output_dir) == "runs"

    def test_case_required(self):
        with pytest.raises(ConfigError, match="case is required") as exc:
            OpfStudy()
        assert exc.value.key == "case"

    def test_context_manager_drops_cache(self, small_config):
        with OpfStudy(config=small_config) as study:
            assert len(study.dataset) == 6
        assert study._dataset is None


class TestData:
    def test_generated_dataset_is_cached(self, small_config):
        study = OpfStudy(config=small_config)
        assert study.dataset is study.dataset
        assert study.dataset.samples.shape == (6, 18)

    def test_dataset_file(self, small_config, case9_path, tmp_path):
        data = generate_dataset(load_case(case9_path), (0.9, 1.1), 4, 0.5, seed=3)
        data.save(tmp_path / "d.npz")
        config = small_config.model_copy(update={"dataset_path": str(tmp_path / "d.npz")})
        np.testing.assert_array_equal(OpfStudy(config=config).dataset.samples, data.samples)

    def test_dataset_for_another_case(self, small_config, ring_case, tmp_path):
        generate_dataset(ring_case, (0.9, 1.1), 4, 0.5, seed=3).save(tmp_path / "d.npz")
        config = small_config.model_copy(update={"dataset_path": str(tmp_path / "d.npz")})
        with pytest.raises(ConfigError, match="6 features, case needs 18"):
            OpfStudy(config=config).dataset

    def test_estimation_samples_fall_back_to_train(self, case9_path):
        config = RunConfig(case=str(case9_path), dataset={"count": 4, "split_fraction": 1.0})
        assert OpfStudy(config=config).estimation_samples().shape == (4, 18)


class TestSolve:
    @pytest.mark.parametrize("solver", ["hybrid", "nr", "fdpf"])
    def test_nominal_point(self, case9_path, solver):
        result = OpfStudy(case9_path).solve(solver)
        assert result.converged

    def test_tolerance_override(self, case9_path):
        result = OpfStudy(case9_path).solve("hybrid", tolerance=1e-9)
        assert result.tolerance == 1e-9

    def test_unknown_solver(self, case9_path):
        with pytest.raises(ValueError, match="Unknown solver"):
            OpfStudy(case9_path).solve("gauss-seidel")

    def test_sensitivities(self, case9_path):
        report = OpfStudy(case9_path).sensitivities(K_R=4)
        assert report.kstep.shape == (14, 5)
        assert report.cosine_to_exact > 0.9


class TestNetworks:
    def test_checkpoint_required(self, case9_path):
        with pytest.raises(ConfigError, match="checkpoint is required"):
            OpfStudy(case9_path).load_network()

    def test_checkpoint_from_config(self, small_config, tmp_path):
        study = OpfStudy(config=small_config)
        save_checkpoint(PredictionNetwork.for_grid(study.grid, [4]), study.grid, tmp_path / "m.pt")
        config = small_config.model_copy(update={"checkpoint": str(tmp_path / "m.pt")})
        assert OpfStudy(config=config).load_network().widths == [18, 4, 5]

    def test_grad_check_builds_a_network(self, case9_path, mocker):
        check = mocker.patch("opflayer.study.gradient_check", return_value={})
        OpfStudy(case9_path).grad_check(K_R=2)
        kwargs = check.call_args.kwargs
        assert isinstance(kwargs["network"], PredictionNetwork)
        assert kwargs["K_R"] == 2
        assert kwargs["guide_iterations"] == 8
