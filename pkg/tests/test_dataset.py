import numpy as np
import pytest
from pydantic import ValidationError

from opflayer.casefile import LoadDataset, generate_dataset, nominal_demand


class TestNominalDemand:
    def test_per_unit_p_then_q(self, case9):
        d = nominal_demand(case9)
        assert d.shape == (18,)
        assert d[4] == pytest.approx(0.9)
        assert d[9 + 4] == pytest.approx(0.3)
        assert d[:9].sum() == pytest.approx(3.15)


class TestGenerateDataset:
    def test_shape_and_split(self, case9):
        ds = generate_dataset(case9, (0.8, 1.2), 50, 0.8, seed=0)
        assert ds.samples.shape == (50, 18)
        assert ds.train_idx.size == 40
        assert ds.test_idx.size == 10
        joined = np.sort(np.concatenate([ds.train_idx, ds.test_idx]))
        np.testing.assert_array_equal(joined, np.arange(50))
        assert np.all(np.diff(ds.train_idx) > 0)

    def test_factors_within_range(self, case9):
        ds = generate_dataset(case9, (0.8, 1.2), 200, 0.8, seed=1)
        nominal = nominal_demand(case9)
        loaded = nominal != 0
        ratios = ds.samples[:, loaded] / nominal[loaded]
        assert ratios.min() >= 0.8
        assert ratios.max() <= 1.2
        np.testing.assert_array_equal(ds.samples[:, ~loaded], 0.0)

    def test_same_seed_same_data(self, case9):
        a = generate_dataset(case9, (0.8, 1.2), 20, 0.5, seed=3)
        b = generate_dataset(case9, (0.8, 1.2), 20, 0.5, seed=3)
        np.testing.assert_array_equal(a.samples, b.samples)
        np.testing.assert_array_equal(a.train_idx, b.train_idx)

    def test_different_seed_different_data(self, case9):
        a = generate_dataset(case9, (0.8, 1.2), 20, 0.5, seed=3)
        b = generate_dataset(case9, (0.8, 1.2), 20, 0.5, seed=4)
        assert not np.array_equal(a.samples, b.samples)

    def test_degenerate_range_is_nominal(self, case9):
        ds = generate_dataset(case9, (1.0, 1.0), 3, 1.0, seed=0)
        np.testing.assert_allclose(ds.samples, np.tile(nominal_demand(case9), (3, 1)))
        assert ds.test_idx.size == 0

    @pytest.mark.parametrize(
        "kwargs, match",
        [
            ({"range": (1.2, 0.8)}, "0 < low <= high"),
            ({"range": (0.0, 1.2)}, "0 < low <= high"),
            ({"count": 0}, "count"),
            ({"split_fraction": 1.5}, "split_fraction"),
        ],
    )
    def test_invalid_arguments(self, case9, kwargs, match):
        args = {"range": (0.8, 1.2), "count": 10, "split_fraction": 0.8, "seed": 0, **kwargs}
        with pytest.raises(ValueError, match=match):
            generate_dataset(case9, **args)


class TestLoadDataset:
    def test_save_and_load(self, case9, tmp_path):
        ds = generate_dataset(case9, (0.9, 1.1), 12, 0.75, seed=5)
        path = ds.save(tmp_path / "sub" / "dataset.npz")
        loaded = LoadDataset.load(path)
        np.testing.assert_array_equal(loaded.samples, ds.samples)
        np.testing.assert_array_equal(loaded.test_idx, ds.test_idx)
        assert loaded.seed == 5
        assert loaded.perturbation_range == (0.9, 1.1)

    def test_split_accessor(self, case9):
        ds = generate_dataset(case9, (0.8, 1.2), 10, 0.6, seed=0)
        idx, rows = ds.split("test")
        np.testing.assert_array_equal(rows, ds.samples[idx])
        with pytest.raises(ValueError, match="Unknown split"):
            ds.split("validation")

    def test_overlapping_split_rejected(self):
        with pytest.raises(ValidationError, match="disjoint"):
            LoadDataset(
                samples=np.ones((3, 4)),
                nominal=np.ones(4),
                seed=0,
                perturbation_range=(1.0, 1.0),
                train_idx=np.array([0, 1]),
                test_idx=np.array([1]),
            )
