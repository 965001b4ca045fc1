import math

import numpy as np
import pandas as pd
import pytest

from opflayer.casefile import (
    load_reference_solutions,
    read_metrics_csv,
    write_alignment_csv,
    write_history_csv,
    write_metrics_csv,
)
from opflayer.error import ReferenceDataError
from opflayer.result import (
    ALIGNMENT_COLUMNS,
    METRICS_COLUMNS,
    AlignmentRow,
    MetricsRecord,
    TheoremConstants,
    TrainHistory,
)


def _metrics(epoch=None, cost=123.456789):
    return MetricsRecord(
        epoch=epoch,
        eq_mean_mismatch=1.25e-7,
        eq_max_mismatch=3.5e-6,
        eq_viol_num=0.0,
        ineq_mean_mismatch=2.0e-5,
        ineq_max_mismatch=1.0e-3,
        ineq_viol_num=0.4,
        objective_cost=cost,
    )


class TestReferenceSolutions:
    def test_costs_only(self, tmp_path):
        path = tmp_path / "refs.csv"
        path.write_text("index,cost\n0,100.5\n3,99.25\n")
        refs = load_reference_solutions(path)
        assert len(refs) == 2
        assert refs.cost(3) == 99.25
        assert 1 not in refs
        assert refs.missing([0, 1, 3, 4]) == [1, 4]

    def test_solution_columns(self, tmp_path):
        path = tmp_path / "refs.csv"
        path.write_text("index,cost,y0,y1\n0,10.0,1.0,0.5\n1,11.0,,\n")
        refs = load_reference_solutions(path)
        np.testing.assert_allclose(refs.solutions[0], [1.0, 0.5])
        assert 1 not in refs.solutions

    def test_header_only_is_empty(self, tmp_path):
        path = tmp_path / "refs.csv"
        path.write_text("index,cost\n")
        assert len(load_reference_solutions(path)) == 0

    def test_empty_file(self, tmp_path):
        path = tmp_path / "refs.csv"
        path.write_text("")
        with pytest.raises(ReferenceDataError, match="empty"):
            load_reference_solutions(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "refs.csv"
        path.write_text("sample,objective\n0,1.0\n")
        with pytest.raises(ReferenceDataError, match="index,cost"):
            load_reference_solutions(path)

    def test_duplicate_index(self, tmp_path):
        path = tmp_path / "refs.csv"
        path.write_text("index,cost\n2,1.0\n2,1.5\n")
        with pytest.raises(ReferenceDataError, match="Duplicate") as exc:
            load_reference_solutions(path)
        assert exc.value.indices == [2]

    def test_non_numeric_cost(self, tmp_path):
        path = tmp_path / "refs.csv"
        path.write_text("index,cost\n0,1.0\n1,abc\n")
        with pytest.raises(ReferenceDataError, match="Non-numeric cost") as exc:
            load_reference_solutions(path)
        assert exc.value.indices == [1]

    def test_fractional_index(self, tmp_path):
        path = tmp_path / "refs.csv"
        path.write_text("index,cost\n0.5,1.0\n")
        with pytest.raises(ReferenceDataError, match="Non-integer index"):
            load_reference_solutions(path)


class TestMetricsCsv:
    def test_header_and_notation(self, tmp_path):
        path = write_metrics_csv([_metrics(epoch=1)], tmp_path / "metrics.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(METRICS_COLUMNS)
        assert "e-07" in lines[1]

    def test_values_survive_reading(self, tmp_path):
        records = [_metrics(epoch=1, cost=1.0 / 3.0), _metrics(epoch=None)]
        path = write_metrics_csv(records, tmp_path / "metrics.csv")
        loaded = read_metrics_csv(path)
        assert loaded[0].epoch == 1
        assert loaded[0].objective_cost == 1.0 / 3.0
        assert loaded[1].epoch is None
        assert math.isnan(loaded[1].objective_gap_pct)

    def test_empty_record_list_writes_header(self, tmp_path):
        path = write_metrics_csv([], tmp_path / "metrics.csv")
        assert list(pd.read_csv(path).columns) == METRICS_COLUMNS


class TestOtherReports:
    def test_alignment_columns(self, tmp_path):
        constants = TheoremConstants(
            K_R=4, k=2, rho_k=0.1, L_T=1.0, L_J=2.0, L_x=0.5, L_z=0.5, C_z=1.0,
            sigma_J=1.0, C_g=10.0, sigma_A=1.0, d_0=0.1,
        )
        row = AlignmentRow(
            K_R=4, cosine_mean=0.99, cosine_std=0.01, relerr_mean=0.1, relerr_std=0.02,
            constants=constants,
        )
        path = write_alignment_csv([row], tmp_path / "alignment.csv")
        frame = pd.read_csv(path)
        assert list(frame.columns) == ALIGNMENT_COLUMNS
        assert frame.loc[0, "C_1"] == pytest.approx(constants.C_1)

    def test_history_header_without_epochs(self, tmp_path):
        path = write_history_csv(TrainHistory(), tmp_path / "history.csv")
        assert path.read_text().splitlines()[0].startswith("epoch,train_loss,test_loss")
