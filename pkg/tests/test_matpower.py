import numpy as np
import pytest

from opflayer.casefile import load_case, parse_matpower
from opflayer.casefile.matpower import ANGMAX, ANGMIN, PD, RATE_A
from opflayer.error import CaseParseError, CaseStructureError, UnsupportedTopologyError

from .conftest import THREE_BUS_RING, TWO_BUS


def _line_of(text: str, fragment: str) -> int:
    for lineno, line in enumerate(text.splitlines(), start=1):
        if fragment in line:
            return lineno
    raise AssertionError(f"{fragment!r} not in text")


class TestParseCase9:
    def test_counts(self, case9):
        assert (case9.n_bus, case9.n_gen, case9.n_branch) == (9, 3, 9)
        assert case9.base_mva == 100.0
        assert case9.name == "case9"

    def test_extra_gen_columns_dropped(self, case9):
        assert case9.gen.shape == (3, 10)
        assert case9.branch.shape == (9, 13)

    def test_costs_reduced_to_quadratic_coefficients(self, case9):
        np.testing.assert_allclose(case9.gencost[0], [0.11, 5.0, 150.0])
        np.testing.assert_allclose(case9.gencost[2], [0.1225, 1.0, 335.0])

    def test_total_demand(self, case9):
        assert case9.total_pd == pytest.approx(315.0)

    def test_repr(self, case9):
        assert "9 buses, 3 generators, 9 branches" in repr(case9)


class TestParseVariants:
    def test_out_of_service_rows_kept(self):
        text = THREE_BUS_RING.replace(
            "1	3	0.025	0.10	0	0	0	0	0	0	1", "1	3	0.025	0.10	0	0	0	0	0	0	0"
        )
        case = parse_matpower(text)
        assert case.n_branch == 3
        assert case.branch_in_service.tolist() == [True, True, False]

    def test_missing_angle_limits_padded(self):
        text = TWO_BUS.replace(
            "1	2	0.01	0.1	0.02	100	100	100	0	0	1	-360	360;",
            "1	2	0.01	0.1	0.02	100	100	100	0	0	1;",
        )
        case = parse_matpower(text)
        assert case.branch[0, ANGMIN] == -360.0
        assert case.branch[0, ANGMAX] == 360.0

    def test_commas_and_trailing_comments(self):
        text = TWO_BUS.replace(
            "2	1	50	20	0	0	1	1.0	0	230	1	1.1	0.9;",
            "2, 1, 50, 20, 0, 0, 1, 1.0, 0, 230, 1, 1.1, 0.9; % load bus",
        )
        case = parse_matpower(text)
        assert case.bus[1, PD] == 50.0

    def test_linear_cost_padded(self):
        text = TWO_BUS.replace("2	0	0	3	0.01	10	0;", "2	0	0	2	10	5;")
        np.testing.assert_allclose(parse_matpower(text).gencost[0], [0.0, 10.0, 5.0])

    def test_cubic_with_zero_leading_term_accepted(self):
        text = TWO_BUS.replace("2	0	0	3	0.01	10	0;", "2	0	0	4	0	0.01	10	0;")
        np.testing.assert_allclose(parse_matpower(text).gencost[0], [0.01, 10.0, 0.0])

    def test_scaled_copy(self, toy_case):
        scaled = toy_case.scaled(2.0)
        assert scaled.base_mva == 200.0
        assert scaled.total_pd == pytest.approx(2 * toy_case.total_pd)
        assert scaled.branch[0, RATE_A] == 200.0
        assert toy_case.base_mva == 100.0

    def test_load_case_uses_stem(self, tmp_path):
        path = tmp_path / "mini.m"
        path.write_text(TWO_BUS)
        assert load_case(path).name == "mini"


class TestParseErrors:
    def test_non_numeric_value_reports_line(self):
        text = TWO_BUS.replace("2	1	50	20", "2	1	5O	20")
        with pytest.raises(CaseParseError, match="Non-numeric") as exc:
            parse_matpower(text)
        assert exc.value.line == _line_of(text, "5O")

    def test_ragged_rows(self):
        text = THREE_BUS_RING.replace("2	3	0.03	0.12	0	0	0	0	0	0	1	-360	360;",
                                      "2	3	0.03	0.12	0	0	0	0	0	0	1	-360;")
        with pytest.raises(CaseParseError, match="columns") as exc:
            parse_matpower(text)
        assert exc.value.line == _line_of(text, "2	3	0.03")

    def test_missing_matrix(self):
        text = TWO_BUS.split("mpc.gencost")[0]
        with pytest.raises(CaseStructureError, match="mpc.gencost") as exc:
            parse_matpower(text)
        assert exc.value.matrix == "gencost"

    def test_missing_base(self):
        with pytest.raises(CaseStructureError, match="baseMVA"):
            parse_matpower(TWO_BUS.replace("mpc.baseMVA = 100;", ""))

    def test_unterminated_matrix(self):
        text = TWO_BUS.replace("];\nmpc.gen", "\nmpc.gen", 1)
        with pytest.raises(CaseStructureError, match="Could not find end of bus"):
            parse_matpower(text.split("mpc.gen")[0])

    def test_two_slack_buses(self):
        text = THREE_BUS_RING.replace("2	2	40	10", "2	3	40	10")
        with pytest.raises(CaseStructureError, match="exactly one slack"):
            parse_matpower(text)

    def test_branch_to_unknown_bus(self):
        text = TWO_BUS.replace("1	2	0.01	0.1", "1	7	0.01	0.1")
        with pytest.raises(CaseStructureError, match="unknown bus"):
            parse_matpower(text)

    def test_duplicate_bus_ids(self):
        text = THREE_BUS_RING.replace("3	1	90	30", "2	1	90	30")
        with pytest.raises(CaseStructureError, match="Duplicate bus"):
            parse_matpower(text)

    def test_piecewise_cost_unsupported(self):
        text = TWO_BUS.replace("2	0	0	3	0.01	10	0;", "1	0	0	2	0	0	100	1000;")
        with pytest.raises(UnsupportedTopologyError, match="cost model 1"):
            parse_matpower(text)

    def test_true_cubic_unsupported(self):
        text = TWO_BUS.replace("2	0	0	3	0.01	10	0;", "2	0	0	4	0.5	0.01	10	0;")
        with pytest.raises(UnsupportedTopologyError, match="degree 3"):
            parse_matpower(text)

    def test_inverted_voltage_limits(self):
        text = TWO_BUS.replace("1.0	0	230	1	1.1	0.9;\n];\nmpc.gen",
                               "1.0	0	230	1	0.9	1.1;\n];\nmpc.gen")
        with pytest.raises(CaseStructureError, match="Vmin > Vmax"):
            parse_matpower(text)
