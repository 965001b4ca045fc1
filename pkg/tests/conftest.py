import os
from pathlib import Path

import numpy as np
import pytest

from opflayer.casefile import load_case, nominal_demand, parse_matpower
from opflayer.grid import build_fdpf_matrices, build_grid
from opflayer.pf import nominal_controls

DATA_DIR = Path(__file__).parent / "data"
CASE9_PATH = DATA_DIR / "case9.m"
CASE57_PATH = DATA_DIR / "case57.m"

# slack feeding one load through a single rated line
TWO_BUS = """
function mpc = toy2
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1.0	0	230	1	1.1	0.9;
	2	1	50	20	0	0	1	1.0	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	50	20	200	-200	1.0	100	1	200	0;
];
mpc.branch = [
	1	2	0.01	0.1	0.02	100	100	100	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	3	0.01	10	0;
];
"""

# slack feeding 50 MW + 10 MVAr through a lossless, uncharged x = 0.1 line
LOSSLESS_TWO_BUS = """
function mpc = lossless2
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1.0	0	230	1	1.1	0.9;
	2	1	50	10	0	0	1	1.0	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	50	10	200	-200	1.0	100	1	200	0;
];
mpc.branch = [
	1	2	0	0.1	0	0	0	0	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	3	0.01	10	0;
];
"""

# slack, one PV and one load bus on a lossy, shunt-free, unrated ring
THREE_BUS_RING = """
function mpc = ring3
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1.0	0	230	1	1.1	0.9;
	2	2	40	10	0	0	1	1.0	0	230	1	1.1	0.9;
	3	1	90	30	0	0	1	1.0	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	300	-300	1.02	100	1	300	0;
	2	60	0	300	-300	1.01	100	1	200	0;
];
mpc.branch = [
	1	2	0.02	0.08	0	0	0	0	0	0	1	-360	360;
	2	3	0.03	0.12	0	0	0	0	0	0	1	-360	360;
	1	3	0.025	0.10	0	0	0	0	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	3	0.02	20	0;
	2	0	0	3	0.03	25	0;
];
"""


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run slow acceptance tests"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def find_case(name: str):
    """Larger benchmark case from tests/data or $OPFLAYER_CASE_DIR, None when absent"""
    candidates = [DATA_DIR / f"{name}.m"]
    if os.environ.get("OPFLAYER_CASE_DIR"):
        candidates.append(Path(os.environ["OPFLAYER_CASE_DIR"]) / f"{name}.m")
    for path in candidates:
        if path.exists():
            return path
    return None


@pytest.fixture
def toy_case():
    return parse_matpower(TWO_BUS, name="toy2")


@pytest.fixture
def toy_grid(toy_case):
    return build_grid(toy_case)


@pytest.fixture
def lossless_case():
    return parse_matpower(LOSSLESS_TWO_BUS, name="lossless2")


@pytest.fixture
def lossless_grid(lossless_case):
    return build_grid(lossless_case)


@pytest.fixture
def lossless_factors(lossless_grid):
    return build_fdpf_matrices(lossless_grid)


@pytest.fixture
def nominal_lossless(lossless_case, lossless_grid):
    return nominal_controls(lossless_grid), nominal_demand(lossless_case)


@pytest.fixture
def ring_case():
    return parse_matpower(THREE_BUS_RING, name="ring3")


@pytest.fixture
def ring_grid(ring_case):
    return build_grid(ring_case)


@pytest.fixture
def ring_factors(ring_grid):
    return build_fdpf_matrices(ring_grid)


@pytest.fixture
def case9_path():
    return CASE9_PATH


@pytest.fixture
def case9():
    return load_case(CASE9_PATH)


@pytest.fixture
def grid9(case9):
    return build_grid(case9)


@pytest.fixture
def factors9(grid9):
    return build_fdpf_matrices(grid9)


@pytest.fixture
def nominal9(case9, grid9):
    """(x, d) at the case file's set points"""
    return nominal_controls(grid9), nominal_demand(case9)


@pytest.fixture
def nominal_ring(ring_case, ring_grid):
    return nominal_controls(ring_grid), nominal_demand(ring_case)


@pytest.fixture
def case57():
    return load_case(CASE57_PATH)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
