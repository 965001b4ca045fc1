"""
MATPOWER case-file parsing (the `mpc.*` matrix subset)
"""

import logging
import re
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..error import CaseParseError, CaseStructureError, UnsupportedTopologyError
from ..types import PathLike

log = logging.getLogger(__name__)

# bus columns
BUS_I, BUS_TYPE, PD, QD, GS, BS, BUS_AREA, VM, VA, BASE_KV, ZONE, VMAX, VMIN = range(13)
# generator columns
GEN_BUS, PG, QG, QMAX, QMIN, VG, MBASE, GEN_STATUS, PMAX, PMIN = range(10)
# branch columns
F_BUS, T_BUS, BR_R, BR_X, BR_B, RATE_A, RATE_B, RATE_C, TAP, SHIFT, BR_STATUS = range(11)
ANGMIN, ANGMAX = 11, 12
# gencost columns
MODEL, STARTUP, SHUTDOWN, NCOST, COST = range(5)

POLYNOMIAL = 2

REQUIRED = ("bus", "gen", "branch", "gencost")
MIN_COLUMNS = {"bus": 13, "gen": 10, "branch": 11, "gencost": 5}

_BASE_MVA = re.compile(r"^\s*mpc\.baseMVA\s*=\s*([^;]+);")
_MATRIX_START = re.compile(r"^\s*mpc\.(\w+)\s*=\s*\[(.*)$")


class RawCase(BaseModel):
    """Faithful image of a case file: every row kept, out-of-service ones included"""

    name: str = Field(default="case", description="Case name (file stem)")
    base_mva: float = Field(..., gt=0, description="System MVA base")
    bus: np.ndarray = Field(..., description="Bus matrix (MATPOWER columns)")
    gen: np.ndarray = Field(..., description="Generator matrix")
    branch: np.ndarray = Field(..., description="Branch matrix, angmin/angmax always present")
    gencost: np.ndarray = Field(..., description="(c2, c1, c0) per generator row")

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    @property
    def n_bus(self) -> int:
        return self.bus.shape[0]

    @property
    def n_gen(self) -> int:
        return self.gen.shape[0]

    @property
    def n_branch(self) -> int:
        return self.branch.shape[0]

    @property
    def gen_in_service(self) -> np.ndarray:
        return self.gen[:, GEN_STATUS] > 0

    @property
    def branch_in_service(self) -> np.ndarray:
        return self.branch[:, BR_STATUS] > 0

    @property
    def total_pd(self) -> float:
        """Total nominal active demand in MW"""
        return float(self.bus[:, PD].sum())

    def scaled(self, factor: float) -> "RawCase":
        """Same network with every MW/MVAr/MVA column and the base multiplied by `factor`"""
        bus, gen, branch = self.bus.copy(), self.gen.copy(), self.branch.copy()
        bus[:, [PD, QD, GS, BS]] *= factor
        gen[:, [PG, QG, QMAX, QMIN, PMAX, PMIN]] *= factor
        branch[:, [RATE_A, RATE_B, RATE_C]] *= factor
        cost = self.gencost.copy()
        cost[:, 0] /= factor**2
        cost[:, 1] /= factor
        return RawCase(
            name=self.name, base_mva=self.base_mva * factor, bus=bus, gen=gen, branch=branch,
            gencost=cost,
        )

    def __repr__(self):
        return (
            f"RawCase({self.name}: {self.n_bus} buses, {self.n_gen} generators, "
            f"{self.n_branch} branches, base={self.base_mva:g} MVA)"
        )


def _parse_row(chunk: str, lineno: int, matrix: str) -> Optional[List[float]]:
    tokens = chunk.replace(",", " ").split()
    if not tokens:
        return None
    try:
        return [float(t) for t in tokens]
    except ValueError as e:
        raise CaseParseError(
            f"Non-numeric value in mpc.{matrix} at line {lineno}: {chunk.strip()!r}", line=lineno
        ) from e


def _scan(text: str) -> Tuple[Optional[float], Dict[str, List[Tuple[int, List[float]]]]]:
    """Collect baseMVA and every `mpc.<name> = [ ... ];` block with row line numbers"""
    base_mva = None
    blocks: Dict[str, List[Tuple[int, List[float]]]] = {}
    current: Optional[str] = None
    start_line = 0

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("%", 1)[0]
        if current is None:
            m = _BASE_MVA.match(line)
            if m:
                try:
                    base_mva = float(m.group(1))
                except ValueError as e:
                    raise CaseParseError(f"Invalid baseMVA at line {lineno}", line=lineno) from e
                continue
            m = _MATRIX_START.match(line)
            if not m:
                continue
            current, start_line = m.group(1), lineno
            blocks[current] = []
            line = m.group(2)

        closed = "]" in line
        body = line.split("]", 1)[0] if current in REQUIRED else ""
        for chunk in body.split(";"):
            row = _parse_row(chunk, lineno, current)
            if row is not None:
                blocks[current].append((lineno, row))
        if closed:
            current = None

    if current is not None:
        raise CaseStructureError(
            f"Could not find end of {current} data section (opened at line {start_line}).",
            matrix=current,
        )
    return base_mva, blocks


def _to_matrix(name: str, rows: List[Tuple[int, List[float]]]) -> np.ndarray:
    if not rows:
        raise CaseStructureError(f"Matrix mpc.{name} is empty", matrix=name)
    width = len(rows[0][1])
    minimum = MIN_COLUMNS[name]
    for lineno, values in rows:
        if len(values) != width or len(values) < minimum:
            raise CaseParseError(
                f"Row of mpc.{name} at line {lineno} has {len(values)} columns, "
                f"expected {max(width, minimum)}",
                line=lineno,
            )
    return np.array([values for _, values in rows], dtype=np.float64)


def _polynomial_costs(gencost: np.ndarray, n_gen: int) -> np.ndarray:
    """Reduce model-2 rows to (c2, c1, c0); reactive-cost rows past n_gen are ignored"""
    if gencost.shape[0] < n_gen:
        raise CaseStructureError(
            f"mpc.gencost has {gencost.shape[0]} rows for {n_gen} generators", matrix="gencost"
        )
    coeffs = np.zeros((n_gen, 3))
    for i, row in enumerate(gencost[:n_gen]):
        if int(row[MODEL]) != POLYNOMIAL:
            raise UnsupportedTopologyError(
                f"Generator row {i + 1} uses cost model {int(row[MODEL])}; "
                "only polynomial costs (model 2) are supported"
            )
        ncost = int(row[NCOST])
        poly = row[COST : COST + ncost]
        if poly.size != ncost:
            raise CaseStructureError(
                f"mpc.gencost row {i + 1} declares {ncost} coefficients but has {poly.size}",
                matrix="gencost",
            )
        if ncost > 3 and np.any(poly[: ncost - 3] != 0):
            raise UnsupportedTopologyError(
                f"Generator row {i + 1} has a cost polynomial of degree {ncost - 1}; "
                "at most quadratic costs are supported"
            )
        tail = poly[-3:]
        coeffs[i, 3 - tail.size :] = tail
    return coeffs


def _check_invariants(case: RawCase) -> None:
    ids = case.bus[:, BUS_I]
    if np.unique(ids).size != ids.size:
        raise CaseStructureError("Duplicate bus ids in mpc.bus", matrix="bus")
    known = set(ids.astype(int).tolist())
    for k, (f, t) in enumerate(case.branch[:, [F_BUS, T_BUS]].astype(int)):
        if f not in known or t not in known:
            raise CaseStructureError(
                f"Branch {k + 1} references unknown bus ({f} -> {t})", matrix="branch"
            )
    for k, b in enumerate(case.gen[:, GEN_BUS].astype(int)):
        if b not in known:
            raise CaseStructureError(f"Generator {k + 1} at unknown bus {b}", matrix="gen")
    n_slack = int(np.sum(case.bus[:, BUS_TYPE] == 3))
    if n_slack != 1:
        raise CaseStructureError(f"Expected exactly one slack bus, found {n_slack}", matrix="bus")
    bad_v = np.flatnonzero(case.bus[:, VMIN] > case.bus[:, VMAX])
    if bad_v.size:
        raise CaseStructureError(
            f"Vmin > Vmax at bus {int(ids[bad_v[0]])}", matrix="bus"
        )
    bad_p = np.flatnonzero(case.gen[:, PMIN] > case.gen[:, PMAX])
    if bad_p.size:
        raise CaseStructureError(f"Pmin > Pmax for generator {bad_p[0] + 1}", matrix="gen")


def parse_matpower(text: str, name: str = "case") -> RawCase:
    """Parse MATPOWER M-file text into a RawCase

    Args:
        text: File contents
        name: Case name recorded on the result

    Returns:
        RawCase with all rows, including out-of-service ones

    Raises:
        CaseParseError: Malformed row (carries the line number)
        CaseStructureError: Missing matrix or broken case invariant
        UnsupportedTopologyError: Non-polynomial or above-quadratic generator costs
    """
    base_mva, blocks = _scan(text)
    if base_mva is None:
        raise CaseStructureError("Missing mpc.baseMVA", matrix="baseMVA")
    if base_mva <= 0:
        raise CaseStructureError(f"baseMVA must be positive, got {base_mva}", matrix="baseMVA")
    for matrix in REQUIRED:
        if matrix not in blocks:
            raise CaseStructureError(f"Missing required matrix mpc.{matrix}", matrix=matrix)

    bus = _to_matrix("bus", blocks["bus"])[:, :13]
    gen = _to_matrix("gen", blocks["gen"])[:, :10]
    branch = _to_matrix("branch", blocks["branch"])
    if branch.shape[1] < 13:
        # older files omit angle limits
        pad = np.tile([-360.0, 360.0], (branch.shape[0], 1))
        branch = np.hstack([branch[:, :11], pad])
    branch = branch[:, :13]
    gencost = _polynomial_costs(_to_matrix("gencost", blocks["gencost"]), gen.shape[0])

    case = RawCase(
        name=name, base_mva=base_mva, bus=bus, gen=gen, branch=branch, gencost=gencost
    )
    _check_invariants(case)
    log.debug(f"Parsed {case!r}")
    return case


def load_case(path: PathLike) -> RawCase:
    """Read and parse a case file from disk"""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    return parse_matpower(text, name=path.stem)
