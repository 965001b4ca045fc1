"""
Per-unit network model, variable partition and fast-decoupled factorizations
"""

import hashlib
import logging
from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import lu_factor, lu_solve

from .casefile.matpower import (
    ANGMAX,
    ANGMIN,
    BR_B,
    BR_R,
    BR_X,
    BS,
    BUS_I,
    BUS_TYPE,
    F_BUS,
    GEN_BUS,
    GS,
    PG,
    PMAX,
    PMIN,
    QMAX,
    QMIN,
    RATE_A,
    SHIFT,
    T_BUS,
    TAP,
    VA,
    VG,
    VMAX,
    VMIN,
    RawCase,
)
from .enums import BusRole, FdpfVariant, Quantity
from .error import ConnectivityError, FactorizationError, UnsupportedTopologyError
from .types import ComplexMatrix

log = logging.getLogger(__name__)

_ARRAYS = ConfigDict(arbitrary_types_allowed=True, frozen=True)


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


class Partition(BaseModel):
    """Bus classification R / G / D and the positions of every variable in x, z and z̃

    x = (P^g at G, V at G∪R), z = (θ at G∪D, V at D), z̃ = (P^g at R, Q^g at R∪G).
    Each bus set is stored sorted by bus index.
    """

    n_bus: int
    slack: np.ndarray = Field(..., description="R")
    gen: np.ndarray = Field(..., description="G (generator buses without the slack)")
    load: np.ndarray = Field(..., description="D")
    nonslack: np.ndarray = Field(..., description="G∪D, the θ unknowns")
    controlled: np.ndarray = Field(..., description="G∪R, the predicted voltages")

    model_config = _ARRAYS

    @classmethod
    def from_roles(cls, roles: np.ndarray) -> "Partition":
        slack = np.flatnonzero(roles == 0)
        gen = np.flatnonzero(roles == 1)
        load = np.flatnonzero(roles == 2)
        return cls(
            n_bus=roles.size,
            slack=_frozen(slack),
            gen=_frozen(gen),
            load=_frozen(load),
            nonslack=_frozen(np.flatnonzero(roles != 0)),
            controlled=_frozen(np.flatnonzero(roles != 2)),
        )

    @property
    def n(self) -> int:
        """Completion dimension |G| + 2|D|"""
        return self.gen.size + 2 * self.load.size

    @property
    def m(self) -> int:
        """Prediction dimension 2|G| + |R|"""
        return 2 * self.gen.size + self.slack.size

    @property
    def n_tilde(self) -> int:
        """Post-completion dimension 2|R| + |G|"""
        return 2 * self.slack.size + self.gen.size

    @property
    def n_theta(self) -> int:
        return self.nonslack.size

    # slices into x, z and z̃
    @property
    def x_pg(self) -> slice:
        return slice(0, self.gen.size)

    @property
    def x_vm(self) -> slice:
        return slice(self.gen.size, self.m)

    @property
    def z_va(self) -> slice:
        return slice(0, self.n_theta)

    @property
    def z_vm(self) -> slice:
        return slice(self.n_theta, self.n)

    @property
    def zt_pg(self) -> slice:
        return slice(0, self.slack.size)

    @property
    def zt_qg(self) -> slice:
        return slice(self.slack.size, self.n_tilde)

    # positions of sub-sets inside the ordered sets
    @property
    def load_in_nonslack(self) -> np.ndarray:
        return np.searchsorted(self.nonslack, self.load)

    @property
    def gen_in_nonslack(self) -> np.ndarray:
        return np.searchsorted(self.nonslack, self.gen)

    @property
    def gen_in_controlled(self) -> np.ndarray:
        return np.searchsorted(self.controlled, self.gen)

    @property
    def slack_in_controlled(self) -> np.ndarray:
        return np.searchsorted(self.controlled, self.slack)

    def role(self, bus: int) -> BusRole:
        if bus in self.slack:
            return BusRole.SLACK
        if bus in self.gen:
            return BusRole.GENERATOR
        return BusRole.LOAD

    def x_index(self) -> Dict[Tuple[int, Quantity], int]:
        index = {(int(b), Quantity.PG): i for i, b in enumerate(self.gen)}
        offset = self.gen.size
        index.update({(int(b), Quantity.VM): offset + i for i, b in enumerate(self.controlled)})
        return index

    def z_index(self) -> Dict[Tuple[int, Quantity], int]:
        index = {(int(b), Quantity.VA): i for i, b in enumerate(self.nonslack)}
        offset = self.n_theta
        index.update({(int(b), Quantity.VM): offset + i for i, b in enumerate(self.load)})
        return index

    def z_tilde_index(self) -> Dict[Tuple[int, Quantity], int]:
        index = {(int(b), Quantity.PG): i for i, b in enumerate(self.slack)}
        offset = self.slack.size
        index.update({(int(b), Quantity.QG): offset + i for i, b in enumerate(self.controlled)})
        return index

    def fingerprint(self) -> str:
        """Stable hash identifying the partition (guards checkpoints)"""
        digest = hashlib.sha256()
        digest.update(np.int64(self.n_bus).tobytes())
        for part in (self.slack, self.gen, self.load):
            digest.update(np.asarray(part, dtype=np.int64).tobytes())
            digest.update(b"|")
        return digest.hexdigest()[:16]

    def __repr__(self):
        return (
            f"Partition(|R|={self.slack.size}, |G|={self.gen.size}, |D|={self.load.size}, "
            f"n={self.n}, m={self.m})"
        )


class BranchData(BaseModel):
    """In-service branches with their two-port admittance model"""

    f_bus: np.ndarray
    t_bus: np.ndarray
    r: np.ndarray
    x: np.ndarray
    b: np.ndarray
    ratio: np.ndarray = Field(..., description="Off-nominal tap ratio (1 when unset)")
    shift: np.ndarray = Field(..., description="Phase shift in radians")
    yff: np.ndarray
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray
    rate: np.ndarray = Field(..., description="S̄ in p.u., 0 means unlimited")
    ang_min: np.ndarray = Field(..., description="Radians, -inf when unbounded")
    ang_max: np.ndarray = Field(..., description="Radians, +inf when unbounded")

    model_config = _ARRAYS

    @property
    def size(self) -> int:
        return self.f_bus.size

    @property
    def rated(self) -> np.ndarray:
        return np.flatnonzero(self.rate > 0)

    def incidence(self, n_bus: int) -> Tuple[np.ndarray, np.ndarray]:
        """Dense from/to connection matrices Cf, Ct (n_branch × n_bus)"""
        rows = np.arange(self.size)
        cf = np.zeros((self.size, n_bus))
        ct = np.zeros((self.size, n_bus))
        cf[rows, self.f_bus] = 1.0
        ct[rows, self.t_bus] = 1.0
        return cf, ct


def branch_vectors(r, x, b, ratio, shift):
    """Two-port admittances (Yff, Yft, Ytf, Ytt) of π-model branches with complex taps"""
    ys = 1.0 / (r + 1j * x)
    ytt = ys + 1j * b / 2.0
    tap = ratio * np.exp(1j * shift)
    yff = ytt / (tap * np.conj(tap))
    yft = -ys / np.conj(tap)
    ytf = -ys / tap
    return yff, yft, ytf, ytt


def assemble_ybus(n_bus, f_bus, t_bus, yff, yft, ytf, ytt, ysh) -> ComplexMatrix:
    """Dense nodal admittance matrix from branch two-ports and bus shunts"""
    ybus = np.zeros((n_bus, n_bus), dtype=np.complex128)
    np.add.at(ybus, (f_bus, f_bus), yff)
    np.add.at(ybus, (f_bus, t_bus), yft)
    np.add.at(ybus, (t_bus, f_bus), ytf)
    np.add.at(ybus, (t_bus, t_bus), ytt)
    ybus[np.diag_indices(n_bus)] += ysh
    return ybus


class GridModel(BaseModel):
    """Immutable per-unit network: admittances, partition, bounds and costs"""

    name: str = "case"
    n_bus: int
    base_mva: float
    bus_ids: np.ndarray = Field(..., description="Original bus numbers, by bus index")
    ybus: np.ndarray = Field(..., description="Dense complex admittance matrix (p.u.)")
    ysh: np.ndarray = Field(..., description="Bus shunt admittance (p.u.)")
    partition: Partition
    v_bounds: np.ndarray = Field(..., description="(n_bus, 2) voltage box")
    gen_bus: np.ndarray = Field(..., description="Bus index of each in-service generator")
    pg_bounds: np.ndarray = Field(..., description="(n_gen, 2) p.u.")
    qg_bounds: np.ndarray = Field(..., description="(n_gen, 2) p.u.")
    cost_coeffs: np.ndarray = Field(..., description="(n_gen, 3) as (c2, c1, c0) per MW")
    pg0: np.ndarray = Field(..., description="Generator P set points from the file (p.u.)")
    vg: np.ndarray = Field(..., description="Generator voltage set points (p.u.)")
    branches: BranchData
    slack_angle: float = Field(..., description="Slack-bus angle in radians")

    model_config = _ARRAYS

    @property
    def n_gen(self) -> int:
        return self.gen_bus.size

    @property
    def gen_of_bus(self) -> np.ndarray:
        """Generator index per bus, -1 where there is none"""
        out = -np.ones(self.n_bus, dtype=np.int64)
        out[self.gen_bus] = np.arange(self.n_gen)
        return out

    @property
    def x_bounds(self) -> np.ndarray:
        """(m, 2) box of the prediction vector"""
        p = self.partition
        gen_of_bus = self.gen_of_bus
        return np.vstack([self.pg_bounds[gen_of_bus[p.gen]], self.v_bounds[p.controlled]])

    @property
    def n_ineq(self) -> int:
        br = self.branches
        n_angle = int(np.isfinite(br.ang_min).sum() + np.isfinite(br.ang_max).sum())
        return 4 * self.n_gen + 2 * self.n_bus + 2 * br.rated.size + n_angle

    @property
    def n_eq(self) -> int:
        return 2 * self.n_bus

    def summary(self) -> str:
        p = self.partition
        return (
            f"{self.n_bus} buses, {self.n_gen} generators, {self.branches.size} branches, "
            f"n={p.n}, m={p.m}"
        )

    def __repr__(self):
        return f"GridModel({self.name}: {self.summary()})"


class FdpfFactors(BaseModel):
    """Constant B′ (non-slack) and B″ (load buses) with their one-time LU factors"""

    variant: FdpfVariant = FdpfVariant.XB
    b_prime: np.ndarray
    b_double_prime: np.ndarray
    lu_prime: Tuple[np.ndarray, np.ndarray]
    lu_double_prime: Optional[Tuple[np.ndarray, np.ndarray]] = None

    model_config = _ARRAYS

    def solve_prime(self, rhs: np.ndarray, transpose: bool = False) -> np.ndarray:
        """B′⁻¹ rhs (or B′⁻ᵀ rhs)"""
        return lu_solve(self.lu_prime, rhs, trans=1 if transpose else 0)

    def solve_double_prime(self, rhs: np.ndarray, transpose: bool = False) -> np.ndarray:
        """B″⁻¹ rhs (or B″⁻ᵀ rhs)"""
        if self.lu_double_prime is None:
            return np.zeros_like(rhs)
        return lu_solve(self.lu_double_prime, rhs, trans=1 if transpose else 0)


def build_grid(case: RawCase) -> GridModel:
    """Convert a parsed case to the per-unit model

    Args:
        case: Parsed case file

    Returns:
        GridModel with in-service generators and branches only

    Raises:
        UnsupportedTopologyError: Several in-service generators on one bus, or a generator
            on a bus that is neither PV nor slack, or a slack bus without a generator
        ConnectivityError: A bus without any in-service branch
    """
    base = case.base_mva
    n_bus = case.n_bus
    bus_ids = case.bus[:, BUS_I].astype(np.int64)
    id_to_idx = {int(b): i for i, b in enumerate(bus_ids)}
    bus_type = case.bus[:, BUS_TYPE].astype(int)

    gen = case.gen[case.gen_in_service]
    cost = case.gencost[case.gen_in_service]
    gen_bus = np.array([id_to_idx[int(b)] for b in gen[:, GEN_BUS]], dtype=np.int64)

    counts = np.bincount(gen_bus, minlength=n_bus)
    crowded = np.flatnonzero(counts > 1)
    if crowded.size:
        bus = int(bus_ids[crowded[0]])
        raise UnsupportedTopologyError(
            f"Bus {bus} has {counts[crowded[0]]} in-service generators; one per bus is supported",
            bus=bus,
        )

    # roles: 0 slack, 1 generator, 2 load
    roles = np.full(n_bus, 2, dtype=np.int64)
    has_gen = counts > 0
    roles[(bus_type == 2) & has_gen] = 1
    roles[bus_type == 3] = 0
    for g, b in enumerate(gen_bus):
        if roles[b] == 2:
            raise UnsupportedTopologyError(
                f"In-service generator {g + 1} sits on load bus {int(bus_ids[b])}",
                bus=int(bus_ids[b]),
            )
    slack = np.flatnonzero(roles == 0)
    if not has_gen[slack].all():
        bus = int(bus_ids[slack[0]])
        raise UnsupportedTopologyError(f"Slack bus {bus} has no in-service generator", bus=bus)
    partition = Partition.from_roles(roles)

    br = case.branch[case.branch_in_service]
    f_bus = np.array([id_to_idx[int(b)] for b in br[:, F_BUS]], dtype=np.int64)
    t_bus = np.array([id_to_idx[int(b)] for b in br[:, T_BUS]], dtype=np.int64)
    degree = np.bincount(np.concatenate([f_bus, t_bus]), minlength=n_bus)
    isolated = np.flatnonzero(degree == 0)
    if isolated.size:
        bus = int(bus_ids[isolated[0]])
        raise ConnectivityError(f"Bus {bus} is isolated (no in-service branch)", bus=bus)

    ratio = np.where(br[:, TAP] == 0, 1.0, br[:, TAP])
    shift = np.deg2rad(br[:, SHIFT])
    yff, yft, ytf, ytt = branch_vectors(br[:, BR_R], br[:, BR_X], br[:, BR_B], ratio, shift)
    ysh = (case.bus[:, GS] + 1j * case.bus[:, BS]) / base
    ybus = assemble_ybus(n_bus, f_bus, t_bus, yff, yft, ytf, ytt, ysh)

    ang_min_deg, ang_max_deg = br[:, ANGMIN], br[:, ANGMAX]
    unbounded = (ang_min_deg == 0) & (ang_max_deg == 0)
    ang_min = np.where((ang_min_deg > -360) & ~unbounded, np.deg2rad(ang_min_deg), -np.inf)
    ang_max = np.where((ang_max_deg < 360) & ~unbounded, np.deg2rad(ang_max_deg), np.inf)

    branches = BranchData(
        f_bus=_frozen(f_bus),
        t_bus=_frozen(t_bus),
        r=_frozen(br[:, BR_R]),
        x=_frozen(br[:, BR_X]),
        b=_frozen(br[:, BR_B]),
        ratio=_frozen(ratio),
        shift=_frozen(shift),
        yff=_frozen(yff),
        yft=_frozen(yft),
        ytf=_frozen(ytf),
        ytt=_frozen(ytt),
        rate=_frozen(br[:, RATE_A] / base),
        ang_min=_frozen(ang_min),
        ang_max=_frozen(ang_max),
    )

    grid = GridModel(
        name=case.name,
        n_bus=n_bus,
        base_mva=base,
        bus_ids=_frozen(bus_ids),
        ybus=_frozen(ybus),
        ysh=_frozen(ysh),
        partition=partition,
        v_bounds=_frozen(case.bus[:, [VMIN, VMAX]]),
        gen_bus=_frozen(gen_bus),
        pg_bounds=_frozen(gen[:, [PMIN, PMAX]] / base),
        qg_bounds=_frozen(gen[:, [QMIN, QMAX]] / base),
        cost_coeffs=_frozen(cost),
        pg0=_frozen(gen[:, PG] / base),
        vg=_frozen(gen[:, VG]),
        branches=branches,
        slack_angle=float(np.deg2rad(case.bus[slack[0], VA])),
    )
    log.info(f"Built {grid!r}")
    return grid


def _factorize(matrix: np.ndarray, name: str) -> Tuple[np.ndarray, np.ndarray]:
    if matrix.size == 0:
        raise FactorizationError(f"{name} is empty", matrix=name)
    if not np.all(np.isfinite(matrix)):
        raise FactorizationError(f"{name} has non-finite entries", matrix=name)
    lu, piv = lu_factor(matrix, check_finite=False)
    pivots = np.abs(np.diag(lu))
    if pivots.min() <= np.finfo(float).eps * max(pivots.max(), 1.0) * matrix.shape[0]:
        raise FactorizationError(f"{name} is singular (disconnected network?)", matrix=name)
    return lu, piv


def build_fdpf_matrices(grid: GridModel) -> FdpfFactors:
    """Assemble and factorize the XB fast-decoupled matrices

    B′ uses series reactances only (no resistance, charging or shunts, unit tap ratios,
    phase shifts kept) reduced to the non-slack buses. B″ is −Im(Ybus) without phase
    shifts, reduced to the load buses.

    Raises:
        FactorizationError: B′ or B″ is singular
    """
    br = grid.branches
    p = grid.partition
    zeros = np.zeros(br.size)

    yp = branch_vectors(zeros, br.x, zeros, np.ones(br.size), br.shift)
    ybus_p = assemble_ybus(grid.n_bus, br.f_bus, br.t_bus, *yp, np.zeros(grid.n_bus))
    b_prime = -ybus_p.imag[np.ix_(p.nonslack, p.nonslack)]

    ypp = branch_vectors(br.r, br.x, br.b, br.ratio, zeros)
    ybus_pp = assemble_ybus(grid.n_bus, br.f_bus, br.t_bus, *ypp, grid.ysh)
    b_double_prime = -ybus_pp.imag[np.ix_(p.load, p.load)]

    lu_prime = _factorize(b_prime, "B'")
    lu_double_prime = _factorize(b_double_prime, "B''") if p.load.size else None
    log.debug(f"Factorized B' {b_prime.shape} and B'' {b_double_prime.shape}")
    return FdpfFactors(
        b_prime=_frozen(b_prime),
        b_double_prime=_frozen(b_double_prime),
        lu_prime=(_frozen(lu_prime[0]), _frozen(lu_prime[1])),
        lu_double_prime=(
            None
            if lu_double_prime is None
            else (_frozen(lu_double_prime[0]), _frozen(lu_double_prime[1]))
        ),
    )
