"""
Reference-solution ingestion and CSV report writers
"""

import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from ..error import ReferenceDataError
from ..result import ALIGNMENT_COLUMNS, METRICS_COLUMNS, AlignmentRow, MetricsRecord, TrainHistory
from ..types import PathLike

log = logging.getLogger(__name__)

# 17 significant digits: every double survives a write/read cycle
FLOAT_FORMAT = "%.16e"


class ReferenceSet(BaseModel):
    """Externally computed optima keyed by dataset sample index"""

    costs: Dict[int, float] = Field(default_factory=dict, description="Objective per sample")
    solutions: Dict[int, np.ndarray] = Field(
        default_factory=dict, description="Optional full solution vector per sample"
    )

    model_config = ConfigDict(arbitrary_types_allowed=True)

    def __len__(self) -> int:
        return len(self.costs)

    def __contains__(self, index: int) -> bool:
        return int(index) in self.costs

    def cost(self, index: int) -> float:
        return self.costs[int(index)]

    def missing(self, indices: Iterable[int]) -> List[int]:
        """Indices without a reference cost"""
        return [int(i) for i in indices if int(i) not in self.costs]

    def __repr__(self):
        return f"ReferenceSet({len(self)} entries, {len(self.solutions)} with solutions)"


def load_reference_solutions(path: PathLike) -> ReferenceSet:
    """Read an `index,cost[,solution...]` table

    Raises:
        ReferenceDataError: Bad header, duplicate index, or non-numeric index/cost
    """
    try:
        frame = pd.read_csv(path, skipinitialspace=True)
    except pd.errors.EmptyDataError as e:
        raise ReferenceDataError(f"Reference file {path} is empty (header required)") from e

    columns = [str(c).strip() for c in frame.columns]
    if columns[:2] != ["index", "cost"]:
        raise ReferenceDataError(
            f"Reference file {path} must start with header 'index,cost', got {columns[:2]}"
        )
    frame.columns = columns
    if frame.empty:
        return ReferenceSet()

    index = pd.to_numeric(frame["index"], errors="coerce")
    bad_index = frame.index[index.isna() | (index != index.round())].tolist()
    if bad_index:
        rows = [i + 2 for i in bad_index]
        raise ReferenceDataError(f"Non-integer index on data rows {rows}", indices=rows)
    index = index.astype(np.int64)

    dups = sorted(set(index[index.duplicated()].tolist()))
    if dups:
        raise ReferenceDataError(f"Duplicate reference indices: {dups}", indices=dups)

    cost = pd.to_numeric(frame["cost"], errors="coerce")
    bad_cost = index[cost.isna()].tolist()
    if bad_cost:
        raise ReferenceDataError(f"Non-numeric cost for indices {bad_cost}", indices=bad_cost)

    costs = dict(zip(index.tolist(), cost.astype(float).tolist()))
    solutions: Dict[int, np.ndarray] = {}
    if len(columns) > 2:
        values = frame[columns[2:]].apply(pd.to_numeric, errors="coerce").to_numpy(float)
        for i, row in zip(index.tolist(), values):
            if not np.all(np.isnan(row)):
                solutions[i] = row

    refs = ReferenceSet(costs=costs, solutions=solutions)
    log.info(f"Loaded {refs!r} from {path}")
    return refs


def _write_frame(frame: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    log.debug(f"Wrote {len(frame)} rows to {path}")
    return path


def write_metrics_csv(records: Sequence[MetricsRecord], path: PathLike) -> Path:
    """One header row plus one row per record, doubles in scientific notation"""
    frame = pd.DataFrame([r.to_row() for r in records], columns=METRICS_COLUMNS)
    frame["epoch"] = frame["epoch"].astype("Int64")
    return _write_frame(frame, path)


def read_metrics_csv(path: PathLike) -> List[MetricsRecord]:
    """Inverse of write_metrics_csv"""
    frame = pd.read_csv(path, dtype={"epoch": "Int64"})
    records = []
    for row in frame.to_dict(orient="records"):
        epoch = row.pop("epoch")
        records.append(MetricsRecord(epoch=None if pd.isna(epoch) else int(epoch), **row))
    return records


def write_alignment_csv(rows: Sequence[AlignmentRow], path: PathLike) -> Path:
    """Alignment study table, one row per refinement depth"""
    frame = pd.DataFrame([r.to_row() for r in rows], columns=ALIGNMENT_COLUMNS)
    return _write_frame(frame, path)


def write_history_csv(history: TrainHistory, path: PathLike) -> Path:
    """Per-epoch losses, dual norms and skipped counts"""
    columns: Optional[List[str]] = None
    if not history.epochs:
        columns = ["epoch", "train_loss", "test_loss", "lambda_norm", "nu_norm", "skipped",
                   "diverged", "seconds"]
    return _write_frame(pd.DataFrame(history.rows(), columns=columns), path)
