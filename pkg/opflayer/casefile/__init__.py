"""
Case files, load datasets and CSV reports
"""

from .dataset import LoadDataset, generate_dataset, nominal_demand
from .matpower import RawCase, load_case, parse_matpower
from .reports import (
    ReferenceSet,
    load_reference_solutions,
    read_metrics_csv,
    write_alignment_csv,
    write_history_csv,
    write_metrics_csv,
)

__all__ = [
    "RawCase",
    "parse_matpower",
    "load_case",
    "LoadDataset",
    "generate_dataset",
    "nominal_demand",
    "ReferenceSet",
    "load_reference_solutions",
    "write_metrics_csv",
    "read_metrics_csv",
    "write_alignment_csv",
    "write_history_csv",
]
