"""
Perturbed load-profile datasets
"""

import logging
from pathlib import Path
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..types import PathLike, Range
from .matpower import PD, QD, RawCase

log = logging.getLogger(__name__)


class LoadDataset(BaseModel):
    """Demand samples d = (P^d, Q^d) per bus in p.u., with a fixed train/test split"""

    samples: np.ndarray = Field(..., description="(count, 2·n_bus) demand vectors")
    nominal: np.ndarray = Field(..., description="Nominal demand vector the draws scale")
    seed: int = Field(..., description="Generator seed")
    perturbation_range: Tuple[float, float] = Field(..., description="(low, high) factors")
    train_idx: np.ndarray = Field(..., description="Sorted training indices")
    test_idx: np.ndarray = Field(..., description="Sorted test indices")

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    @model_validator(mode="after")
    def _check_split(self) -> "LoadDataset":
        joined = np.concatenate([self.train_idx, self.test_idx])
        if joined.size != self.samples.shape[0] or np.unique(joined).size != joined.size:
            raise ValueError("train and test indices must be disjoint and cover all samples")
        return self

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def train(self) -> np.ndarray:
        return self.samples[self.train_idx]

    @property
    def test(self) -> np.ndarray:
        return self.samples[self.test_idx]

    def split(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        """(indices, samples) of the `train` or `test` split"""
        if name == "train":
            return self.train_idx, self.train
        if name == "test":
            return self.test_idx, self.test
        raise ValueError(f"Unknown split {name!r} (expected 'train' or 'test')")

    def save(self, path: PathLike) -> Path:
        """Write the dataset as a compressed .npz archive"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(
            path,
            samples=self.samples,
            nominal=self.nominal,
            seed=np.int64(self.seed),
            perturbation_range=np.asarray(self.perturbation_range),
            train_idx=self.train_idx,
            test_idx=self.test_idx,
        )
        log.info(f"Saved {len(self)} samples to {path}")
        return path

    @classmethod
    def load(cls, path: PathLike) -> "LoadDataset":
        with np.load(Path(path)) as data:
            low, high = data["perturbation_range"].tolist()
            return cls(
                samples=data["samples"],
                nominal=data["nominal"],
                seed=int(data["seed"]),
                perturbation_range=(low, high),
                train_idx=data["train_idx"],
                test_idx=data["test_idx"],
            )

    def __repr__(self):
        lo, hi = self.perturbation_range
        return (
            f"LoadDataset({len(self)} samples, [{lo:g}, {hi:g}], "
            f"{self.train_idx.size} train / {self.test_idx.size} test)"
        )


def nominal_demand(case: RawCase) -> np.ndarray:
    """(P^d, Q^d) per bus in p.u. as stored in the case file"""
    return np.concatenate([case.bus[:, PD], case.bus[:, QD]]) / case.base_mva


def generate_dataset(
    case: RawCase,
    range: Range,
    count: int,
    split_fraction: float,
    seed: int,
) -> LoadDataset:
    """Scale every bus's P^d and Q^d by independent uniform factors

    Args:
        case: Parsed case supplying the nominal demand
        range: (low, high) multiplicative factors, 0 < low <= high
        count: Number of samples
        split_fraction: Fraction of samples in the training split
        seed: Seed; identical inputs give identical datasets

    Returns:
        LoadDataset
    """
    low, high = range
    if not 0 < low <= high:
        raise ValueError(f"Perturbation range must satisfy 0 < low <= high, got {range}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if not 0.0 <= split_fraction <= 1.0:
        raise ValueError(f"split_fraction must lie in [0, 1], got {split_fraction}")

    rng = np.random.default_rng(seed)
    nominal = nominal_demand(case)
    factors = rng.uniform(low, high, size=(count, nominal.size))
    samples = nominal[None, :] * factors

    order = rng.permutation(count)
    n_train = int(round(split_fraction * count))
    dataset = LoadDataset(
        samples=samples,
        nominal=nominal,
        seed=seed,
        perturbation_range=(float(low), float(high)),
        train_idx=np.sort(order[:n_train]),
        test_idx=np.sort(order[n_train:]),
    )
    log.info(f"Generated {dataset!r} for {case.name}")
    return dataset
