"""
Type aliases for opflayer

Array aliases used across the numerical modules
"""

import os
from typing import Any, Callable, Dict, Tuple, Union

import numpy as np
from numpy.typing import NDArray

Vector = NDArray[np.float64]
"""A 1-D float64 array (states, residuals, cotangents)."""

Matrix = NDArray[np.float64]
"""A 2-D float64 array (Jacobians, reduced susceptance matrices)."""

ComplexMatrix = NDArray[np.complex128]
"""A 2-D complex128 array (admittance matrices)."""

VectorMap = Callable[[Vector], Vector]
"""A vector-to-vector function, as consumed by finite-difference oracles."""

Range = Tuple[float, float]
"""A (low, high) pair."""

PathLike = Union[str, os.PathLike]

RawConfig = Dict[str, Any]
"""A config dictionary straight out of `yaml.safe_load`."""
