"""Worst-case few-shot evaluation harness.

Dense numpy backbones fine-tuned per episode with adaptability calibration,
stability regularization and disjoint-partition ensembles, scored with
worst-case accuracy statistics (ACC_k, sigma, mu - 3 sigma).
"""

from .errors import CapacityError, DegenerateInputError, DimensionError, DivergenceError, FormatError

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "DegenerateInputError",
    "DimensionError",
    "DivergenceError",
    "FormatError",
    "__version__",
]
