"""Local GD simulator and bound checker for logistic regression on separable data."""

from .dataset import Dataset, SplitSpec, canonicalize, gen_margin_splits, gen_synthetic
from .localgd import RunConfig, Trajectory, run
from .margin import MarginCertificate, solve_max_margin
from .theory import BoundParams, TheoryReport, check_trajectory

__all__ = [
    "Dataset",
    "SplitSpec",
    "canonicalize",
    "gen_margin_splits",
    "gen_synthetic",
    "RunConfig",
    "Trajectory",
    "run",
    "MarginCertificate",
    "solve_max_margin",
    "BoundParams",
    "TheoryReport",
    "check_trajectory",
]

__version__ = "0.1.0"
