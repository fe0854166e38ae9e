from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

try:
    __version__ = version("underq")
except PackageNotFoundError:
    __version__ = (Path(__file__).parent.parent / "VERSION").read_text().strip()

from .agent import AgentConfig, EvalReport, train  # noqa: E402
from .error import (ConvergenceError, DomainError, FormatError, NumericalCheckError,  # noqa: E402
                    ParameterError, UnderqError)
from .operators import UnderestimateConfig, underestimated_backup, verify_contraction  # noqa: E402

__all__ = [
    "AgentConfig",
    "ConvergenceError",
    "DomainError",
    "EvalReport",
    "FormatError",
    "NumericalCheckError",
    "ParameterError",
    "UnderestimateConfig",
    "UnderqError",
    "train",
    "underestimated_backup",
    "verify_contraction",
]
