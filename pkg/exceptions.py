"""
Exception Hierarchy
Every failure the laboratory reports carries a short machine-readable category
"""

from typing import List, Optional, Sequence


class LegalMarketsError(Exception):
    """Base class for all laboratory errors"""

    category = "error"


class DomainError(LegalMarketsError, ValueError):
    """Argument outside the mathematical domain of an operation"""

    category = "domain"


class ConfigError(LegalMarketsError, ValueError):
    """Run configuration could not be parsed or validated"""

    category = "config"

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None and line is not None:
            location = f"{path}:{line}: "
        elif line is not None:
            location = f"line {line}: "
        super().__init__(f"{location}{message}")


class PanelFormatError(LegalMarketsError, ValueError):
    """Panel file or frame violates the county-year panel contract"""

    category = "panel"

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        prefix = f"row {row}: " if row is not None else ""
        super().__init__(f"{prefix}{message}")


class ConvergenceError(LegalMarketsError, RuntimeError):
    """Iterative procedure stopped before meeting its tolerance"""

    category = "convergence"

    def __init__(self, message: str, last_change: Optional[float] = None,
                 trace: Optional[Sequence[float]] = None):
        self.last_change = last_change
        self.trace: List[float] = list(trace or [])
        super().__init__(message)


class RankDeficiencyError(LegalMarketsError, RuntimeError):
    """Design or moment Jacobian is not of full column rank"""

    category = "rank"

    def __init__(self, message: str, columns: Optional[Sequence[str]] = None):
        self.columns: List[str] = list(columns or [])
        super().__init__(message)


class EstimationError(LegalMarketsError, RuntimeError):
    """Estimator could not produce a result (singular weights, too few clusters)"""

    category = "estimation"
