"""Exception hierarchy shared by every module.

Each error carries a short ``category`` used by the command line front end
to emit ``ERROR:<category>:`` prefixed messages.
"""


class PsrfcnError(Exception):
    category = "error"


class DimensionError(PsrfcnError, ValueError):
    category = "dimension"


class ContractError(PsrfcnError, ValueError):
    category = "contract"


class DegenerateStatisticsError(PsrfcnError, ValueError):
    category = "degenerate"


class NonFiniteError(PsrfcnError, FloatingPointError):
    category = "nonfinite"


class GeometryError(PsrfcnError, ValueError):
    category = "geometry"


class ConfigError(PsrfcnError, ValueError):
    category = "config"


class ParseError(PsrfcnError, ValueError):
    category = "parse"

    def __init__(self, message, path=None, lineno=None):
        where = ""
        if path is not None:
            where = f"{path}"
        if lineno is not None:
            where = f"{where}:{lineno}" if where else f"line {lineno}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.lineno = lineno


class FormatError(PsrfcnError, ValueError):
    category = "format"


class PlacementError(PsrfcnError, RuntimeError):
    category = "placement"


class EvaluationError(PsrfcnError, ValueError):
    category = "evaluation"


class DivergenceError(PsrfcnError, FloatingPointError):
    category = "divergence"
