"""
DREAGR - Error hierarchy

Every failure the pipeline can raise derives from DreagrError. The batch entry
point (main.py) maps the three families onto process exit codes:

- ConfigError    -> 1 (usage)
- DataError      -> 2 (data)
- NumericalError -> 3 (numerical failure)
"""


class DreagrError(Exception):
    """Base class for all pipeline errors"""

    exit_code = 2


class ConfigError(DreagrError):
    """Invalid or incomplete run configuration"""

    exit_code = 1


class DataError(DreagrError):
    """Input data that cannot be turned into an interaction store"""

    exit_code = 2


class DatasetFormatError(DataError):
    """Malformed line in a dataset file"""


class DanglingReferenceError(DataError):
    """A record points at an entity that does not exist"""


class SchemaError(DataError):
    """Network schema violates the HIN conditions"""


class PathSpecError(DataError):
    """Path spec that cannot be evaluated over the available relations"""


class CheckpointError(DataError):
    """Unreadable, corrupt or incompatible checkpoint"""


class EvaluationError(DreagrError):
    """Evaluation requested over an empty or inconsistent instance set"""

    exit_code = 2


class NumericalError(DreagrError):
    """Non-finite loss or failed gradient verification"""

    exit_code = 3


class NonFiniteGradientError(NumericalError):
    """Adam received a gradient containing NaN or inf"""

    def __init__(self, parameter_name: str):
        super().__init__(f"non-finite gradient for parameter '{parameter_name}'")
        self.parameter_name = parameter_name


class ShapeError(ValueError):
    """Operand shapes do not conform"""

    def __init__(self, operation: str, *shapes):
        listed = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{operation}: shape mismatch {listed}")
        self.shapes = shapes
