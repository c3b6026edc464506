"""Exception types shared across the toolkit."""


class QsenseError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(QsenseError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ValidationError(QsenseError, ValueError):
    """An input violates a documented precondition."""


class IdxFormatError(QsenseError, ValueError):
    """An IDX file is malformed (bad magic, truncation, count mismatch)."""


class ModelFormatError(QsenseError, ValueError):
    """A model manifest/blob pair is malformed or inconsistent."""


class TrainingError(QsenseError, RuntimeError):
    """Training diverged or could not proceed."""


class GenerationError(QsenseError, RuntimeError):
    """Synthetic data generation diverged."""


class MetricError(QsenseError, RuntimeError):
    """A sensitivity metric produced a non-finite intermediate."""


class MissingArtifactError(QsenseError, FileNotFoundError):
    """A required input file does not exist."""

    def __init__(self, path: str, role: str = "input"):
        self.path = str(path)
        self.role = role
        super().__init__(f"missing {role}: {self.path}")
