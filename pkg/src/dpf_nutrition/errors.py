"""Exception types shared across the package."""


class DPFError(Exception):
    """Base class for package errors."""


class MetadataParseError(DPFError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateDishError(MetadataParseError):
    pass


class NutrientValueError(MetadataParseError):
    def __init__(self, field: str, value, line: int | None = None):
        self.field = field
        self.value = value
        super().__init__(f"invalid value {value!r} for field '{field}'", line)


class SplitError(DPFError, ValueError):
    pass


class AugmentationError(DPFError, ValueError):
    pass


class ShapeError(DPFError, ValueError):
    pass


class ContractError(DPFError, ValueError):
    pass


class ConfigError(DPFError, ValueError):
    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class DepthLoadError(DPFError, IOError):
    pass


class CheckpointError(DPFError, IOError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class TrainingDivergedError(DPFError, FloatingPointError):
    pass


class UndefinedMetricError(DPFError, ZeroDivisionError):
    pass
