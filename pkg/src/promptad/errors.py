"""Exception types shared across the package."""


class PromptadError(Exception):
    """Base class for all package-specific errors."""


class InputError(PromptadError):
    """Rejected input: wrong shape, dtype, or value range."""


class ConfigurationError(PromptadError):
    """Inconsistent configuration or mismatched component wiring."""


class FormatError(PromptadError):
    """Malformed serialized artifact (tensor container, bundle, dataset)."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class UndefinedMetricError(PromptadError):
    """Metric is undefined for the given inputs (e.g. single-class AUROC)."""


class DatasetError(PromptadError):
    """Dataset is empty, inconsistent, or lacks required reference samples."""


class TrainingDivergedError(PromptadError):
    """Optimization produced a non-finite loss."""
