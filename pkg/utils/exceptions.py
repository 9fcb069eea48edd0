from __future__ import annotations


class DelayLDError(Exception):
    exit_code = 3


class ConfigError(DelayLDError):
    exit_code = 2

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class ParameterError(DelayLDError):
    exit_code = 2


class DomainError(DelayLDError):
    pass


class ModelError(DelayLDError):
    pass


class StepSizeError(DelayLDError):
    pass


class RankError(DelayLDError):
    pass


class ConditioningError(DelayLDError):
    pass


class InfeasibleScanError(DelayLDError):
    pass


class EstimationError(DelayLDError):
    pass


class SimulationError(DelayLDError):
    pass
