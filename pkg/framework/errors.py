from __future__ import annotations

from typing import Optional


class ServiceError(Exception):
    """Base error: an exit code plus a human-readable detail."""

    exit_code: int = 1

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


# -----------------------------------------------------------------------------
# Usage class (exit 2)
# -----------------------------------------------------------------------------
class InvalidArgumentError(ServiceError, ValueError):
    exit_code = 2


class ConfigurationError(ServiceError):
    exit_code = 2


class ContractError(ServiceError):
    """A caller asked for something the operation is undefined for."""
    exit_code = 2


# -----------------------------------------------------------------------------
# IO / data class (exit 1)
# -----------------------------------------------------------------------------
class RunIOError(ServiceError):
    exit_code = 1


class DatasetFormatError(ServiceError):
    exit_code = 1


class DegenerateViewError(ServiceError):
    exit_code = 1


class CheckpointLoadError(ServiceError):
    exit_code = 1


class InvariantViolation(ServiceError):
    exit_code = 1


class NumericError(ServiceError):
    exit_code = 1

    def __init__(self, detail: str, component: str):
        super().__init__(f"{detail} (component: {component})")
        self.component = component


# -----------------------------------------------------------------------------
# Recipe / integrity class
# -----------------------------------------------------------------------------
class StageOrderError(ServiceError):
    exit_code = 3


class IntegrityError(ServiceError):
    exit_code = 4
