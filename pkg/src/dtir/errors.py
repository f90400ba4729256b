"""Exception hierarchy shared by every module."""


class DTIRError(Exception):
    """Base class for all package errors."""


class ShapeError(DTIRError, ValueError):
    pass


class NumericsError(DTIRError, FloatingPointError):
    pass


class ContractError(DTIRError, ValueError):
    """A documented precondition was violated by the caller."""


class ScheduleError(DTIRError, ValueError):
    pass


class ConfigError(DTIRError, ValueError):
    pass


class UnknownKey(ConfigError):
    def __init__(self, key: str, lineno: int | None = None):
        self.key = key
        where = f" (line {lineno})" if lineno is not None else ""
        super().__init__(f"unknown config key {key!r}{where}")


class RangeError(ConfigError):
    def __init__(self, key: str, value, constraint: str):
        self.key = key
        self.value = value
        super().__init__(f"{key} = {value!r} violates {constraint}")


class CheckpointError(DTIRError):
    pass


class CrcMismatch(CheckpointError):
    pass


class MalformedContainer(CheckpointError):
    pass


class StageError(DTIRError, RuntimeError):
    """Wraps a failure inside one pipeline stage, tagged with the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
