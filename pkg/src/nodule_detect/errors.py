"""Exception types raised across the package."""


class NoduleDetectError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(NoduleDetectError, ValueError):
    pass


class DegenerateRoiError(NoduleDetectError, ValueError):
    pass


class EmptyMinibatchError(NoduleDetectError, ValueError):
    pass


class GenerationError(NoduleDetectError, RuntimeError):
    pass


class IngestError(NoduleDetectError):
    """Annotation or volume files are missing or malformed."""

    def __init__(self, message, problems=None):
        super().__init__(message)
        # (line_number, reason) pairs
        self.problems = list(problems or [])


class UndefinedSensitivityError(NoduleDetectError, ValueError):
    pass


class VersionError(NoduleDetectError):
    pass


class NonFiniteLossError(NoduleDetectError, FloatingPointError):
    def __init__(self, component, value):
        super().__init__(f"non-finite loss in component {component!r}: {value}")
        self.component = component
        self.value = value
