"""Custom exception classes for the workbench"""

from typing import Optional, Dict, Any

from pydantic import BaseModel

# Process exit codes shared by every CLI verb
EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


class AppException(Exception):
    """Base exception for workbench errors"""
    def __init__(self, message: str, exit_code: int = EXIT_RUNTIME, details: Optional[Dict[str, Any]] = None):
        self.message = message
        self.exit_code = exit_code
        self.details = details or {}
        super().__init__(self.message)


class ConfigurationError(AppException):
    """Invalid configuration, spec or precondition that is the caller's fault"""
    def __init__(self, message: str = "Configuration error", details: Optional[Dict[str, Any]] = None):
        super().__init__(message, exit_code=EXIT_CONFIG, details=details)


class CheckpointError(AppException):
    """Checkpoint missing, unreadable or inconsistent with the requested spec"""
    def __init__(self, message: str = "Checkpoint error", details: Optional[Dict[str, Any]] = None):
        super().__init__(message, exit_code=EXIT_CONFIG, details=details)


class DimensionError(AppException):
    """Tensor shapes that cannot be combined"""
    def __init__(self, op: str, *shapes: Any):
        shape_text = " and ".join(str(tuple(s)) for s in shapes)
        message = f"{op}: incompatible shapes {shape_text}"
        super().__init__(message, details={"op": op, "shapes": [list(s) for s in shapes]})


class DomainError(AppException):
    """Value outside the mathematical domain of an operation"""
    def __init__(self, message: str = "Value outside domain", details: Optional[Dict[str, Any]] = None):
        super().__init__(message, details=details)


class UsageError(AppException):
    """API used out of order, e.g. backward twice on one tape"""
    def __init__(self, message: str = "Invalid usage", details: Optional[Dict[str, Any]] = None):
        super().__init__(message, details=details)


class FormatError(AppException):
    """Input file does not follow the expected binary format"""
    def __init__(self, path: str, message: str, details: Optional[Dict[str, Any]] = None):
        full_details = {"path": path}
        full_details.update(details or {})
        super().__init__(f"{path}: {message}", details=full_details)


class LengthError(AppException):
    """Input file shorter than its header declares"""
    def __init__(self, path: str, expected: int, actual: int):
        message = f"{path}: truncated, expected {expected} bytes but found {actual}"
        super().__init__(message, details={"path": path, "expected": expected, "actual": actual})


class RangeError(AppException):
    """Requested count or index outside the available range"""
    def __init__(self, message: str = "Out of range", details: Optional[Dict[str, Any]] = None):
        super().__init__(message, details=details)


class TrainingError(AppException):
    """Training diverged or otherwise failed at runtime"""
    def __init__(self, epoch: int, batch: int, message: str = "Non-finite loss"):
        full_message = f"{message} at epoch {epoch}, batch {batch}"
        super().__init__(full_message, details={"epoch": epoch, "batch": batch})


class InternalError(AppException):
    """Broken internal invariant"""
    def __init__(self, message: str = "Internal error", details: Optional[Dict[str, Any]] = None):
        super().__init__(message, details=details)


class ErrorResponse(BaseModel):
    """Structured error printed by the CLI"""
    error: str
    message: str
    exit_code: int
    details: Dict[str, Any] = {}
    command: Optional[str] = None
