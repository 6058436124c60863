"""
Custom exceptions for tcs_fedsim
"""
from typing import Optional, Sequence


class TCSFedsimError(Exception):
    """Base exception class for tcs_fedsim"""
    pass


class ContractViolationError(TCSFedsimError):
    """Raised when a caller breaks a documented precondition"""
    pass


class LayoutMismatchError(ContractViolationError):
    """Raised when operands carry different layer layouts"""
    pass


class NonFiniteValueError(ContractViolationError):
    """Raised when a parameter vector contains NaN or Inf"""
    pass


class MalformedPayloadError(TCSFedsimError):
    """Raised when untrusted wire bytes cannot be decoded"""

    def __init__(self, message: str, bit_offset: Optional[int] = None):
        self.bit_offset = bit_offset
        if bit_offset is not None:
            message = f"malformed payload at bit offset {bit_offset}: {message}"
        super().__init__(message)


class DatasetFormatError(TCSFedsimError):
    """Raised when a dataset file is ragged or unparsable"""
    pass


class ConfigurationError(TCSFedsimError):
    """Raised when configuration is invalid"""

    def __init__(self, message: str, fields: Sequence[str] = ()):
        self.fields = list(fields)
        super().__init__(message)


class DivergedError(TCSFedsimError):
    """Raised when training produces a non-finite loss or model"""

    def __init__(self, message: str, round: Optional[int] = None):
        self.round = round
        super().__init__(message)


class OutputExistsError(TCSFedsimError):
    """Raised when a run directory already exists and overwriting was not requested"""
    pass
