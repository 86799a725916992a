#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Exception hierarchy for the fingerprint embedding toolkit.

Every error also subclasses the builtin a caller would expect
(ValueError, FileNotFoundError, KeyError, ArithmeticError), so plain
``except ValueError`` handlers keep working.
"""

from typing import Optional

from pydantic import ValidationError


class FingerprintToolkitError(Exception):
    """Base class for all toolkit errors."""


class InputDataError(FingerprintToolkitError, FileNotFoundError):
    """A dataset, image or sidecar file is missing or unreadable."""


class EmptyDatasetError(InputDataError):
    """A dataset directory holds no parseable images."""


class DatasetFormatError(InputDataError, ValueError):
    """A file does not follow its expected format."""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MinutiaRangeError(DatasetFormatError):
    """A minutia lies outside the image frame."""


class SplitError(InputDataError, ValueError):
    """A finger has too few impressions for the requested split."""

    def __init__(self, message: str, finger: Optional[str] = None):
        super().__init__(message)
        self.finger = finger


class ProtocolError(InputDataError, ValueError):
    """An index cannot produce the requested pair protocol."""


class ParameterError(FingerprintToolkitError, ValueError):
    """An operation received an invalid parameter."""


class ContractError(FingerprintToolkitError, ValueError):
    """An operation's precondition does not hold."""


class NumericalError(FingerprintToolkitError, ArithmeticError):
    """A computation produced a degenerate value."""

    def __init__(self, message: str, branch: Optional[str] = None):
        super().__init__(message)
        self.branch = branch


class TrainingDivergedError(NumericalError):
    """The training loss became non-finite."""

    def __init__(self, step: int, value: float):
        super().__init__(f"Non-finite loss {value} at step {step}")
        self.step = step


class MissingEmbeddingError(FingerprintToolkitError, KeyError):
    """One or more images have no embedding record."""

    def __init__(self, image_ids):
        self.image_ids = list(image_ids)
        super().__init__(f"No embedding for: {', '.join(self.image_ids)}")

    def __str__(self):
        return self.args[0]


# CLI exit codes
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_PARTIAL = 4


def exit_code_for(exc: BaseException) -> int:
    """
    Map an exception to the CLI exit-code contract.

    Args:
        exc: The raised exception.

    Returns:
        int: 2 for configuration/usage errors, 3 for input data errors,
             4 for partial processing failures.
    """
    if isinstance(exc, MissingEmbeddingError):
        return EXIT_PARTIAL
    if isinstance(exc, InputDataError):
        return EXIT_INPUT
    if isinstance(exc, (ValidationError, ParameterError, ContractError, KeyError)):
        return EXIT_CONFIG
    return EXIT_PARTIAL
