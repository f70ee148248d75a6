"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: contract violations exit 2, I/O errors
exit 3, numeric failures exit 4.
"""


class AdamatchError(Exception):
    """Base class for all package errors."""


class ContractViolation(AdamatchError):
    """An operation was called with arguments violating its preconditions."""

    exit_code = 2


class EmptyTextError(ContractViolation):
    """A text input contained no usable (non-padded) tokens."""


class NumericDomainError(AdamatchError):
    """A numeric operation left its valid domain (NaN/Inf, log of nonpositive, ...)."""

    exit_code = 4


class DeterminismError(AdamatchError):
    """Two evaluations of a supposedly deterministic function disagreed."""

    exit_code = 4


class MissingArtifactError(AdamatchError):
    """A pipeline stage ran before its predecessor produced the needed artifact."""

    exit_code = 3


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ContractViolation, NumericDomainError, DeterminismError,
                        MissingArtifactError)):
        return exc.exit_code
    if isinstance(exc, OSError):
        return 3
    return 1
