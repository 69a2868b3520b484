"""Exceptions raised by the fedsim package.

Every error derives from `FedSimError`; most also derive from the closest builtin so that callers catching
`ValueError` or `OSError` keep working.
"""
from typing import Optional


class FedSimError(Exception):
    """Base class for all fedsim errors."""


# Models #

class InvalidDimension(FedSimError, ValueError):
    """A vector or matrix does not have the dimension the model declares."""


class EmptyBatch(FedSimError, ValueError):
    """An operation that averages over samples was given none."""


class InvalidBatch(FedSimError, ValueError):
    """A mini-batch larger than the shard it is drawn from was requested."""


class UnsupportedMetric(FedSimError, TypeError):
    """A classification metric was requested for a model that does not classify."""


class NotEstimable(FedSimError):
    """Smoothness constants cannot be derived for this model and must be supplied by the caller."""


class InvalidParam(FedSimError, ValueError):
    """A numeric parameter is outside of its valid range."""


# Data #

class ParseError(FedSimError, ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        """Create a parse error.

        :param message: What went wrong.
        :param line: The 1-based line number of the offending input, if known.
        """
        self.line = line

        if line is not None:
            message = 'line %d: %s' % (line, message)

        super().__init__(message)


class IndexOutOfRange(ParseError):
    """A feature index is below 1 or above the declared number of features."""


class LabelError(ParseError):
    """A label is not a non-negative integer (or ±1)."""


class InfeasiblePartition(FedSimError, ValueError):
    """The requested label-skew partition cannot be realised with the given samples."""


class TooFewSamples(FedSimError, ValueError):
    """There are not enough samples to perform the requested split."""


# Federation #

class WeightError(FedSimError, ValueError):
    """Aggregation weights do not sum to one."""


class DivergenceDetected(FedSimError, ArithmeticError):
    def __init__(self, round_: int, reason: str = ''):
        self.round = round_
        message = 'model diverged in round %d' % round_

        if reason:
            message += ' (%s)' % reason

        super().__init__(message)


class SingularHessian(FedSimError, ArithmeticError):
    """The approximate Hessian could not be factorised."""


# Metrics #

class UnknownAlgorithm(FedSimError, ValueError):
    """An algorithm identifier that the ledger does not know about."""


class RecordIOError(FedSimError, OSError):
    def __init__(self, path: str, reason: str):
        self.path = path
        super().__init__('%s: %s' % (path, reason))


# Verifier #

class OracleFailure(FedSimError):
    """An oracle could not produce its reference answer."""


class InvalidMatrix(FedSimError, ValueError):
    """A matrix does not have the structure (e.g. symmetry) an oracle requires."""


class InconsistentOracle(FedSimError):
    """Measured values contradict the oracle's reference value."""


# Configuration #

class ConfigError(FedSimError, ValueError):
    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        self.field = field
        self.line = line

        where = []

        if line is not None:
            where.append('line %d' % line)

        if field:
            where.append('field \'%s\'' % field)

        if where:
            message = '%s: %s' % (', '.join(where), message)

        super().__init__(message)
