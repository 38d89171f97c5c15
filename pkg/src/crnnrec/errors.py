"""Exception types shared across the package."""


class CRNNError(Exception):
    """Base class for all package errors."""


class DimensionError(CRNNError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(CRNNError, ArithmeticError):
    """A non-finite value was produced or consumed."""


class ContextError(CRNNError, ValueError):
    """A context feature could not be encoded."""


class VocabularyError(CRNNError, KeyError):
    """An item id falls outside the vocabulary."""

    def __str__(self):
        return Exception.__str__(self)


class ConfigurationError(CRNNError, ValueError):
    """Model or run configuration is inconsistent."""


class InputError(CRNNError, ValueError):
    """Input data is unreadable, malformed or empty."""


class EvaluationError(CRNNError, ValueError):
    """Evaluation inputs are empty or not comparable."""
