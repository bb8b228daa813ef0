"""
Custom exceptions and error formatting for the language modeling toolkit.
"""
from typing import Dict, Optional


class LanguageModelError(Exception):
    """Base class for every error raised by the toolkit."""

    exit_code = 1
    default_detail = "Language model error"
    default_code = "lm_error"

    def __init__(self, detail: Optional[str] = None, code: Optional[str] = None):
        self.detail = detail if detail is not None else self.default_detail
        self.code = code if code is not None else self.default_code
        super().__init__(self.detail)


class EmptyCorpusError(LanguageModelError):
    """Raised when a corpus, text or window set has no tokens."""

    exit_code = 3
    default_detail = "Corpus contains no tokens"
    default_code = "empty_corpus"


class VocabularyError(LanguageModelError):
    """Raised when a vocabulary or word list is malformed."""

    exit_code = 3
    default_detail = "Invalid vocabulary"
    default_code = "vocabulary_error"


class StatsValidationError(LanguageModelError):
    """Raised when n-gram statistics are combined inconsistently."""

    exit_code = 3
    default_detail = "Inconsistent n-gram statistics"
    default_code = "stats_error"


class ContextNotFoundError(LanguageModelError):
    """Raised when a training context is missing from the statistics."""

    exit_code = 3
    default_detail = "Context not present in statistics"
    default_code = "context_not_found"


class ArpaParseError(LanguageModelError):
    """Raised when an ARPA file cannot be parsed."""

    exit_code = 4
    default_detail = "Malformed ARPA file"
    default_code = "parse_error"

    def __init__(self, detail: Optional[str] = None, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            detail = f"line {line_number}: {detail or self.default_detail}"
        super().__init__(detail)


class DiscountError(LanguageModelError):
    """Raised when discounts cannot be estimated from counts-of-counts."""

    exit_code = 3
    default_detail = "Cannot estimate discount"
    default_code = "discount_error"


class ShapeError(LanguageModelError):
    """Raised when array shapes do not conform."""

    exit_code = 5
    default_detail = "Array shapes do not conform"
    default_code = "shape_error"


class NumericalError(LanguageModelError):
    """Raised when an array contains NaN or Inf."""

    exit_code = 5
    default_detail = "Non-finite value encountered"
    default_code = "numerical_error"


class TargetError(LanguageModelError):
    """Raised when a training target is invalid for the requested regime."""

    exit_code = 5
    default_detail = "Invalid training target"
    default_code = "target_error"


class OptimizerStateError(LanguageModelError):
    """Raised when an optimizer step is requested without gradients."""

    exit_code = 5
    default_detail = "Optimizer step before gradients were computed"
    default_code = "optimizer_state_error"


class ConfigValidationError(LanguageModelError):
    """Raised when a run configuration fails validation."""

    exit_code = 2
    default_detail = "Invalid configuration"
    default_code = "config_error"

    def __init__(self, detail: Optional[str] = None, errors: Optional[Dict] = None):
        self.errors = errors or {}
        super().__init__(detail)


class ZeroProbabilityError(LanguageModelError):
    """Raised when a model assigns zero or negative probability to a token."""

    exit_code = 5
    default_detail = "Model assigned non-positive probability"
    default_code = "zero_probability"

    def __init__(self, detail: Optional[str] = None, position: Optional[int] = None):
        self.position = position
        if position is not None:
            detail = f"{detail or self.default_detail} at token position {position}"
        super().__init__(detail)


class CheckpointError(LanguageModelError):
    """Raised when a checkpoint file is corrupt or incompatible."""

    exit_code = 4
    default_detail = "Invalid checkpoint"
    default_code = "checkpoint_error"


class RunNotFoundError(LanguageModelError):
    """Raised when an experiment run is not found."""

    exit_code = 6
    default_detail = "Experiment run not found"
    default_code = "run_not_found"


def format_error(exc: Exception) -> Dict:
    """
    Build the consistent single-record error payload used by the CLI.
    """
    if isinstance(exc, LanguageModelError):
        payload = {
            "error": True,
            "code": exc.code,
            "message": str(exc.detail),
            "exit_code": exc.exit_code,
        }
        if isinstance(exc, ConfigValidationError) and exc.errors:
            payload["errors"] = exc.errors
        return payload

    if isinstance(exc, FileNotFoundError):
        return {
            "error": True,
            "code": "file_not_found",
            "message": f"{exc.strerror}: {exc.filename}",
            "exit_code": 2,
        }

    return {
        "error": True,
        "code": "internal_error",
        "message": str(exc),
        "exit_code": 1,
    }
