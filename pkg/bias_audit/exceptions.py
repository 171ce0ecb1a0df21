"""
Module defining the exceptions raised across the audit pipeline.

Every error carries a human readable ``detail`` and the process exit code
the command line interface returns when the error escapes a command.

Classes:
    AuditError: Base class for all audit errors.
    ValidationFailure: Base class for input/configuration problems (exit code 2).
    StageFailure: Base class for errors raised while a pipeline stage runs (exit code 3).
"""

VALIDATION_EXIT_CODE = 2
STAGE_EXIT_CODE = 3


class AuditError(Exception):
    """
    Base exception of the audit toolkit.

    Attributes:
        detail (str): Description of what went wrong.
        exit_code (int): Exit code used by the CLI when the error is not handled.
    """
    exit_code = STAGE_EXIT_CODE

    def __init__(self, detail: str, exit_code: int = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code

    def __str__(self) -> str:
        return self.detail


class ValidationFailure(AuditError):
    exit_code = VALIDATION_EXIT_CODE


class StageFailure(AuditError):
    exit_code = STAGE_EXIT_CODE


class ConfigurationError(ValidationFailure):
    """Raised when an audit configuration document cannot be read or is invalid."""


class LexiconFormatError(ValidationFailure):
    """Raised when a lexicon file cannot be parsed."""


class LexiconValidationError(ValidationFailure):
    """
    Raised when a lexicon violates one of its invariants.

    Attributes:
        term (str): The offending term.
    """

    def __init__(self, detail: str, term: str = None):
        super().__init__(detail)
        self.term = term


class DatasetConfigurationError(ValidationFailure):
    """Raised when a downstream dataset cannot satisfy its selection rules."""


class ModelLoadError(ValidationFailure):
    """Raised when a model identifier cannot be resolved by the loader registry."""


class ReportIOError(ValidationFailure):
    """Raised when the report directory is not writable."""


class InsufficientDataError(StageFailure):
    """Raised when there is not enough data to perform an operation."""


class MultiPieceError(StageFailure):
    """
    Raised when a word tokenizes to more than one word piece.

    Attributes:
        word (str): The rejected word.
        pieces (list[str]): Its word pieces.
    """

    def __init__(self, word: str, pieces: list):
        super().__init__(f"'{word}' tokenizes to {len(pieces)} pieces: {pieces}")
        self.word = word
        self.pieces = pieces


class TemplateError(StageFailure):
    """Raised when a masked template does not hold exactly one query slot."""


class CoverageError(StageFailure):
    """
    Raised when required words are missing from an embedding bank.

    Attributes:
        missing (list[str]): The words that are not covered.
    """

    def __init__(self, missing, what: str = "bank"):
        missing = sorted(missing)
        super().__init__(f"{len(missing)} required word(s) missing from {what}: {', '.join(missing)}")
        self.missing = missing


class CorpusError(StageFailure):
    """Raised when a harvested corpus violates an exclusion constraint."""


class UndefinedCosineError(StageFailure):
    """Raised when a cosine similarity involves a zero-norm vector."""


class NumericalPriorError(StageFailure):
    """Raised when a prior probability is not a usable number."""


class EmptyEvaluationError(StageFailure):
    """Raised when filtering leaves nothing to evaluate."""


class LabelError(StageFailure):
    """Raised when training data holds a single class."""


class RankError(StageFailure):
    """
    Raised when the requested subspace dimension exceeds the sample rank.

    Attributes:
        achievable (int): The largest dimension the data supports.
    """

    def __init__(self, requested: int, achievable: int):
        super().__init__(f"requested k={requested} but the samples only support k={achievable}")
        self.requested = requested
        self.achievable = achievable


class TrainingFailureError(StageFailure):
    """
    Raised when training diverges.

    Attributes:
        checkpoint: The last finite model state (a state dict), if any.
    """

    def __init__(self, detail: str, checkpoint=None):
        super().__init__(detail)
        self.checkpoint = checkpoint


class AllocationError(StageFailure):
    """Raised when a model copy cannot be allocated."""


class StratificationError(StageFailure):
    """Raised when folds cannot hold every class in their training split."""
