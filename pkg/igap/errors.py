"""Exception hierarchy for the IGAP toolkit.

Every error carries an ``exit_code`` so the command line can map error classes
to distinct process exit codes.
"""


class IgapError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(IgapError):
    """Unknown config keys or invalid values."""

    exit_code = 2


class GraphFormatError(IgapError):
    """A graph file could not be parsed."""

    exit_code = 3

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MalformedHeader(GraphFormatError):
    pass


class EndpointOutOfRange(GraphFormatError):
    pass


class RowCountMismatch(GraphFormatError):
    pass


class DuplicateEdge(GraphFormatError):
    pass


class SelfLoop(GraphFormatError):
    pass


class LabelOutOfRange(GraphFormatError):
    pass


class InvalidGraph(IgapError):
    """A constructed graph violates its invariants."""

    exit_code = 3


class SpectralError(IgapError):
    exit_code = 4


class SizeCapExceeded(SpectralError):
    """Dense decomposition requested above the size cap; use eig_lanczos."""


class NonConvergence(SpectralError):
    pass


class InvalidRank(SpectralError):
    """Requested component count out of range."""


class DimensionMismatch(IgapError, ValueError):
    exit_code = 5


class ContractViolation(IgapError):
    exit_code = 5


class ZeroNormError(IgapError, ValueError):
    """Cosine similarity is undefined for a zero-norm vector."""

    exit_code = 5


class TrainingError(IgapError):
    exit_code = 6


class NonFiniteLoss(TrainingError):

    def __init__(self, message, epoch=None):
        self.epoch = epoch
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)


class SamplingError(TrainingError):
    """Not enough centers or non-adjacent pairs to build a batch."""


class CheckpointError(IgapError):
    exit_code = 7


class SplitError(IgapError):
    exit_code = 8


class StageError(IgapError):
    """An experiment stage failed; the stage label prefixes the message."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"[{stage}] {cause}")
