"""Exception types raised across the pipeline.

Every error that callers are expected to branch on has its own class; the
CLI maps them onto its exit-code contract (2 = usage/validation,
3 = numerical failure, 4 = incompatibility).
"""


class HisToSGEError(Exception):
    """Base class for all errors raised by this package."""


class DataFormatError(HisToSGEError):
    """A dataset directory is missing a required file or a file is malformed."""


class AlignmentError(HisToSGEError):
    """Spot or gene identifiers do not line up between tables/datasets."""


class ValidationError(HisToSGEError):
    """A dataset violates one of its structural invariants."""


class ParameterError(HisToSGEError):
    """A configuration value is outside its allowed range."""


class BoundsError(HisToSGEError):
    """A coordinate falls outside the image."""


class DegenerateSpotError(HisToSGEError):
    """A spot has an all-zero expression row and cannot be normalized."""


class DegenerateGridError(HisToSGEError):
    """Spot geometry is degenerate (e.g. coincident coordinates)."""


class ExtractorBackendError(HisToSGEError):
    """A feature-extraction backend is unavailable or returned garbage."""


class ShapeContractError(HisToSGEError):
    """Matrix shapes passed to an operation do not satisfy its contract."""


class PositionalEncodingError(HisToSGEError):
    """A spot ordinal exceeds the learned positional-encoding table."""


class DivergenceError(HisToSGEError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, batch=None, last_checkpoint=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.last_checkpoint = last_checkpoint


class IncompatibleCheckpointError(HisToSGEError):
    """A checkpoint does not match the extractor or dataset it is used with."""


class UndefinedCorrelationError(HisToSGEError):
    """Pearson correlation is undefined because an input has zero variance."""


class EvaluationError(HisToSGEError):
    """An evaluation could not produce any defined metric."""
