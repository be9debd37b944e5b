"""Exception hierarchy shared by every module.

Most errors subclass ``ValueError`` so callers that only care about bad input
can catch one type.
"""


class SEDetectError(Exception):
    """Base class for all package errors."""


class ShapeError(SEDetectError, ValueError):
    pass


class UnsupportedKernelError(SEDetectError, ValueError):
    pass


class EmptyBatchError(SEDetectError, ValueError):
    pass


class StaleCacheError(SEDetectError, RuntimeError):
    """A forward cache was consumed twice, or backward ran without a forward."""


class ConfigError(SEDetectError, ValueError):
    pass


class FormatError(SEDetectError, ValueError):
    """Bad magic bytes or unsupported version in a binary file."""


class CorruptionError(SEDetectError, ValueError):
    """Payload length or checksum does not match the header."""


class IncompatibleArchiveError(SEDetectError, ValueError):
    """Weight archive manifest does not match the target model."""


class LabelError(SEDetectError, ValueError):
    pass


class UndefinedCurveError(SEDetectError, ValueError):
    """ROC/AUC requested for data containing a single class."""


class StratificationError(SEDetectError, ValueError):
    pass


class IngestionError(SEDetectError, RuntimeError):
    pass


class DivergenceError(SEDetectError, ArithmeticError):
    def __init__(self, fold, epoch, batch, loss):
        self.fold = fold
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss!r} in fold {fold}, epoch {epoch}, batch {batch}"
        )
