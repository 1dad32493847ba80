"""Exception types shared across the package."""


class CkaRankError(Exception):
    """Base class for all package errors."""


class ShapeError(CkaRankError, ValueError):
    """Array or plan dimensions do not conform."""


class DegenerateInputError(CkaRankError, ValueError):
    """Input carries no variance (e.g. constant activations)."""


class NumericError(CkaRankError, ArithmeticError):
    """An iterative routine failed or a quantity is undefined."""


class ConfigurationError(CkaRankError, ValueError):
    """A run, plan or suite configuration is invalid."""


class ParseError(CkaRankError, ValueError):
    """A binary or JSON artifact could not be decoded."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class PretrainingFailedError(CkaRankError, RuntimeError):
    """The source-domain backbone did not reach its quality threshold."""

    def __init__(self, metric, threshold):
        super().__init__(
            f"backbone pretraining reached held-out mIoU {metric:.4f} < {threshold:.2f}"
        )
        self.metric = metric
        self.threshold = threshold


class NaNLossError(CkaRankError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, batch, terms):
        detail = ", ".join(f"{k}={v!r}" for k, v in terms.items())
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch
        self.terms = dict(terms)
