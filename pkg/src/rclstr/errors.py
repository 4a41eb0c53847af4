"""Exception types shared across the package."""


class RclstrError(Exception):
    """Base class for all package errors."""


class ConfigError(RclstrError, ValueError):
    pass


class ShapeMismatch(RclstrError, ValueError):
    pass


# permute/encoder use the shorter name for the same condition
ShapeError = ShapeMismatch


class DomainError(RclstrError, ValueError):
    pass


class DegenerateInput(RclstrError, ValueError):
    pass


class NotScalar(RclstrError, ValueError):
    pass


class EmptyWord(RclstrError, ValueError):
    pass


class DoesNotFit(RclstrError, ValueError):
    pass


class GroupError(RclstrError, ValueError):
    pass


class MaskAllFalse(RclstrError, ValueError):
    pass


class BatchTooLarge(RclstrError, ValueError):
    pass


class DataExhausted(RclstrError, RuntimeError):
    pass


class NonFiniteLoss(RclstrError, FloatingPointError):
    def __init__(self, iteration, batch_seed, terms):
        self.iteration = iteration
        self.batch_seed = batch_seed
        self.terms = dict(terms)
        super().__init__(
            f"non-finite loss at iteration {iteration} "
            f"(batch seed {batch_seed}): {self.terms}"
        )


class IoError(RclstrError, OSError):
    """Unreadable, truncated or malformed container file."""


class VersionMismatch(IoError):
    pass


class DigestMismatch(IoError):
    pass


class CheckpointError(IoError):
    pass
