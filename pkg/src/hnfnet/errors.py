"""Exception hierarchy shared across the package."""


class HNFError(Exception):
    """Base class for every error raised by hnfnet."""


class ConfigurationError(HNFError, ValueError):
    """Shapes, channel counts or hyperparameters do not fit together."""


class InputError(HNFError, ValueError):
    """User-supplied data violates a precondition (e.g. extent not divisible by 16)."""


class ContractViolation(HNFError, ValueError):
    """A caller broke an operation's contract (non-scalar loss, non-binary target, ...)."""


class NumericFaultError(HNFError, FloatingPointError):
    """A NaN or Inf appeared in an intermediate value."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class PreprocessingError(HNFError, ValueError):
    pass


class LabelError(HNFError, ValueError):
    """Label volume contains values outside {0, 1, 2, 4}."""


class CheckpointError(HNFError):
    """Checkpoint archive is malformed or does not match the network config."""


class NiftiError(HNFError, IOError):
    """Base class for NIfTI load errors."""


class NiftiMagicError(NiftiError):
    pass


class NiftiDtypeError(NiftiError):
    pass


class NiftiTruncatedError(NiftiError):
    pass


class NiftiHeaderError(NiftiError):
    pass
