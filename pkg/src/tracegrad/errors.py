"""Exception hierarchy shared by every subsystem."""


class TraceGradError(Exception):
    """Base class for all package errors."""


class ParameterError(TraceGradError, ValueError):
    """An argument has the wrong shape, range or value."""


class CapabilityError(TraceGradError, ValueError):
    """A request exceeds what the precomputed tables support (e.g. l > l_max)."""


class UsageError(TraceGradError, RuntimeError):
    """An API was called in the wrong state (detached node, disabled head, ...)."""


class ConfigurationError(TraceGradError, ValueError):
    """A model or run configuration is inconsistent."""


class DiagnosticError(TraceGradError, FloatingPointError):
    """A numerical check hit a non-finite value.

    ``index`` carries the offending flat component, if known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class GenerationError(TraceGradError, RuntimeError):
    """Synthetic data could not be produced within the retry budget."""


class LoadError(TraceGradError, IOError):
    """A dataset or checkpoint file is corrupt, truncated or of the wrong version."""

    def __init__(self, message, record_index=None):
        super().__init__(message)
        self.record_index = record_index


class DivergenceError(TraceGradError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
