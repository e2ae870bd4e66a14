"""Exception hierarchy shared by every eedvit module."""


class EEDError(Exception):
    """Base class for all package errors."""


class DegenerateInput(EEDError, ValueError):
    pass


class ConvergenceFailure(EEDError, RuntimeError):
    pass


class DegenerateSpectrum(EEDError, ValueError):
    """All eigenvalues are zero, so the normalized spectrum is undefined.

    ``layer`` is filled in by the profiler when the failing spectrum belongs to
    a specific encoder block.
    """

    def __init__(self, message: str, layer: int | None = None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class ShapeMismatch(EEDError, ValueError):
    pass


class GraphNotRecorded(EEDError, RuntimeError):
    pass


class NonFiniteLoss(EEDError, FloatingPointError):
    pass


class FormatError(EEDError, ValueError):
    pass


class ChecksumMismatch(FormatError):
    pass


class LayerCountMismatch(EEDError, ValueError):
    pass
