"""Exception hierarchy shared across the package."""


class MPIReconError(Exception):
    """Base class for every error raised by mpirecon."""


class DimensionError(MPIReconError, ValueError):
    pass


class ParameterError(MPIReconError, ValueError):
    pass


class ContainerError(MPIReconError):
    """Base class for container load failures."""


class ContainerFormatError(ContainerError):
    """Bad magic bytes or an unparsable header."""


class ContainerTruncatedError(ContainerError):
    """Payload shorter than the header promises."""


class ContainerVersionError(ContainerError):
    """Container written by an unsupported format version."""


class PreprocessingError(MPIReconError):
    pass


class DenoiserError(MPIReconError):
    """A denoiser failed; for external children ``diagnostics`` holds stderr."""

    def __init__(self, message, diagnostics=""):
        super().__init__(message)
        self.diagnostics = diagnostics


class ScheduleError(MPIReconError):
    """The automatic PnP parameter schedule hit a degenerate noise estimate."""


class MetricError(MPIReconError, ValueError):
    pass


class ManifestError(MPIReconError, ValueError):
    pass
