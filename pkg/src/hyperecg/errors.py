"""Exception hierarchy shared by every stage of the pipeline."""


class HyperEcgError(Exception):
    """Base class; the CLI turns any of these into a one-line diagnostic."""


class InvalidSpec(HyperEcgError, ValueError):
    pass


class RecordingTooShort(HyperEcgError, ValueError):
    pass


class NoPeaksFound(HyperEcgError):
    pass


class InsufficientData(HyperEcgError, ValueError):
    pass


class ShapeMismatch(HyperEcgError, ValueError):
    pass


class FormatError(HyperEcgError):
    """Malformed or truncated file (checkpoint, recording, segment cache)."""


class EmptyManifest(HyperEcgError, ValueError):
    pass


class EmptyDataset(HyperEcgError, ValueError):
    pass


class DivergenceDetected(HyperEcgError, FloatingPointError):
    pass


class SingleClass(HyperEcgError, ValueError):
    """ROC/AUC requested on labels containing only one class."""
