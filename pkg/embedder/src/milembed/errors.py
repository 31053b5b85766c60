class EmbedderError(Exception):
    """Base class for embedder failures."""


class ValidationError(EmbedderError):
    """Invalid inputs, arguments, or job description."""


class SetupError(EmbedderError):
    """Model or weights could not be prepared (e.g. download failure)."""
