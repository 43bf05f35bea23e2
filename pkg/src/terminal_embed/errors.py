class CapExceededError(RuntimeError):
    """A hard resource or iteration cap was hit."""


class CertificationError(RuntimeError):
    """A randomized object failed its certification check too many times."""


class FormatError(ValueError):
    """Malformed input or index file."""
