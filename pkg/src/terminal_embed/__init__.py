"""Terminal embeddings with sublinear-time violator detection."""

__version__ = "0.1.0"
