"""Phoneme-aware speech encoder: audio/lip alignment at phoneme granularity."""

from pase.errors import DataError, DivergenceError, FeatureFileError, PaseError

__version__ = "0.1.0"

__all__ = ["DataError", "DivergenceError", "FeatureFileError", "PaseError", "__version__"]
