"""
Exception hierarchy for the molecular map pipeline.
"""


class MolmapError(Exception):
    """Base class for all pipeline errors."""


class InvalidArgumentError(MolmapError, ValueError):
    """An operation was called with arguments outside its domain."""


class InvalidModelError(MolmapError, ValueError):
    """The physical model is inconsistent (e.g. a detection probability >= 1)."""


class NonInvertibleInputError(MolmapError, ValueError):
    """Input to an inversion step cannot be inverted."""


class DegeneratePixelError(NonInvertibleInputError):
    """Detector probabilities at a pixel carry no photon information."""


class ConfigError(MolmapError):
    """Invalid or inconsistent pipeline configuration."""


class DataError(MolmapError):
    """Input files are malformed or do not match each other."""
