"""posekit-extractor: populate posekit scene manifests from image directories."""

__version__ = "0.1.0"


class ExtractorError(Exception):
    """Base class for extractor failures."""


class ModelLoadError(ExtractorError):
    """A configured model backend could not be resolved or loaded."""
