"""posekit: promptable object retrieval and relative 6DoF pose estimation."""

__version__ = "0.1.0"

from .errors import PosekitError

__all__ = ["PosekitError", "__version__"]
