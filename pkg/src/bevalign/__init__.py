"""Camera and lidar bird's-eye-view maps aligned with pose supervision.

Subpackages are imported on demand; the most used entry points are
re-exported here.
"""

from .config import VERSION, RunConfig
from .errors import BehindCameraError, NumericalError, ValidationError
from .geometry import BevGridSpec, BevMap, CameraIntrinsics, DepthBins, Se3Pose

__version__ = VERSION

__all__ = [
    "VERSION", "RunConfig", "ValidationError", "BehindCameraError", "NumericalError",
    "BevGridSpec", "BevMap", "CameraIntrinsics", "DepthBins", "Se3Pose",
]
