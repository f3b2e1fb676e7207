"""Self-calibrating monocular SLAM on synthetic keyframe streams."""
__version__ = "0.3.0"

from .camera import CameraIntrinsics, project, unproject
from .errors import AutoCalError
from .liegroups import PoseSE3
from .settings import Settings, get_settings

__all__ = ["__version__", "AutoCalError", "CameraIntrinsics", "PoseSE3", "Settings", "get_settings",
           "project", "unproject"]
