"""Face tracking for camera-equipped headsets: rig model, camera placement,
coefficient fitting, multi-branch regression and label distillation."""

__version__ = "0.1.0"

from hmdface.errors import ConfigError, DataError, HmdFaceError, NumericError, ProjectionError

__all__ = ["ConfigError", "DataError", "HmdFaceError", "NumericError", "ProjectionError", "__version__"]
