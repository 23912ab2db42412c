"""Student-teacher anomaly detection on 3D point clouds."""
from .errors import ConfigError, FormatError, GeostError, TrainingError

__version__ = "0.1.0"

__all__ = ["ConfigError", "FormatError", "GeostError", "TrainingError", "__version__"]
