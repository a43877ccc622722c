"""Early-exit transformer tracker with IoU-token exit decisions, built on a small numpy autodiff core."""
from .boxes import BoundingBox
from .config import ConfigError, RunConfig
from .inference import ExitPolicy, TrackResult, calibrate, select_exit, track_sequence
from .model import EarlyExitTracker

__all__ = ["BoundingBox", "ConfigError", "EarlyExitTracker", "ExitPolicy", "RunConfig", "TrackResult",
           "calibrate", "select_exit", "track_sequence"]
__version__ = "0.1.0"
