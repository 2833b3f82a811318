"""Multi-granularity attention model for group recommendation."""

__version__ = "0.1.0"

from .data import Dataset, Instance, Split  # noqa: F401
from .model import AblationMask, ModelConfig  # noqa: F401
from .training import TrainConfig  # noqa: F401
