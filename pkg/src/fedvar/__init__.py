"""Structured federated variational inference (SFVI) and its averaging variant."""

__version__ = "0.1.0"

from .api import SFVI, SFVIAvg  # noqa: E402
from .averaging import AvgConfig, run_sfvi_avg  # noqa: E402
from .federation import RunConfig, run_sfvi  # noqa: E402

__all__ = ["SFVI", "SFVIAvg", "AvgConfig", "RunConfig", "run_sfvi", "run_sfvi_avg", "__version__"]
