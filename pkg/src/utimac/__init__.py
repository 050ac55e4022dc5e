"""Traffic matrix completion with a log-domain Gaussian-plus-Laplace model."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    DeviationSet,
    ObservationMask,
    TrafficFrame,
    TrafficWindow,
    WindowParams,
    from_log_domain,
    partition_windows,
    to_log_domain,
)
from .bcd import FitConfig, FitState, fit_window  # noqa: E402
from .uncertainty import complete_window  # noqa: E402

__all__ = [
    "DeviationSet",
    "FitConfig",
    "FitState",
    "ObservationMask",
    "TrafficFrame",
    "TrafficWindow",
    "WindowParams",
    "complete_window",
    "fit_window",
    "from_log_domain",
    "partition_windows",
    "to_log_domain",
]
