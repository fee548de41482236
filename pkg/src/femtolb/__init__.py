"""Two-tier femtocell load balancing: analytic model, optimizer and simulator."""

from .model import ControlParams, NetworkConfig, ThroughputReport

__all__ = ["ControlParams", "NetworkConfig", "ThroughputReport"]
__version__ = "0.1.0"
