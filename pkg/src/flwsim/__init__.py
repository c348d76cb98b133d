"""Deterministic simulator of federated learning over a wireless IoT uplink
with exact energy-aware scheduling of bandwidth, resource blocks and power."""

from .radio import ChannelParams, Device, LinkGrid, LinkMetrics, Policy
from .scheduling import CandidateAssignment, Schedule, SchedulerConfig
from .strategies import RoundMetrics, SimulationContext, StrategyKind

__all__ = [
    "CandidateAssignment",
    "ChannelParams",
    "Device",
    "LinkGrid",
    "LinkMetrics",
    "Policy",
    "RoundMetrics",
    "Schedule",
    "SchedulerConfig",
    "SimulationContext",
    "StrategyKind",
]

__version__ = "0.1.0"
