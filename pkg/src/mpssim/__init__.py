"""Deterministic discrete-event simulator of GPU sharing under NVIDIA MPS.

Models the execution hierarchy (clients, channels, time-slice groups), the
unified-memory model with cross-process physical aliasing, the full fault
taxonomy with classification and injection, the driver fault-handling pipeline
with dummy-page isolation, and an active-standby fast-recovery protocol with
bounded replay. Fixed seed plus fixed scenario yields byte-identical traces.
"""

from .kernel import SimParams, World
from .machine import build_world

__all__ = ["SimParams", "World", "build_world"]
__version__ = "0.1.0"
