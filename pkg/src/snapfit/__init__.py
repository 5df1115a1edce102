"""Dual-arm snap-fit assembly workbench.

Phase-coupled coordination, proprioceptive snap detection from joint
velocities and event-triggered variable impedance control, closed around a
synthetic snap-through contact plant.
"""

__version__ = "0.1.0"
