"""Deterministic simulation, trace checkers and schedule exploration."""

from .simnet import ClientOp, FaultPlan, Flags, Simulator, Topology, Trace, TraceEvent, run

__all__ = ["ClientOp", "FaultPlan", "Flags", "Simulator", "Topology", "Trace", "TraceEvent", "run"]
