"""Deterministic simulation, adversaries, workloads and reporting."""

from .network import DelayModel, SimConfig, Simulation, run_simulation

__all__ = ["DelayModel", "SimConfig", "Simulation", "run_simulation"]
