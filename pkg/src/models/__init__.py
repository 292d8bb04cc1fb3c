"""Voting detector, losses and optimisation."""

from .detector import DetectorConfig, DetectorState, ProposalSet, backward, forward, init_state

__all__ = ["DetectorConfig", "DetectorState", "ProposalSet", "backward", "forward", "init_state"]
