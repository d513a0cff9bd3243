"""Peer-to-peer energy trading on radial distribution feeders with network cost allocation."""

from .coordination import (NegotiationConfig, NegotiationState, check_propositions,
                           realized_welfare, run_negotiation, social_optimum)
from .exceptions import (AllocationError, ConfigError, NegotiationDivergence, NetworkFileError,
                         OptimizationError, P2PGridError, PowerFlowDivergence)
from .grid import RadialNetwork, ieee33, load_network, random_radial_network
from .market import BuyingPeer, PeerSet, SellingPeer, load_peers
from .powerflow import CostSchedule, GridState, solve_power_flow
from .sensitivity import SensitivityTable, compute_sensitivities

__version__ = "0.1.0"

__all__ = [
    "AllocationError", "BuyingPeer", "ConfigError", "CostSchedule", "GridState",
    "NegotiationConfig", "NegotiationDivergence", "NegotiationState", "NetworkFileError",
    "OptimizationError", "P2PGridError", "PeerSet", "PowerFlowDivergence", "RadialNetwork",
    "SellingPeer", "SensitivityTable", "check_propositions", "compute_sensitivities", "ieee33",
    "load_network", "load_peers", "random_radial_network", "realized_welfare",
    "run_negotiation", "social_optimum", "solve_power_flow",
]
