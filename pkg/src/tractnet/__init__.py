"""Training ReLU surrogates that are cheap to optimise over with MILP."""
from .bounds import Box, BoundsProfile, propagate_ibp
from .network import Network

__version__ = "0.1.0"

__all__ = ["Box", "BoundsProfile", "Network", "propagate_ibp"]
