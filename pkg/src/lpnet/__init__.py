"""Feed-forward networks of sparsifying nonlinear transforms learned
without back-propagation: per-level exact-goal targets, corrective
transforms and decoupled block updates.
"""

from .state import ClassMatrix, HyperParams, LevelParams, NetworkConfig, WeightSet, init_weights
from .transforms import csnt, snt

__all__ = [
    "ClassMatrix",
    "HyperParams",
    "LevelParams",
    "NetworkConfig",
    "WeightSet",
    "csnt",
    "init_weights",
    "snt",
]
