"""Federated learning simulator for FedTrip, FedAvg and FedProx."""

from .errors import (
    CapacityError,
    ConfigError,
    FedTripError,
    IdxFormatError,
    LayoutError,
    SingularityError,
)
from .federation import Federation, FederationConfig, RoundRecord, run_federation
from .nn import Dataset, MlpSpec, ParamVector
from .objectives import MethodTag, RegularizerParams
from .partition import PartitionResult, PartitionSpec

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "ConfigError",
    "Dataset",
    "FedTripError",
    "Federation",
    "FederationConfig",
    "IdxFormatError",
    "LayoutError",
    "MethodTag",
    "MlpSpec",
    "ParamVector",
    "PartitionResult",
    "PartitionSpec",
    "RegularizerParams",
    "RoundRecord",
    "SingularityError",
    "run_federation",
]
