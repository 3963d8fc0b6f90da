"""Simulation and evaluation toolkit for personalized federated learning."""

from .datamodel import (ClientDataset, ClientRecord, Example, FederatedDataset, ModelParams, PerClientMetrics,
                        RoundTrace, read_dataset, validate_dataset, write_dataset)
from .models import ArchDescriptor

__version__ = "0.1.0"

__all__ = [
    "ArchDescriptor", "ClientDataset", "ClientRecord", "Example", "FederatedDataset", "ModelParams",
    "PerClientMetrics", "RoundTrace", "read_dataset", "validate_dataset", "write_dataset", "__version__",
]
