"""Simulator for federated learning over a noisy analog multiple-access channel."""

__version__ = "0.1.0"

from .channel import ChannelConfig
from .datagen import Dataset, PartitionSpec, gen_synthetic_classification, partition_heterogeneous
from .model import ModelSpec, ProxConfig
from .protocol import (DataSource, ModelConfig, RunConfig, StragglerModel, run_training,
                       variant_config)
from .estimator import OTAFederatedClassifier

__all__ = [
    "ChannelConfig",
    "DataSource",
    "Dataset",
    "ModelConfig",
    "ModelSpec",
    "OTAFederatedClassifier",
    "PartitionSpec",
    "ProxConfig",
    "RunConfig",
    "StragglerModel",
    "gen_synthetic_classification",
    "partition_heterogeneous",
    "run_training",
    "variant_config",
]
