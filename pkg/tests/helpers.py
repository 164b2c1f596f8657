from ota_fl_sim.datagen import (PartitionSpec, gen_synthetic_classification, partition_heterogeneous,
                                partition_manifest)
from ota_fl_sim.model import ModelSpec
from ota_fl_sim.protocol import FLData


def make_data(K, n=120, m=3, C=3, pi=1.0, seed=0):
    """Small synthetic federation whose training set doubles as the evaluation set."""
    ds = gen_synthetic_classification(n, m, C, 2.0, seed=seed)
    shards = partition_heterogeneous(ds, PartitionSpec(K, pi, seed))
    return FLData(shards, ds, ds, ModelSpec("logistic", m, C), partition_manifest(shards))
