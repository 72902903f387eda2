from .shards import (
    ShardDims,
    SampleRecord,
    ShardData,
    write_shard,
    read_shard,
    inspect_shard,
    read_index_list,
    write_index_list,
)
from .sampling import MixtureSource, MixtureSpec, epoch_schedule, mixture_epoch, BatchSampler
from .synthetic import SyntheticSpec, gen_synthetic, synthetic_maps

__all__ = [
    "ShardDims",
    "SampleRecord",
    "ShardData",
    "write_shard",
    "read_shard",
    "inspect_shard",
    "read_index_list",
    "write_index_list",
    "MixtureSource",
    "MixtureSpec",
    "epoch_schedule",
    "mixture_epoch",
    "BatchSampler",
    "SyntheticSpec",
    "gen_synthetic",
    "synthetic_maps",
]
