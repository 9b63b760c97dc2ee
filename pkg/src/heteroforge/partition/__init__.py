from .book import (
    FeatureShard,
    PartitionBook,
    PhysicalPartition,
    edge_owner,
    load_book,
    load_partition,
    materialize_partitions,
    random_second_level,
    save_book,
    save_partition,
    second_level_partition,
)
from .constraints import build_constraints, constraint_names
from .multilevel import PartitionAssignment, edge_cut, partition_graph, partition_multiconstraint, symmetric_adjacency

__all__ = [
    "FeatureShard",
    "PartitionAssignment",
    "PartitionBook",
    "PhysicalPartition",
    "build_constraints",
    "constraint_names",
    "edge_cut",
    "edge_owner",
    "load_book",
    "load_partition",
    "materialize_partitions",
    "partition_graph",
    "partition_multiconstraint",
    "random_second_level",
    "save_book",
    "save_partition",
    "second_level_partition",
    "symmetric_adjacency",
]
