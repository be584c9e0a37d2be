"""Communication library and pipeline simulator for mixed-vendor accelerator clusters.

Everything runs in one process: ranks are simulated devices, data really moves
between per-rank buffers, and time comes from an analytic link model.
"""

from __future__ import annotations

from .adaptors import DeviceBuffer
from .collectives import (
    HeteroGroup,
    hetero_allgather,
    hetero_allreduce,
    hetero_broadcast,
    hetero_reducescatter,
)
from .errors import HetCommError
from .groups import Backend, CommGroup, GroupKind, assign_backends, build_groups, parallel_groups
from .p2p import ChunkConfig, TransferPath, p2p_dispatch, p2p_transfer, transfer_time
from .pipeline import PartitionPlan, StageProfile, StageSpec, optimize_partition, simulate_iteration
from .topology import ClusterTopology, load_topology, make_topology, reference_testbed
from .transport import pipelined_time, wire_time
from .world import World

__version__ = "0.1.0"

__all__ = [
    "Backend",
    "ChunkConfig",
    "ClusterTopology",
    "CommGroup",
    "DeviceBuffer",
    "GroupKind",
    "HetCommError",
    "HeteroGroup",
    "PartitionPlan",
    "StageProfile",
    "StageSpec",
    "TransferPath",
    "World",
    "assign_backends",
    "build_groups",
    "hetero_allgather",
    "hetero_allreduce",
    "hetero_broadcast",
    "hetero_reducescatter",
    "load_topology",
    "make_topology",
    "optimize_partition",
    "p2p_dispatch",
    "p2p_transfer",
    "reference_testbed",
    "parallel_groups",
    "pipelined_time",
    "simulate_iteration",
    "transfer_time",
    "wire_time",
]
