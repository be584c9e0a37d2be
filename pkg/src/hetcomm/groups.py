"""TP/DP/PP group construction and per-group backend selection.

Ranks are laid out tp-fastest, then dp, then pp::

    rank = tp_idx + tp * (dp_idx + dp * pp_idx)

With node-major rank numbering this puts pipeline stages on node (and so
vendor) boundaries.  Only PP groups may mix vendors; they get the ``hetero``
backend while every other group keeps its vendor CCL.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

from .errors import GridMismatch, HeterogeneityNotSupported
from .topology import ClusterTopology


class GroupKind(str, enum.Enum):
    TP = "TP"
    DP = "DP"
    PP = "PP"


class Backend(str, enum.Enum):
    VENDOR_CCL = "vendor_ccl"
    HETERO = "hetero"


@dataclass(frozen=True)
class CommGroup:
    kind: GroupKind
    members: tuple[int, ...]
    backend: Backend | None = None


@dataclass(frozen=True)
class Grid:
    tp: int
    pp: int
    dp: int

    @property
    def world_size(self) -> int:
        return self.tp * self.pp * self.dp

    def coords(self, rank: int) -> tuple[int, int, int]:
        """``(tp_idx, dp_idx, pp_idx)`` of ``rank``."""
        return rank % self.tp, (rank // self.tp) % self.dp, rank // (self.tp * self.dp)

    def rank(self, tp_idx: int, dp_idx: int, pp_idx: int) -> int:
        return tp_idx + self.tp * (dp_idx + self.dp * pp_idx)


def build_groups(
    topology: ClusterTopology, tp: int, pp: int, dp: int
) -> tuple[list[CommGroup], list[CommGroup], list[CommGroup]]:
    grid = Grid(tp, pp, dp)
    if min(tp, pp, dp) < 1 or grid.world_size != topology.world_size:
        raise GridMismatch(f"tp*pp*dp = {tp}*{pp}*{dp} does not equal world size {topology.world_size}")
    tp_groups = [
        CommGroup(GroupKind.TP, tuple(grid.rank(t, d, p) for t in range(tp)))
        for p in range(pp)
        for d in range(dp)
    ]
    dp_groups = [
        CommGroup(GroupKind.DP, tuple(grid.rank(t, d, p) for d in range(dp)))
        for p in range(pp)
        for t in range(tp)
    ]
    pp_groups = [
        CommGroup(GroupKind.PP, tuple(grid.rank(t, d, p) for p in range(pp)))
        for d in range(dp)
        for t in range(tp)
    ]
    return tp_groups, dp_groups, pp_groups


def assign_backends(groups, topology: ClusterTopology):
    """Set each group's backend; cross-vendor TP or DP groups are rejected."""
    if isinstance(groups, CommGroup):
        return _assign(groups, topology)
    if groups and not isinstance(groups[0], CommGroup):
        return tuple([_assign(g, topology) for g in gs] for gs in groups)
    return [_assign(g, topology) for g in groups]


def _assign(group: CommGroup, topology: ClusterTopology) -> CommGroup:
    vendors = {topology.vendor_of(r) for r in group.members}
    if len(vendors) == 1:
        return replace(group, backend=Backend.VENDOR_CCL)
    if group.kind is not GroupKind.PP:
        raise HeterogeneityNotSupported(
            f"{group.kind.value} group {list(group.members)} spans vendors {sorted(vendors)}; "
            "only PP groups may be heterogeneous"
        )
    return replace(group, backend=Backend.HETERO)


def parallel_groups(topology: ClusterTopology, tp: int, pp: int, dp: int):
    """:func:`build_groups` followed by :func:`assign_backends`."""
    return assign_backends(build_groups(topology, tp, pp, dp), topology)
