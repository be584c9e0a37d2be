"""Collectives over groups that span vendors.

Every operation runs in three phases: the vendor CCL inside each homogeneous
subgroup, a fully connected exchange between subgroup leaders over
:func:`~hetcomm.p2p.p2p_dispatch`, and a CCL broadcast from each leader back
into its subgroup.  Partial results are always combined in ascending subgroup
order, so results are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adaptors import CollectiveOp, DeviceBuffer
from .errors import EmptyGroup, RootNotInGroup, ShapeError, SizeMismatch
from .p2p import p2p_dispatch
from .transport import Segment, TransferRecord
from .world import World


@dataclass(frozen=True)
class HeteroGroup:
    members: tuple[int, ...]
    subgroups: tuple[tuple[int, ...], ...]

    @classmethod
    def build(cls, world: World, members) -> HeteroGroup:
        members = tuple(sorted(set(members)))
        if not members:
            raise EmptyGroup("group has no members")
        by_vendor: dict[str, list[int]] = {}
        for r in members:
            by_vendor.setdefault(world.vendor(r), []).append(r)
        subgroups = sorted((tuple(v) for v in by_vendor.values()), key=lambda g: g[0])
        return cls(members, tuple(subgroups))

    @property
    def leaders(self) -> tuple[int, ...]:
        return tuple(g[0] for g in self.subgroups)

    @property
    def size(self) -> int:
        return len(self.members)

    def subgroup_of(self, rank: int) -> tuple[int, ...]:
        for g in self.subgroups:
            if rank in g:
                return g
        raise RootNotInGroup(f"rank {rank} not in group")


def _ccl(world: World, ranks, op: CollectiveOp, inputs: dict[int, DeviceBuffer], root=None):
    """Run one vendor collective and charge its ring cost to every member."""
    ranks = list(ranks)
    ccl = world.ccl(ranks[0])
    size = max(b.size_bytes for b in inputs.values())
    if op is CollectiveOp.ALLGATHER:
        size *= len(ranks)
    out = ccl.ccl_collective(ranks, op, inputs, root=root)
    if len(ranks) > 1:
        t0 = world.clock.sync(ranks)
        dur = ccl.ccl_cost(ranks, op, size)
        link = ccl.group_link(ranks)
        for r in ranks:
            world.clock.advance_to(r, t0 + dur)
        world.trace.append(
            TransferRecord(ranks[0], ranks[-1], f"ccl_{op.value}", size, t0, t0 + dur,
                           [Segment(link.kind.value, dur, t0, t0 + dur)])
        )
    return out


def _check_inputs(group: HeteroGroup, inputs: dict[int, DeviceBuffer], error=SizeMismatch) -> None:
    if set(inputs) != set(group.members):
        raise error(f"inputs for ranks {sorted(inputs)} do not match group {list(group.members)}")
    sizes = {b.size_bytes for b in inputs.values()}
    if len(sizes) != 1:
        raise error(f"unequal payload sizes {sorted(sizes)}")


def _exchange(world: World, group: HeteroGroup, payload_for) -> dict[tuple[int, int], np.ndarray]:
    """Leader ``a`` sends ``payload_for(a, b)`` to leader ``b`` for every ordered pair."""
    received = {}
    for a in group.leaders:
        for b in group.leaders:
            if a != b:
                buf, _ = p2p_dispatch(world, a, b, payload_for(a, b))
                received[(a, b)] = buf.array()
    return received


def _fanout(world: World, group: HeteroGroup, result_at_leader: dict[int, DeviceBuffer]):
    out = {}
    for g in group.subgroups:
        lead = g[0]
        inputs = {r: result_at_leader[lead] if r == lead else _placeholder(world, r, result_at_leader[lead]) for r in g}
        out.update(_ccl(world, g, CollectiveOp.BROADCAST, inputs, root=lead))
    return out


def _placeholder(world: World, rank: int, like: DeviceBuffer) -> DeviceBuffer:
    buf = DeviceBuffer(rank, like.size_bytes)
    buf.dtype = like.dtype
    return buf


def _buffer(rank: int, arr: np.ndarray, dtype: str) -> DeviceBuffer:
    buf = DeviceBuffer.from_array(rank, np.asarray(arr, dtype=dtype))
    buf.dtype = dtype
    return buf


def hetero_allreduce(world: World, group: HeteroGroup, inputs: dict[int, DeviceBuffer], op: str = "sum"):
    if op != "sum":
        raise ValueError(f"unsupported reduction {op!r}")
    if not group.members:
        raise EmptyGroup("group has no members")
    _check_inputs(group, inputs)
    dtype = inputs[group.members[0]].dtype
    partial = {}
    for g in group.subgroups:
        partial[g[0]] = _ccl(world, g, CollectiveOp.ALLREDUCE_SUM, {r: inputs[r] for r in g})
    if len(group.subgroups) == 1:
        return partial[group.leaders[0]]
    received = _exchange(world, group, lambda a, b: partial[a][a])
    combined = {}
    for b in group.leaders:
        parts = [partial[a][a].array() if a == b else received[(a, b)] for a in group.leaders]
        acc = parts[0].copy()
        for p in parts[1:]:
            acc += p
        combined[b] = _buffer(b, acc, dtype)
    return _fanout(world, group, combined)


def hetero_allgather(world: World, group: HeteroGroup, inputs: dict[int, DeviceBuffer]):
    if not group.members:
        raise EmptyGroup("group has no members")
    _check_inputs(group, inputs, ShapeError)
    dtype = inputs[group.members[0]].dtype
    gathered = {}
    for g in group.subgroups:
        gathered[g[0]] = _ccl(world, g, CollectiveOp.ALLGATHER, {r: inputs[r] for r in g})
    if len(group.subgroups) == 1:
        return gathered[group.leaders[0]]
    received = _exchange(world, group, lambda a, b: gathered[a][a])
    per_rank = inputs[group.members[0]].array().size
    combined = {}
    for b in group.leaders:
        blocks: dict[int, np.ndarray] = {}
        for g in group.subgroups:
            a = g[0]
            arr = gathered[a][a].array() if a == b else received[(a, b)]
            for i, r in enumerate(g):
                blocks[r] = arr[i * per_rank : (i + 1) * per_rank]
        combined[b] = _buffer(b, np.concatenate([blocks[r] for r in group.members]), dtype)
    return _fanout(world, group, combined)


def hetero_reducescatter(world: World, group: HeteroGroup, inputs: dict[int, DeviceBuffer], op: str = "sum"):
    if op != "sum":
        raise ValueError(f"unsupported reduction {op!r}")
    if not group.members:
        raise EmptyGroup("group has no members")
    _check_inputs(group, inputs, ShapeError)
    dtype = inputs[group.members[0]].dtype
    n = inputs[group.members[0]].array().size
    k = group.size
    if n % k:
        raise ShapeError(f"{n} elements not divisible by group size {k}")
    blk = n // k
    if len(group.subgroups) == 1:
        return _ccl(world, group.members, CollectiveOp.REDUCESCATTER_SUM, inputs)
    pos = {r: i for i, r in enumerate(group.members)}

    def shards(arr: np.ndarray, ranks) -> np.ndarray:
        return np.concatenate([arr[pos[r] * blk : (pos[r] + 1) * blk] for r in ranks])

    partial = {}
    for g in group.subgroups:
        reduced = _ccl(world, g, CollectiveOp.ALLREDUCE_SUM, {r: inputs[r] for r in g})
        partial[g[0]] = reduced[g[0]].array()
    received = _exchange(
        world, group, lambda a, b: _buffer(a, shards(partial[a], group.subgroup_of(b)), dtype)
    )
    combined = {}
    for g in group.subgroups:
        b = g[0]
        parts = [shards(partial[a], g) if a == b else received[(a, b)] for a in group.leaders]
        acc = parts[0].copy()
        for p in parts[1:]:
            acc += p
        combined[b] = _buffer(b, acc, dtype)
    spread = _fanout(world, group, combined)
    out = {}
    for g in group.subgroups:
        for i, r in enumerate(g):
            out[r] = _buffer(r, spread[r].array()[i * blk : (i + 1) * blk], dtype)
    return out


def hetero_broadcast(world: World, group: HeteroGroup, root: int, payload: DeviceBuffer):
    if not group.members:
        raise EmptyGroup("group has no members")
    if root not in group.members:
        raise RootNotInGroup(f"root {root} not in group {list(group.members)}")
    home = group.subgroup_of(root)
    inputs = {r: payload if r == root else _placeholder(world, r, payload) for r in home}
    out = dict(_ccl(world, home, CollectiveOp.BROADCAST, inputs, root=root))
    if len(group.subgroups) == 1:
        return out
    src = home[0]
    at_leader = {}
    for g in group.subgroups:
        if g is home:
            continue
        buf, _ = p2p_dispatch(world, src, g[0], out[src])
        at_leader[g[0]] = buf
    for g in group.subgroups:
        if g is home:
            continue
        lead = g[0]
        ins = {r: at_leader[lead] if r == lead else _placeholder(world, r, at_leader[lead]) for r in g}
        out.update(_ccl(world, g, CollectiveOp.BROADCAST, ins, root=lead))
    return out


COLLECTIVES = {
    "allreduce": hetero_allreduce,
    "allgather": hetero_allgather,
    "reducescatter": hetero_reducescatter,
    "broadcast": hetero_broadcast,
}
