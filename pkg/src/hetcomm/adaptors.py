"""Device, Net-Plugin and CCL adaptor interfaces plus simulated vendors.

Everything above this module touches "hardware" only through these three
interfaces.  The simulated implementations keep real bytes in host memory and
report simulated durations computed from the topology's link specs.
"""

from __future__ import annotations

import enum
import itertools
import threading
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AllocError,
    CrossRankCopy,
    MixedVendorGroup,
    QpClosed,
    SizeMismatch,
    WrongSpace,
)
from .topology import ClusterTopology, LinkKind, LinkSpec, device_of_rank
from .transport import Transport, copy_time, wire_time


class Space(str, enum.Enum):
    DEVICE = "device"
    HOST = "host"
    CHUNK = "chunk"


class CollectiveOp(str, enum.Enum):
    ALLREDUCE_SUM = "allreduce_sum"
    ALLGATHER = "allgather"
    REDUCESCATTER_SUM = "reducescatter_sum"
    BROADCAST = "broadcast"


@dataclass(eq=False)
class DeviceBuffer:
    owner_rank: int
    size_bytes: int
    space: Space = Space.DEVICE
    contents: bytearray = None
    dtype: str = "u1"
    alive: bool = True

    def __post_init__(self):
        if self.contents is None:
            self.contents = bytearray(self.size_bytes)
        if len(self.contents) != self.size_bytes:
            raise ValueError("contents length must equal size_bytes")

    @classmethod
    def from_array(cls, rank: int, arr: np.ndarray, space: Space = Space.DEVICE) -> DeviceBuffer:
        arr = np.ascontiguousarray(arr)
        data = bytearray(arr.tobytes())
        return cls(rank, len(data), Space(space), data, arr.dtype.str)

    @classmethod
    def from_bytes(cls, rank: int, data: bytes, space: Space = Space.DEVICE) -> DeviceBuffer:
        return cls(rank, len(data), Space(space), bytearray(data))

    def array(self) -> np.ndarray:
        """Copy of the contents viewed as ``dtype``."""
        return np.frombuffer(bytes(self.contents), dtype=self.dtype).copy()

    def tobytes(self) -> bytes:
        return bytes(self.contents)


@dataclass(eq=False)
class CompletionEvent:
    id: int
    state: str = "pending"
    sim_duration_us: float = 0.0

    @property
    def done(self) -> bool:
        return self.state == "complete"

    def complete(self, duration: float | None = None) -> None:
        if duration is not None and not self.done:
            self.sim_duration_us = duration
        self.state = "complete"


_event_ids = itertools.count()


def new_event() -> CompletionEvent:
    return CompletionEvent(next(_event_ids))


@dataclass(frozen=True)
class MrHandle:
    buffer_ref: DeviceBuffer
    key: int

    @property
    def valid(self) -> bool:
        return self.buffer_ref.alive


@dataclass(eq=False)
class _WorkRequest:
    mr: MrHandle
    size: int
    event: CompletionEvent


@dataclass(eq=False)
class QueuePair:
    """One endpoint of a connected pair; sends here match recvs on ``peer``."""

    local_rank: int
    remote_rank: int
    link: LinkSpec
    transport: Transport
    pending_sends: deque = field(default_factory=deque)
    pending_recvs: deque = field(default_factory=deque)
    peer: QueuePair | None = None
    closed: bool = False
    lock: threading.Lock = None

    def close(self) -> None:
        self.closed = True
        if self.peer is not None:
            self.peer.closed = True


# -- abstract adaptor interfaces ---------------------------------------------


class DeviceAdaptor(ABC):
    """Memory allocation, copies and event management for one vendor."""

    @abstractmethod
    def dev_alloc(self, rank: int, size_bytes: int, space: Space | str = Space.DEVICE) -> DeviceBuffer: ...

    @abstractmethod
    def dev_free(self, buf: DeviceBuffer) -> None: ...

    @abstractmethod
    def dev_copy(
        self, src: DeviceBuffer, dst: DeviceBuffer, size_bytes: int, src_offset: int = 0, dst_offset: int = 0
    ) -> tuple[CompletionEvent, float]: ...

    @abstractmethod
    def event_synchronize(self, event: CompletionEvent) -> bool: ...


class NetPlugin(ABC):
    """Memory-region registration and queue-pair management."""

    @abstractmethod
    def net_register(self, buffer: DeviceBuffer) -> MrHandle: ...

    @abstractmethod
    def net_connect(self, rank_a: int, rank_b: int) -> tuple[QueuePair, QueuePair]: ...

    @abstractmethod
    def net_post_send(self, qp: QueuePair, mr: MrHandle, size_bytes: int) -> CompletionEvent: ...

    @abstractmethod
    def net_post_recv(self, qp: QueuePair, mr: MrHandle, size_bytes: int) -> CompletionEvent: ...


class CCLAdaptor(ABC):
    """Vendor collective library: homogeneous groups only."""

    @abstractmethod
    def ccl_collective(
        self,
        group: list[int],
        op: CollectiveOp | str,
        inputs: dict[int, DeviceBuffer],
        root: int | None = None,
    ) -> dict[int, DeviceBuffer]: ...

    @abstractmethod
    def ccl_cost(self, group: list[int], op: CollectiveOp | str, size_bytes: int) -> float: ...

    @abstractmethod
    def ccl_p2p(self, send_rank: int, recv_rank: int, payload: DeviceBuffer) -> DeviceBuffer: ...


# -- simulated implementations -----------------------------------------------


def _link_between(topology: ClusterTopology, a: int, b: int) -> LinkSpec:
    da, db = device_of_rank(topology, a), device_of_rank(topology, b)
    if da.node_id == db.node_id:
        return topology.link(da.node_id, LinkKind.INTRA_NODE_FABRIC)
    la = topology.link(da.node_id, LinkKind.NIC_NETWORK)
    lb = topology.link(db.node_id, LinkKind.NIC_NETWORK)
    return LinkSpec(LinkKind.NIC_NETWORK, min(la.bandwidth, lb.bandwidth), max(la.latency, lb.latency))


class SimDevice(DeviceAdaptor):
    def __init__(self, topology: ClusterTopology, mem_cap_bytes: int | None = None):
        self.topology = topology
        self.mem_cap_bytes = mem_cap_bytes
        self._used: dict[int, int] = {}
        self._lock = threading.Lock()

    def dev_alloc(self, rank, size_bytes, space=Space.DEVICE):
        if size_bytes < 0:
            raise ValueError("size_bytes must be >= 0")
        device_of_rank(self.topology, rank)
        with self._lock:
            used = self._used.get(rank, 0) + size_bytes
            if self.mem_cap_bytes is not None and used > self.mem_cap_bytes:
                raise AllocError(f"rank {rank}: {used} bytes exceeds cap {self.mem_cap_bytes}")
            self._used[rank] = used
        return DeviceBuffer(rank, size_bytes, Space(space))

    def dev_free(self, buf):
        if buf.alive:
            buf.alive = False
            with self._lock:
                self._used[buf.owner_rank] -= buf.size_bytes

    def used(self, rank: int) -> int:
        return self._used.get(rank, 0)

    def copy_duration(self, rank: int, src_space: Space, dst_space: Space, size_bytes: int) -> float:
        dev = device_of_rank(self.topology, rank)
        if Space.HOST in (src_space, dst_space):
            return copy_time(dev.host_link_bandwidth, size_bytes)
        return copy_time(dev.mem_bandwidth, size_bytes)

    def dev_copy(self, src, dst, size_bytes, src_offset=0, dst_offset=0):
        if src.owner_rank != dst.owner_rank:
            raise CrossRankCopy(f"copy from rank {src.owner_rank} to rank {dst.owner_rank}")
        if size_bytes < 0 or src_offset + size_bytes > src.size_bytes or dst_offset + size_bytes > dst.size_bytes:
            raise SizeMismatch(f"copy of {size_bytes} bytes exceeds a buffer")
        dst.contents[dst_offset : dst_offset + size_bytes] = src.contents[src_offset : src_offset + size_bytes]
        dur = self.copy_duration(src.owner_rank, src.space, dst.space, size_bytes)
        ev = new_event()
        ev.complete(dur)
        return ev, dur

    def event_synchronize(self, event):
        return event.done


class SimNet(NetPlugin):
    def __init__(self, topology: ClusterTopology, transport: Transport):
        self.topology = topology
        self.transport = transport
        self._keys: dict[int, itertools.count] = {}
        self._lock = threading.Lock()

    def net_register(self, buffer):
        if buffer.space != Space.CHUNK:
            raise WrongSpace(f"only chunk-space buffers can be registered, got {buffer.space.value}")
        with self._lock:
            counter = self._keys.setdefault(buffer.owner_rank, itertools.count(1))
            return MrHandle(buffer, next(counter))

    def net_connect(self, rank_a, rank_b):
        link = _link_between(self.topology, rank_a, rank_b)
        lock = threading.Lock()
        a = QueuePair(rank_a, rank_b, link, self.transport, lock=lock)
        b = QueuePair(rank_b, rank_a, link, self.transport, lock=lock)
        a.peer, b.peer = b, a
        return a, b

    def _check(self, qp: QueuePair, mr: MrHandle, size: int) -> None:
        if qp.closed:
            raise QpClosed(f"queue pair {qp.local_rank}->{qp.remote_rank} is closed")
        if not mr.valid:
            raise WrongSpace("memory region refers to a freed buffer")
        if mr.buffer_ref.owner_rank != qp.local_rank:
            raise CrossRankCopy("memory region belongs to another rank")
        if size > mr.buffer_ref.size_bytes:
            raise SizeMismatch(f"{size} bytes exceeds registered region of {mr.buffer_ref.size_bytes}")

    def net_post_send(self, qp, mr, size_bytes):
        self._check(qp, mr, size_bytes)
        ev = new_event()
        with qp.lock:
            qp.pending_sends.append(_WorkRequest(mr, size_bytes, ev))
            self._progress(qp)
        return ev

    def net_post_recv(self, qp, mr, size_bytes):
        self._check(qp, mr, size_bytes)
        ev = new_event()
        with qp.lock:
            qp.pending_recvs.append(_WorkRequest(mr, size_bytes, ev))
            self._progress(qp.peer)
        return ev

    def _progress(self, sender: QueuePair) -> None:
        """Match sends posted on ``sender`` with recvs posted on its peer, in order."""
        receiver = sender.peer
        while sender.pending_sends and receiver.pending_recvs:
            s, r = sender.pending_sends[0], receiver.pending_recvs[0]
            if s.size != r.size:
                raise SizeMismatch(f"send of {s.size} bytes matched recv of {r.size} bytes")
            sender.pending_sends.popleft()
            receiver.pending_recvs.popleft()
            self.transport.deliver(sender.local_rank, receiver.local_rank, s.mr.buffer_ref.contents[: s.size])
            data = self.transport.recv(receiver.local_rank, sender.local_rank)
            r.mr.buffer_ref.contents[: r.size] = data
            dur = wire_time(sender.link, s.size)
            s.event.complete(dur)
            r.event.complete(dur)


def _reduce_ascending(arrays: list[np.ndarray]) -> np.ndarray:
    acc = arrays[0].copy()
    for a in arrays[1:]:
        acc += a
    return acc


class SimCCL(CCLAdaptor):
    """Ring-cost collective library that reduces in ascending-rank order."""

    def __init__(self, topology: ClusterTopology, transport: Transport):
        self.topology = topology
        self.transport = transport

    def _check_group(self, ranks) -> None:
        vendors = {self.topology.vendor_of(r) for r in ranks}
        if len(vendors) > 1:
            raise MixedVendorGroup(f"ranks {sorted(ranks)} span vendors {sorted(vendors)}")

    def group_link(self, group: list[int]) -> LinkSpec:
        """Slowest link any ring neighbor pair must cross."""
        nodes = {device_of_rank(self.topology, r).node_id for r in group}
        if len(nodes) == 1:
            return self.topology.link(nodes.pop(), LinkKind.INTRA_NODE_FABRIC)
        links = [self.topology.link(n, LinkKind.NIC_NETWORK) for n in nodes]
        return LinkSpec(LinkKind.NIC_NETWORK, min(l.bandwidth for l in links), max(l.latency for l in links))

    def ccl_cost(self, group, op, size_bytes):
        k = len(group)
        if k <= 1:
            return 0.0
        link = self.group_link(group)
        op = CollectiveOp(op)
        factor = {
            CollectiveOp.ALLREDUCE_SUM: 2 * (k - 1) / k,
            CollectiveOp.ALLGATHER: (k - 1) / k,
            CollectiveOp.REDUCESCATTER_SUM: (k - 1) / k,
            CollectiveOp.BROADCAST: 1.0,
        }[op]
        return factor * copy_time(link.bandwidth, size_bytes) + (k - 1) * link.latency

    def ccl_collective(self, group, op, inputs, root=None):
        op = CollectiveOp(op)
        ranks = sorted(group)
        self._check_group(ranks)
        if set(inputs) != set(ranks):
            raise SizeMismatch("inputs must be given for exactly the group's ranks")
        k = len(ranks)
        dtype = inputs[ranks[0]].dtype
        if op is CollectiveOp.BROADCAST:
            root = ranks[0] if root is None else root
            data = inputs[root].tobytes()
            for r in ranks:
                if r != root:
                    self.transport.deliver(root, r, data)
            return {
                r: DeviceBuffer(r, len(data), Space.DEVICE, bytearray(data if r == root else self.transport.recv(r, root)), dtype)
                for r in ranks
            }
        sizes = {inputs[r].size_bytes for r in ranks}
        if len(sizes) != 1:
            raise SizeMismatch(f"unequal payload sizes {sorted(sizes)}")
        # every rank ships its payload to every other rank over the channels
        for src in ranks:
            for dst in ranks:
                if src != dst:
                    self.transport.deliver(src, dst, inputs[src].contents)
        out = {}
        for r in ranks:
            arrays = [
                inputs[r].array() if src == r else np.frombuffer(self.transport.recv(r, src), dtype=dtype).copy()
                for src in ranks
            ]
            if op is CollectiveOp.ALLREDUCE_SUM:
                res = _reduce_ascending(arrays)
            elif op is CollectiveOp.ALLGATHER:
                res = np.concatenate(arrays)
            else:
                n = arrays[0].size
                if n % k:
                    raise SizeMismatch(f"reducescatter payload of {n} elements not divisible by {k}")
                blk = n // k
                i = ranks.index(r)
                res = _reduce_ascending([a[i * blk : (i + 1) * blk] for a in arrays])
            out[r] = DeviceBuffer.from_array(r, res)
            out[r].dtype = dtype
        return out

    def ccl_p2p(self, send_rank, recv_rank, payload):
        self._check_group([send_rank, recv_rank])
        if payload.owner_rank != send_rank:
            raise CrossRankCopy("payload is not on the sending rank")
        self.transport.deliver(send_rank, recv_rank, payload.contents)
        data = self.transport.recv(recv_rank, send_rank)
        return DeviceBuffer(recv_rank, len(data), Space.DEVICE, bytearray(data), payload.dtype)

    def p2p_link(self, send_rank: int, recv_rank: int) -> LinkSpec:
        return _link_between(self.topology, send_rank, recv_rank)


@dataclass
class VendorAdaptors:
    vendor: str
    device: DeviceAdaptor
    net: NetPlugin
    ccl: CCLAdaptor


class SimNvidia(VendorAdaptors):
    pass


class SimAmd(VendorAdaptors):
    pass


_BUILTIN = {"nvidia": SimNvidia, "amd": SimAmd}


def load_adaptors(
    vendor: str, topology: ClusterTopology, transport: Transport, mem_cap_bytes: int | None = None
) -> VendorAdaptors:
    """Adaptor bundle for ``vendor``; unknown vendors get the generic simulation."""
    cls = _BUILTIN.get(vendor, VendorAdaptors)
    return cls(vendor, SimDevice(topology, mem_cap_bytes), SimNet(topology, transport), SimCCL(topology, transport))
