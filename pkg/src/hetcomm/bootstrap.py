"""Rank rendezvous and global directory exchange over host-side channels.

Ranks run in their own threads and meet at a named in-process coordinator
(``local://<name>``).  The coordinator address defaults to ``$HETCOMM_COORD``.
"""

from __future__ import annotations

import itertools
import os
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, TypeVar

from .errors import LengthMismatch, RendezvousTimeout, ValidationError
from .topology import ClusterTopology, VendorId, device_of_rank
from .transport import Transport

DEFAULT_COORDINATOR = "local://default"
DEFAULT_TIMEOUT = 30.0

T = TypeVar("T")


def default_coordinator() -> str:
    return os.environ.get("HETCOMM_COORD", DEFAULT_COORDINATOR)


class _Rendezvous:
    def __init__(self, world_size: int):
        self.world_size = world_size
        self.arrived: set[int] = set()
        self.state = "open"
        self.cond = threading.Condition()
        self.channels = Transport()


_registry: dict[str, _Rendezvous] = {}
_registry_lock = threading.Lock()


@dataclass
class BootstrapNet:
    rank: int
    world_size: int
    channels: Transport
    timeout: float = DEFAULT_TIMEOUT

    @property
    def peers(self) -> list[int]:
        return [r for r in range(self.world_size) if r != self.rank]

    def send(self, peer: int, data: bytes) -> None:
        self.channels.deliver(self.rank, peer, data)

    def recv(self, peer: int) -> bytes:
        try:
            return self.channels.recv(self.rank, peer, self.timeout)
        except TimeoutError as e:
            raise RendezvousTimeout(f"rank {self.rank}: no message from rank {peer}") from e


def rendezvous(
    rank: int, world_size: int, coordinator: str | None = None, timeout: float = DEFAULT_TIMEOUT
) -> BootstrapNet:
    """Block until ``world_size`` ranks have called with the same coordinator."""
    if world_size < 1 or not 0 <= rank < world_size:
        raise ValueError(f"invalid rank {rank} for world_size {world_size}")
    coordinator = coordinator or default_coordinator()
    with _registry_lock:
        rv = _registry.get(coordinator)
        if rv is None or rv.state != "open":
            rv = _registry[coordinator] = _Rendezvous(world_size)
        if rv.world_size != world_size:
            raise ValueError(f"{coordinator}: world_size {world_size} != {rv.world_size}")
    with rv.cond:
        if rank in rv.arrived:
            raise ValueError(f"{coordinator}: rank {rank} joined twice")
        rv.arrived.add(rank)
        if len(rv.arrived) == world_size:
            rv.state = "done"
            rv.cond.notify_all()
        elif not rv.cond.wait_for(lambda: rv.state != "open", timeout):
            rv.state = "failed"
            rv.cond.notify_all()
        if rv.state == "failed":
            with _registry_lock:
                if _registry.get(coordinator) is rv:
                    del _registry[coordinator]
            raise RendezvousTimeout(
                f"{coordinator}: only {len(rv.arrived)} of {world_size} ranks arrived"
            )
    with _registry_lock:
        if _registry.get(coordinator) is rv:
            del _registry[coordinator]
    return BootstrapNet(rank, world_size, rv.channels, timeout)


_OK, _MISMATCH = 0, 1


def bootstrap_allgather(net: BootstrapNet, local: bytes) -> list[bytes]:
    """Gather every rank's payload to rank 0, then broadcast the list."""
    local = bytes(local)
    if net.world_size == 1:
        return [local]
    if net.rank != 0:
        net.send(0, local)
        reply = net.recv(0)
        if reply[0] == _MISMATCH:
            raise LengthMismatch("bootstrap allgather payload lengths differ across ranks")
        return _unpack_list(reply[1:])
    entries = [local] + [net.recv(r) for r in net.peers]
    if len({len(e) for e in entries}) != 1:
        for r in net.peers:
            net.send(r, bytes([_MISMATCH]))
        raise LengthMismatch(f"bootstrap allgather lengths {[len(e) for e in entries]}")
    reply = bytes([_OK]) + struct.pack(">II", len(entries), len(local)) + b"".join(entries)
    for r in net.peers:
        net.send(r, reply)
    return entries


def _unpack_list(blob: bytes) -> list[bytes]:
    count, size = struct.unpack_from(">II", blob)
    body = blob[8:]
    return [body[i * size : (i + 1) * size] for i in range(count)]


_RECORD = struct.Struct(">IIII32s")


@dataclass(frozen=True)
class DirectoryEntry:
    rank: int
    node_id: int
    device_id: int
    vendor: VendorId
    nic_id: int

    def pack(self) -> bytes:
        name = self.vendor.encode()
        if len(name) > 32:
            raise ValidationError(f"vendor name {self.vendor!r} longer than 32 bytes")
        return _RECORD.pack(self.rank, self.node_id, self.device_id, self.nic_id, name)

    @classmethod
    def unpack(cls, blob: bytes) -> DirectoryEntry:
        rank, node, dev, nic, name = _RECORD.unpack(blob)
        return cls(rank, node, dev, VendorId(name.rstrip(b"\0").decode()), nic)


@dataclass(frozen=True)
class GlobalDirectory:
    entries: tuple[DirectoryEntry, ...]

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, rank: int) -> DirectoryEntry:
        return self.entries[rank]

    def vendor(self, rank: int) -> VendorId:
        return self.entries[rank].vendor

    def to_bytes(self) -> bytes:
        return b"".join(e.pack() for e in self.entries)


def _local_entry(topology: ClusterTopology, rank: int) -> DirectoryEntry:
    d = device_of_rank(topology, rank)
    return DirectoryEntry(rank, d.node_id, d.device_id, d.vendor, d.nic_id)


def directory_from_topology(topology: ClusterTopology) -> GlobalDirectory:
    """The directory every rank should agree on, computed offline."""
    return GlobalDirectory(tuple(_local_entry(topology, r) for r in range(topology.world_size)))


def build_directory(net: BootstrapNet, topology: ClusterTopology) -> GlobalDirectory:
    blobs = bootstrap_allgather(net, _local_entry(topology, net.rank).pack())
    return GlobalDirectory(tuple(DirectoryEntry.unpack(b) for b in blobs))


def run_ranks(world_size: int, fn: Callable[[int], T], order: list[int] | None = None) -> list[T]:
    """Run ``fn(rank)`` in one thread per rank; return results in rank order.

    ``order`` fixes the thread start order.  The first exception raised by any
    rank is re-raised after all threads finish.
    """
    order = list(range(world_size)) if order is None else order
    with ThreadPoolExecutor(max_workers=max(world_size, 1)) as pool:
        futures = {r: pool.submit(fn, r) for r in order}
        results = {}
        errors = []
        for r in range(world_size):
            try:
                results[r] = futures[r].result()
            except BaseException as e:  # noqa: BLE001 - re-raised below
                errors.append(e)
    if errors:
        raise errors[0]
    return [results[r] for r in range(world_size)]


_coord_ids = itertools.count()
_coord_lock = threading.Lock()


def fresh_coordinator(prefix: str = "world") -> str:
    with _coord_lock:
        return f"local://{prefix}-{next(_coord_ids)}"


def bootstrap_world(topology: ClusterTopology, coordinator: str | None = None, timeout: float = DEFAULT_TIMEOUT) -> GlobalDirectory:
    """Rendezvous every rank of ``topology`` and check directory consensus."""
    coordinator = coordinator or os.environ.get("HETCOMM_COORD") or fresh_coordinator()
    n = topology.world_size

    def init(rank: int) -> bytes:
        net = rendezvous(rank, n, coordinator, timeout)
        return build_directory(net, topology).to_bytes()

    blobs = run_ranks(n, init)
    if len(set(blobs)) != 1:
        raise ValidationError("ranks disagree on the global directory")
    size = _RECORD.size
    return GlobalDirectory(tuple(DirectoryEntry.unpack(blobs[0][i * size : (i + 1) * size]) for i in range(n)))
