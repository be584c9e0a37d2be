"""Point-to-point transfers between ranks.

Two heterogeneous paths exist.  ``cpu_forwarding`` stages every chunk through
host memory: D2H copy, host network send, H2D copy.  ``device_direct`` keeps
the data on the device: D2D copy into a registered chunk buffer, NIC transfer
from that buffer, D2D copy out on the receiver.  Both are chunked and
pipelined with at most ``chunks_in_flight`` chunks outstanding.  Same-vendor
pairs bypass both and use the vendor CCL.

Bytes really move (framed with a chunk header) while simulated time is
derived from the topology; the two never influence each other.
"""

from __future__ import annotations

import enum
import struct
import warnings
from collections import deque
from dataclasses import dataclass
from typing import TYPE_CHECKING

from .adaptors import DeviceBuffer, MrHandle, Space, _link_between
from .errors import NoMatchingRecv, PathMismatch, SelfSend, SizeMismatch
from .topology import ClusterTopology, LinkKind, device_of_rank
from .transport import Segment, TransferRecord, chunk_schedule, copy_time, wire_time

if TYPE_CHECKING:
    from .world import World

MiB = 1 << 20

MAGIC = 0x48435043
HEADER = struct.Struct(">IBIII")


class TransferPath(str, enum.Enum):
    CPU_FORWARDING = "cpu_forwarding"
    DEVICE_DIRECT = "device_direct"

    @property
    def tag(self) -> int:
        return 0 if self is TransferPath.CPU_FORWARDING else 1

    @classmethod
    def from_tag(cls, tag: int) -> TransferPath:
        if tag not in (0, 1):
            raise ValueError(f"unknown path tag {tag}")
        return cls.CPU_FORWARDING if tag == 0 else cls.DEVICE_DIRECT

    @classmethod
    def parse(cls, text: str | TransferPath) -> TransferPath:
        aliases = {"cpu": cls.CPU_FORWARDING, "direct": cls.DEVICE_DIRECT}
        return aliases.get(text) or cls(text)


CCL_PATH = "ccl"


@dataclass(frozen=True)
class ChunkConfig:
    chunk_size_bytes: int = 4 * MiB
    chunks_in_flight: int = 2

    def __post_init__(self):
        if self.chunk_size_bytes <= 0:
            raise ValueError("chunk_size_bytes must be > 0")
        if self.chunks_in_flight < 1:
            raise ValueError("chunks_in_flight must be >= 1")

    def num_chunks(self, size_bytes: int) -> int:
        return max(1, -(-size_bytes // self.chunk_size_bytes))

    def chunk_sizes(self, size_bytes: int) -> list[int]:
        n = self.num_chunks(size_bytes)
        c = self.chunk_size_bytes
        return [min(c, size_bytes - i * c) for i in range(n)] if size_bytes else [0]


def encode_chunk(path: TransferPath, index: int, total: int, payload: bytes) -> bytes:
    return HEADER.pack(MAGIC, path.tag, index, total, len(payload)) + bytes(payload)


def decode_chunk(frame: bytes) -> tuple[TransferPath, int, int, bytes]:
    magic, tag, index, total, length = HEADER.unpack_from(frame)
    if magic != MAGIC:
        raise ValueError(f"bad chunk magic 0x{magic:08x}")
    payload = bytes(frame[HEADER.size : HEADER.size + length])
    if len(payload) != length:
        raise ValueError("truncated chunk frame")
    return TransferPath.from_tag(tag), index, total, payload


class NicSharingWarning(UserWarning):
    pass


def assign_nic(topology: ClusterTopology, rank: int) -> int:
    """NIC used by ``rank`` for cross-node point-to-point traffic."""
    dev = device_of_rank(topology, rank)
    nics = topology.nic_count(dev.node_id)
    if nics < len(topology.devices_on(dev.node_id)):
        warnings.warn(
            f"node {dev.node_id}: {nics} NICs for {len(topology.devices_on(dev.node_id))} devices; "
            "NICs are shared round-robin",
            NicSharingWarning,
            stacklevel=2,
        )
    return dev.nic_id


# -- timing model -------------------------------------------------------------

_KINDS = {
    TransferPath.CPU_FORWARDING: (LinkKind.HOST_BRIDGE.value, LinkKind.NIC_NETWORK.value, LinkKind.HOST_BRIDGE.value),
    TransferPath.DEVICE_DIRECT: ("device_copy", LinkKind.NIC_NETWORK.value, "device_copy"),
}


def chunk_stage_times(
    topology: ClusterTopology, src: int, dst: int, size_bytes: int, path: TransferPath, cfg: ChunkConfig
) -> list[list[float]]:
    """Per-chunk ``[copy-out, wire, copy-in]`` durations in microseconds."""
    s, d = device_of_rank(topology, src), device_of_rank(topology, dst)
    wire = _link_between(topology, src, dst)
    if path is TransferPath.CPU_FORWARDING:
        bw_out, bw_in = s.host_link_bandwidth, d.host_link_bandwidth
    else:
        bw_out, bw_in = s.mem_bandwidth, d.mem_bandwidth
    return [
        [copy_time(bw_out, n), wire_time(wire, n), copy_time(bw_in, n)]
        for n in cfg.chunk_sizes(size_bytes)
    ]


def transfer_time(
    topology: ClusterTopology,
    src: int,
    dst: int,
    size_bytes: int,
    path: TransferPath | str,
    cfg: ChunkConfig | None = None,
) -> float:
    """Simulated duration (us) of one transfer on an idle network; moves no data."""
    cfg = cfg or ChunkConfig()
    if path == CCL_PATH:
        return wire_time(_link_between(topology, src, dst), size_bytes)
    stages = chunk_stage_times(topology, src, dst, size_bytes, TransferPath(path), cfg)
    return chunk_schedule(stages, cfg.chunks_in_flight)[-1][-1][1]


def _build_record(world: World, src: int, dst: int, size: int, path: TransferPath, cfg: ChunkConfig) -> TransferRecord:
    topo = world.topology
    nic_keys = world.nic_keys(src, dst)
    t0 = max([world.clock.sync((src, dst)), *(world.nic_free[k] for k in nic_keys)])
    stages = chunk_stage_times(topo, src, dst, size, path, cfg)
    sched = chunk_schedule(stages, cfg.chunks_in_flight, start=t0)
    segments = [
        Segment(kind, end - start, start, end)
        for row in sched
        for kind, (start, end) in zip(_KINDS[path], row)
    ]
    t_end = sched[-1][-1][1]
    world.commit(src, dst, t_end, nic_keys)
    return TransferRecord(src, dst, path.value, size, t0, t_end, segments)


# -- data plane ---------------------------------------------------------------


@dataclass(eq=False)
class RecvHandle:
    src: int
    dst: int
    size_bytes: int
    path: TransferPath
    buffer: DeviceBuffer | None = None
    record: TransferRecord | None = None

    @property
    def done(self) -> bool:
        return self.buffer is not None


def p2p_recv(world: World, dst: int, src: int, size_bytes: int, path: TransferPath | str) -> RecvHandle:
    """Post a receive at ``dst``; completed by the matching :func:`p2p_send`."""
    handle = RecvHandle(src, dst, size_bytes, TransferPath.parse(path))
    world.posted_recvs.setdefault((src, dst), deque()).append(handle)
    return handle


def p2p_send(
    world: World,
    src: int,
    dst: int,
    payload: DeviceBuffer,
    path: TransferPath | str,
    cfg: ChunkConfig | None = None,
) -> tuple[DeviceBuffer, TransferRecord]:
    """Send ``payload`` to the receive posted at ``dst`` over a heterogeneous path."""
    path = TransferPath.parse(path)
    cfg = cfg or world.chunk
    if src == dst:
        raise SelfSend(f"rank {src} sending to itself")
    if payload.owner_rank != src:
        raise SizeMismatch(f"payload lives on rank {payload.owner_rank}, not {src}")
    queue = world.posted_recvs.get((src, dst))
    if not queue:
        raise NoMatchingRecv(f"no receive posted at rank {dst} for rank {src}")
    handle = queue[0]
    if handle.size_bytes != payload.size_bytes:
        raise SizeMismatch(f"send of {payload.size_bytes} bytes vs posted recv of {handle.size_bytes}")
    queue.popleft()
    out = world.device(dst).dev_alloc(dst, payload.size_bytes, Space.DEVICE)
    out.dtype = payload.dtype
    if path is TransferPath.DEVICE_DIRECT:
        _move_direct(world, src, dst, payload, out, handle.path, cfg)
    else:
        _move_forwarded(world, src, dst, payload, out, handle.path, cfg)
    record = _build_record(world, src, dst, payload.size_bytes, path, cfg)
    world.trace.append(record)
    handle.buffer, handle.record = out, record
    return out, record


def _check_frame(frame: bytes, expected: TransferPath, index: int, total: int) -> bytes:
    got, idx, tot, data = decode_chunk(frame)
    if got is not expected:
        raise PathMismatch(f"sender used {got.value}, receiver posted {expected.value}")
    if (idx, tot) != (index, total):
        raise ValueError(f"chunk {idx}/{tot} arrived, expected {index}/{total}")
    return data


def _move_direct(world, src, dst, payload, out, expected, cfg):
    dev_s, dev_d = world.device(src), world.device(dst)
    slots_s = world.chunk_slots(src, cfg)
    slots_d = world.chunk_slots(dst, cfg)
    qp_s, qp_d = world.queue_pair(src, dst)
    net_s, net_d = world.net(src), world.net(dst)
    sizes = cfg.chunk_sizes(payload.size_bytes)
    total, off = len(sizes), 0
    for i, n in enumerate(sizes):
        mr_s: MrHandle = slots_s[i % len(slots_s)]
        mr_d: MrHandle = slots_d[i % len(slots_d)]
        chunk_s, chunk_d = mr_s.buffer_ref, mr_d.buffer_ref
        # host control plane writes the header; the payload stays on device
        chunk_s.contents[: HEADER.size] = HEADER.pack(MAGIC, TransferPath.DEVICE_DIRECT.tag, i, total, n)
        dev_s.dev_copy(payload, chunk_s, n, src_offset=off, dst_offset=HEADER.size)
        recv_ev = net_d.net_post_recv(qp_d, mr_d, HEADER.size + n)
        net_s.net_post_send(qp_s, mr_s, HEADER.size + n)
        assert recv_ev.done
        _check_frame(chunk_d.contents[: HEADER.size + n], expected, i, total)
        dev_d.dev_copy(chunk_d, out, n, src_offset=HEADER.size, dst_offset=off)
        off += n


def _move_forwarded(world, src, dst, payload, out, expected, cfg):
    dev_s, dev_d = world.device(src), world.device(dst)
    host_s = world.host_slots(src, cfg)
    host_d = world.host_slots(dst, cfg)
    sizes = cfg.chunk_sizes(payload.size_bytes)
    total, off = len(sizes), 0
    for i, n in enumerate(sizes):
        hs, hd = host_s[i % len(host_s)], host_d[i % len(host_d)]
        dev_s.dev_copy(payload, hs, n, src_offset=off)
        world.transport.deliver(src, dst, encode_chunk(TransferPath.CPU_FORWARDING, i, total, hs.contents[:n]))
        frame = world.transport.recv(dst, src)
        hd.contents[:n] = _check_frame(frame, expected, i, total)
        dev_d.dev_copy(hd, out, n, dst_offset=off)
        off += n


def p2p_transfer(
    world: World,
    src: int,
    dst: int,
    payload: DeviceBuffer,
    path: TransferPath | str,
    cfg: ChunkConfig | None = None,
) -> tuple[DeviceBuffer, TransferRecord]:
    """Post the matching receive and send in one call."""
    p2p_recv(world, dst, src, payload.size_bytes, path)
    return p2p_send(world, src, dst, payload, path, cfg)


def ccl_send(world: World, src: int, dst: int, payload: DeviceBuffer) -> tuple[DeviceBuffer, TransferRecord]:
    """Homogeneous transfer through the vendor CCL."""
    out = world.ccl(src).ccl_p2p(src, dst, payload)
    link = _link_between(world.topology, src, dst)
    nic_keys = world.nic_keys(src, dst) if link.kind is LinkKind.NIC_NETWORK else ()
    t0 = max([world.clock.sync((src, dst)), *(world.nic_free[k] for k in nic_keys)])
    dur = wire_time(link, payload.size_bytes)
    world.commit(src, dst, t0 + dur, nic_keys)
    record = TransferRecord(src, dst, CCL_PATH, payload.size_bytes, t0, t0 + dur, [Segment(link.kind.value, dur, t0, t0 + dur)])
    world.trace.append(record)
    return out, record


def p2p_dispatch(
    world: World, src: int, dst: int, payload: DeviceBuffer, cfg: ChunkConfig | None = None
) -> tuple[DeviceBuffer, TransferRecord]:
    """Route same-vendor pairs to the CCL and cross-vendor pairs to the global path."""
    if src == dst:
        raise SelfSend(f"rank {src} sending to itself")
    if world.directory.vendor(src) == world.directory.vendor(dst):
        return ccl_send(world, src, dst, payload)
    return p2p_transfer(world, src, dst, payload, world.path, cfg)
