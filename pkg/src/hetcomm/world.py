"""A simulated cluster: one adaptor bundle per vendor, shared transport, directory.

Library calls take the ``World`` plus explicit rank ids and act on behalf of
those ranks.  Bulk-synchronous operations (collectives) receive every member's
input at once.  Per-rank simulated clocks live in ``world.clock``.
"""

from __future__ import annotations

from collections import defaultdict

from .adaptors import CCLAdaptor, DeviceAdaptor, MrHandle, NetPlugin, QueuePair, Space, VendorAdaptors, load_adaptors
from .bootstrap import GlobalDirectory, bootstrap_world, directory_from_topology
from .p2p import ChunkConfig, TransferPath, assign_nic
from .topology import ClusterTopology, device_of_rank
from .transport import Transport


class World:
    def __init__(
        self,
        topology: ClusterTopology,
        path: TransferPath | str = TransferPath.DEVICE_DIRECT,
        chunk: ChunkConfig | None = None,
        mem_cap_bytes: int | None = None,
        bootstrap: bool = True,
        coordinator: str | None = None,
    ):
        self.topology = topology
        self.path = TransferPath.parse(path)
        self.chunk = chunk or ChunkConfig()
        self.transport = Transport()
        vendors = sorted({d.vendor for d in topology.devices})
        self.adaptors: dict[str, VendorAdaptors] = {
            v: load_adaptors(v, topology, self.transport, mem_cap_bytes) for v in vendors
        }
        self.directory: GlobalDirectory = (
            bootstrap_world(topology, coordinator) if bootstrap else directory_from_topology(topology)
        )
        self.nic_free: dict[tuple[int, int], float] = defaultdict(float)
        self.posted_recvs: dict = {}
        self._slots: dict[tuple[int, int, int, str], list] = {}
        self._qps: dict[tuple[int, int], tuple[QueuePair, QueuePair]] = {}

    @property
    def world_size(self) -> int:
        return self.topology.world_size

    @property
    def clock(self):
        return self.transport.clock

    @property
    def trace(self):
        return self.transport.trace

    def vendor(self, rank: int) -> str:
        return self.directory.vendor(rank)

    def device(self, rank: int) -> DeviceAdaptor:
        return self.adaptors[self.vendor(rank)].device

    def net(self, rank: int) -> NetPlugin:
        return self.adaptors[self.vendor(rank)].net

    def ccl(self, rank: int) -> CCLAdaptor:
        return self.adaptors[self.vendor(rank)].ccl

    def nic_keys(self, src: int, dst: int) -> tuple[tuple[int, int], ...]:
        return tuple(
            (device_of_rank(self.topology, r).node_id, assign_nic(self.topology, r)) for r in (src, dst)
        )

    def commit(self, src: int, dst: int, t_end: float, nic_keys=()) -> None:
        """Mark both endpoints (and the NICs they used) busy until ``t_end``."""
        self.clock.advance_to(src, t_end)
        self.clock.advance_to(dst, t_end)
        for k in nic_keys:
            self.nic_free[k] = max(self.nic_free[k], t_end)

    def chunk_slots(self, rank: int, cfg: ChunkConfig) -> list[MrHandle]:
        """Registered chunk buffers (one per in-flight slot), allocated once."""
        key = (rank, cfg.chunk_size_bytes, cfg.chunks_in_flight, "chunk")
        if key not in self._slots:
            from .p2p import HEADER

            dev, net = self.device(rank), self.net(rank)
            self._slots[key] = [
                net.net_register(dev.dev_alloc(rank, HEADER.size + cfg.chunk_size_bytes, Space.CHUNK))
                for _ in range(cfg.chunks_in_flight)
            ]
        return self._slots[key]

    def host_slots(self, rank: int, cfg: ChunkConfig):
        key = (rank, cfg.chunk_size_bytes, cfg.chunks_in_flight, "host")
        if key not in self._slots:
            dev = self.device(rank)
            self._slots[key] = [
                dev.dev_alloc(rank, cfg.chunk_size_bytes, Space.HOST) for _ in range(cfg.chunks_in_flight)
            ]
        return self._slots[key]

    def queue_pair(self, src: int, dst: int) -> tuple[QueuePair, QueuePair]:
        """QP endpoints ``(at src, at dst)`` for traffic from ``src`` to ``dst``."""
        if (src, dst) not in self._qps:
            a, b = self.net(src).net_connect(src, dst)
            self._qps[(src, dst)] = (a, b)
        return self._qps[(src, dst)]

    def reset_clocks(self) -> None:
        self.clock.reset()
        self.nic_free.clear()
