"""Declarative description of a simulated heterogeneous cluster.

The config is YAML (JSON documents are accepted too, being valid YAML).  A
node is one machine with a single vendor; every device on it shares that
vendor and the node's fabric, host bridge and NIC specs::

    nodes:
      - id: 0
        vendor: amd
        devices: 8
        fabric_bw_gbps: 128
        fabric_latency_us: 1.0
        host_bw_gbps: 64
        nic_count: 8
        nic_bw_gbps: 100
        nic_latency_us: 5.0
        layer_time_fwd_ms: 3.3
        layer_time_bwd_ms: 6.6

``devices`` is either a count or a list of per-device mappings with optional
``id``, ``nic_id``, ``mem_bw_gbps``, ``layer_time_fwd_ms`` and
``layer_time_bwd_ms`` overrides.  ``mem_bw_gbps`` may also be given per node.
Keys left out fall back to the built-in vendor defaults in :data:`VENDORS`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any, NewType

import yaml

from .errors import ParseError, RankOutOfRange, ValidationError

VendorId = NewType("VendorId", str)

GB = 1e9


class LinkKind(str, enum.Enum):
    INTRA_NODE_FABRIC = "intra_node_fabric"
    HOST_BRIDGE = "host_bridge"
    NIC_NETWORK = "nic_network"


@dataclass(frozen=True)
class VendorDefaults:
    fabric_bw_gbps: float
    fabric_latency_us: float
    host_bw_gbps: float
    mem_bw_gbps: float
    layer_time_fwd_ms: float
    layer_time_bwd_ms: float


# Layer times are fitted placeholders, not measurements; "nvidia" is the fast
# vendor and must stay strictly faster per layer than "amd".
VENDORS: dict[str, VendorDefaults] = {
    "nvidia": VendorDefaults(
        fabric_bw_gbps=900.0,
        fabric_latency_us=1.0,
        host_bw_gbps=64.0,
        mem_bw_gbps=3000.0,
        layer_time_fwd_ms=3.0,
        layer_time_bwd_ms=6.0,
    ),
    "amd": VendorDefaults(
        fabric_bw_gbps=128.0,
        fabric_latency_us=1.0,
        host_bw_gbps=64.0,
        mem_bw_gbps=6000.0,
        layer_time_fwd_ms=3.3,
        layer_time_bwd_ms=6.6,
    ),
}


@dataclass(frozen=True)
class LinkSpec:
    kind: LinkKind
    bandwidth: float  # GB/s
    latency: float = 0.0  # us

    def __post_init__(self):
        if not (math.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise ValidationError(f"{self.kind.value}: bandwidth must be finite and > 0, got {self.bandwidth}")
        if not (math.isfinite(self.latency) and self.latency >= 0):
            raise ValidationError(f"{self.kind.value}: latency must be >= 0, got {self.latency}")


@dataclass(frozen=True)
class DeviceDescriptor:
    device_id: int
    node_id: int
    vendor: VendorId
    mem_bandwidth: float  # GB/s
    host_link_bandwidth: float  # GB/s
    layer_time_fwd: float  # ms/layer
    layer_time_bwd: float  # ms/layer
    nic_id: int


@dataclass(frozen=True)
class ClusterTopology:
    devices: tuple[DeviceDescriptor, ...]
    links: tuple[tuple[tuple[int, LinkKind], LinkSpec], ...]
    nic_counts: tuple[tuple[int, int], ...]

    def __post_init__(self):
        _validate(self)

    @cached_property
    def _link_map(self) -> dict[tuple[int, LinkKind], LinkSpec]:
        return dict(self.links)

    @cached_property
    def _ranked(self) -> tuple[DeviceDescriptor, ...]:
        return tuple(sorted(self.devices, key=lambda d: (d.node_id, d.device_id)))

    @property
    def world_size(self) -> int:
        return len(self.devices)

    @property
    def node_ids(self) -> list[int]:
        return sorted({d.node_id for d in self.devices})

    @property
    def nic_count_per_node(self) -> int:
        """Smallest NIC count over all nodes."""
        return min(n for _, n in self.nic_counts)

    def nic_count(self, node_id: int) -> int:
        return dict(self.nic_counts)[node_id]

    def link(self, node_id: int, kind: LinkKind | str) -> LinkSpec:
        return self._link_map[(node_id, LinkKind(kind))]

    def devices_on(self, node_id: int) -> list[DeviceDescriptor]:
        return [d for d in self._ranked if d.node_id == node_id]

    def node_vendor(self, node_id: int) -> VendorId:
        return self.devices_on(node_id)[0].vendor

    def rank_of(self, node_id: int, device_id: int) -> int:
        for rank, d in enumerate(self._ranked):
            if (d.node_id, d.device_id) == (node_id, device_id):
                return rank
        raise KeyError((node_id, device_id))

    def vendor_of(self, rank: int) -> VendorId:
        return device_of_rank(self, rank).vendor


def _validate(t: ClusterTopology) -> None:
    if not t.devices:
        raise ValidationError("topology has no devices")
    seen = set()
    for d in t.devices:
        key = (d.node_id, d.device_id)
        if key in seen:
            raise ValidationError(f"duplicate device {key}")
        seen.add(key)
        if d.device_id < 0 or d.node_id < 0 or d.nic_id < 0:
            raise ValidationError(f"negative id in device {key}")
        for name in ("mem_bandwidth", "host_link_bandwidth", "layer_time_fwd", "layer_time_bwd"):
            v = getattr(d, name)
            if not (math.isfinite(v) and v > 0):
                raise ValidationError(f"device {key}: {name} must be > 0, got {v}")
        if not d.vendor:
            raise ValidationError(f"device {key}: empty vendor")
    counts = dict(t.nic_counts)
    links = dict(t.links)
    nodes = {d.node_id for d in t.devices}
    for node in nodes:
        vendors = {d.vendor for d in t.devices if d.node_id == node}
        if len(vendors) != 1:
            raise ValidationError(f"node {node} mixes vendors {sorted(vendors)}")
        if counts.get(node, 0) < 1:
            raise ValidationError(f"node {node}: nic_count must be >= 1")
        for d in t.devices:
            if d.node_id == node and d.nic_id >= counts[node]:
                raise ValidationError(
                    f"device ({node}, {d.device_id}) references nic_id={d.nic_id} "
                    f"but node {node} has {counts[node]} NICs"
                )
        for kind in (LinkKind.INTRA_NODE_FABRIC, LinkKind.HOST_BRIDGE):
            if (node, kind) not in links:
                raise ValidationError(f"node {node}: missing {kind.value} link")
        if len(nodes) > 1 and (node, LinkKind.NIC_NETWORK) not in links:
            raise ValidationError(f"node {node}: multi-node cluster requires nic_bw_gbps")


def _positive(node: dict, key: str, default: float | None, where: str) -> float:
    value = node.get(key, default)
    if value is None:
        raise ValidationError(f"{where}: missing required key {key!r}")
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ValidationError(f"{where}: {key} must be a number, got {value!r}") from None
    if not math.isfinite(value) or value < 0 or (value == 0 and not key.endswith("latency_us")):
        raise ValidationError(f"{where}: {key} must be positive, got {value!r}")
    return value


def topology_from_dict(doc: Any) -> ClusterTopology:
    if not isinstance(doc, dict) or not isinstance(doc.get("nodes"), list) or not doc["nodes"]:
        raise ValidationError("config must contain a non-empty 'nodes' list")
    devices: list[DeviceDescriptor] = []
    links: dict[tuple[int, LinkKind], LinkSpec] = {}
    nic_counts: dict[int, int] = {}
    multi_node = len(doc["nodes"]) > 1
    for i, node in enumerate(doc["nodes"]):
        where = f"nodes[{i}]"
        if not isinstance(node, dict):
            raise ValidationError(f"{where}: expected a mapping")
        for key in ("id", "vendor", "devices"):
            if key not in node:
                raise ValidationError(f"{where}: missing required key {key!r}")
        node_id = node["id"]
        if not isinstance(node_id, int) or node_id < 0:
            raise ValidationError(f"{where}: id must be an integer >= 0")
        if node_id in nic_counts:
            raise ValidationError(f"{where}: duplicate node id {node_id}")
        vendor = str(node["vendor"])
        if not vendor:
            raise ValidationError(f"{where}: vendor must be non-empty")
        dflt = VENDORS.get(vendor)

        def g(key, attr=None):
            return _positive(node, key, getattr(dflt, attr or key, None) if dflt else None, where)

        fabric = LinkSpec(LinkKind.INTRA_NODE_FABRIC, g("fabric_bw_gbps"), g("fabric_latency_us"))
        host_bw = g("host_bw_gbps")
        links[(node_id, LinkKind.INTRA_NODE_FABRIC)] = fabric
        links[(node_id, LinkKind.HOST_BRIDGE)] = LinkSpec(LinkKind.HOST_BRIDGE, host_bw, 0.0)
        nic_count = node.get("nic_count", 1)
        if not isinstance(nic_count, int):
            raise ValidationError(f"{where}: nic_count must be an integer")
        nic_counts[node_id] = nic_count
        if multi_node or "nic_bw_gbps" in node:
            links[(node_id, LinkKind.NIC_NETWORK)] = LinkSpec(
                LinkKind.NIC_NETWORK,
                _positive(node, "nic_bw_gbps", None, where),
                _positive(node, "nic_latency_us", 0.0, where),
            )
        # node-level values only act as defaults for device entries
        node_mem = g("mem_bw_gbps") if "mem_bw_gbps" in node or dflt else None
        node_fwd = g("layer_time_fwd_ms") if "layer_time_fwd_ms" in node or dflt else None
        node_bwd = g("layer_time_bwd_ms") if "layer_time_bwd_ms" in node or dflt else None

        entries = node["devices"]
        if isinstance(entries, bool) or not isinstance(entries, (int, list)):
            raise ValidationError(f"{where}: devices must be a count or a list")
        if isinstance(entries, int):
            if entries < 1:
                raise ValidationError(f"{where}: device count must be >= 1")
            entries = [{} for _ in range(entries)]
        if not entries:
            raise ValidationError(f"{where}: device count must be >= 1")
        for j, ent in enumerate(entries):
            if not isinstance(ent, dict):
                raise ValidationError(f"{where}.devices[{j}]: expected a mapping")
            dev_id = ent.get("id", j)
            devices.append(
                DeviceDescriptor(
                    device_id=dev_id,
                    node_id=node_id,
                    vendor=VendorId(vendor),
                    mem_bandwidth=_positive(ent, "mem_bw_gbps", node_mem, where),
                    host_link_bandwidth=host_bw,
                    layer_time_fwd=_positive(ent, "layer_time_fwd_ms", node_fwd, where),
                    layer_time_bwd=_positive(ent, "layer_time_bwd_ms", node_bwd, where),
                    nic_id=ent.get("nic_id", dev_id % max(nic_count, 1)),
                )
            )
    return ClusterTopology(
        devices=tuple(devices),
        links=tuple(sorted(links.items(), key=lambda kv: (kv[0][0], kv[0][1].value))),
        nic_counts=tuple(sorted(nic_counts.items())),
    )


def load_topology(config_text: str) -> ClusterTopology:
    """Parse and validate a topology document."""
    try:
        doc = yaml.safe_load(config_text)
    except yaml.YAMLError as e:
        raise ParseError(f"malformed topology document: {e}") from e
    return topology_from_dict(doc)


def load_topology_file(path: str | Path) -> ClusterTopology:
    return load_topology(Path(path).read_text())


def topology_to_dict(t: ClusterTopology) -> dict:
    nodes = []
    for node_id in t.node_ids:
        fabric = t.link(node_id, LinkKind.INTRA_NODE_FABRIC)
        entry: dict[str, Any] = {
            "id": node_id,
            "vendor": str(t.node_vendor(node_id)),
            "fabric_bw_gbps": fabric.bandwidth,
            "fabric_latency_us": fabric.latency,
            "host_bw_gbps": t.link(node_id, LinkKind.HOST_BRIDGE).bandwidth,
            "nic_count": t.nic_count(node_id),
        }
        if (node_id, LinkKind.NIC_NETWORK) in t._link_map:
            nic = t.link(node_id, LinkKind.NIC_NETWORK)
            entry["nic_bw_gbps"] = nic.bandwidth
            entry["nic_latency_us"] = nic.latency
        entry["devices"] = [
            {
                "id": d.device_id,
                "nic_id": d.nic_id,
                "mem_bw_gbps": d.mem_bandwidth,
                "layer_time_fwd_ms": d.layer_time_fwd,
                "layer_time_bwd_ms": d.layer_time_bwd,
            }
            for d in t.devices_on(node_id)
        ]
        nodes.append(entry)
    return {"nodes": nodes}


def serialize_topology(t: ClusterTopology) -> str:
    return yaml.safe_dump(topology_to_dict(t), sort_keys=False)


def device_of_rank(topology: ClusterTopology, rank: int) -> DeviceDescriptor:
    """Ranks are node-major, then device-major."""
    if not 0 <= rank < topology.world_size:
        raise RankOutOfRange(f"rank {rank} outside [0, {topology.world_size})")
    return topology._ranked[rank]


def make_topology(
    vendors: list[str],
    devices_per_node: int | list[int] = 8,
    nic_count: int | None = None,
    nic_bw_gbps: float = 100.0,
    nic_latency_us: float = 5.0,
    **node_overrides,
) -> ClusterTopology:
    """Build a topology with one node per entry of ``vendors``."""
    if isinstance(devices_per_node, int):
        devices_per_node = [devices_per_node] * len(vendors)
    nodes = []
    for i, (vendor, ndev) in enumerate(zip(vendors, devices_per_node)):
        node = {
            "id": i,
            "vendor": vendor,
            "devices": ndev,
            "nic_count": ndev if nic_count is None else nic_count,
            "nic_bw_gbps": nic_bw_gbps,
            "nic_latency_us": nic_latency_us,
        }
        if vendor not in VENDORS:
            node.update(
                fabric_bw_gbps=200.0,
                fabric_latency_us=1.0,
                host_bw_gbps=64.0,
                mem_bw_gbps=2000.0,
                layer_time_fwd_ms=4.0,
                layer_time_bwd_ms=8.0,
            )
        node.update(node_overrides)
        nodes.append(node)
    return topology_from_dict({"nodes": nodes})


def reference_testbed() -> ClusterTopology:
    """Two 8-GPU nodes, node 0 amd and node 1 nvidia, 8 NICs each at 100 GB/s."""
    return load_topology_file(Path(__file__).parent / "data" / "testbed.yaml")
