from __future__ import annotations

import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from hetcomm.errors import ParseError, RankOutOfRange, ValidationError
from hetcomm.topology import (
    LinkKind,
    device_of_rank,
    load_topology,
    make_topology,
    serialize_topology,
    topology_to_dict,
)


def test_testbed_shape(testbed):
    assert testbed.world_size == 16
    assert testbed.node_ids == [0, 1]
    assert testbed.link(1, LinkKind.INTRA_NODE_FABRIC).bandwidth == 900
    assert testbed.link(0, LinkKind.INTRA_NODE_FABRIC).bandwidth == 128
    assert testbed.link(0, LinkKind.NIC_NETWORK).bandwidth == 100
    assert testbed.nic_count(0) == testbed.nic_count(1) == 8


def test_single_device_needs_no_nic():
    t = load_topology(
        """
nodes:
  - id: 0
    vendor: nvidia
    devices: 1
    fabric_bw_gbps: 900
    fabric_latency_us: 1
    host_bw_gbps: 64
"""
    )
    assert t.world_size == 1
    with pytest.raises(KeyError):
        t.link(0, LinkKind.NIC_NETWORK)


def test_nic_id_out_of_range():
    doc = topology_to_dict(make_topology(["amd"], devices_per_node=8, nic_count=8))
    doc["nodes"][0]["devices"] = [{"id": i, "nic_id": 9 if i == 3 else i} for i in range(8)]
    with pytest.raises(ValidationError):
        load_topology(yaml.safe_dump(doc))


@pytest.mark.parametrize(
    "text",
    ["nodes: [", "nodes:\n  - id: 0\n    vendor: amd\n   devices: 2"],
)
def test_malformed_yaml(text):
    with pytest.raises(ParseError):
        load_topology(text)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d["nodes"][0].pop("vendor"),
        lambda d: d["nodes"][0].update(fabric_bw_gbps=-1),
        lambda d: d["nodes"][1].update(id=0),
        lambda d: d["nodes"][0].update(nic_count=0),
        lambda d: d.update(nodes=[]),
    ],
)
def test_invalid_documents(testbed, mutate):
    doc = topology_to_dict(testbed)
    mutate(doc)
    with pytest.raises(ValidationError):
        load_topology(yaml.safe_dump(doc))


@pytest.mark.parametrize("rank,node,dev", [(0, 0, 0), (7, 0, 7), (8, 1, 0), (15, 1, 7)])
def test_device_of_rank(testbed, rank, node, dev):
    d = device_of_rank(testbed, rank)
    assert (d.node_id, d.device_id) == (node, dev)


@pytest.mark.parametrize("rank", [-1, 16, 100])
def test_rank_out_of_range(testbed, rank):
    with pytest.raises(RankOutOfRange):
        device_of_rank(testbed, rank)


topologies = st.lists(
    st.tuples(st.sampled_from(["amd", "nvidia", "acme"]), st.integers(1, 6), st.integers(1, 6)),
    min_size=1,
    max_size=4,
).map(
    lambda nodes: make_topology(
        [v for v, _, _ in nodes], devices_per_node=[n for _, n, _ in nodes], nic_count=None
    )
)


@settings(max_examples=60, deadline=None)
@given(topologies)
def test_round_trip(t):
    assert load_topology(serialize_topology(t)) == t


@settings(max_examples=60, deadline=None)
@given(topologies)
def test_rank_bijection_and_node_homogeneity(t):
    seen = {(device_of_rank(t, r).node_id, device_of_rank(t, r).device_id) for r in range(t.world_size)}
    assert seen == {(d.node_id, d.device_id) for d in t.devices}
    assert len(seen) == t.world_size
    for n in t.node_ids:
        assert len({d.vendor for d in t.devices_on(n)}) == 1
    ranks = [t.rank_of(*key) for key in sorted(seen)]
    assert ranks == list(range(t.world_size))


def test_fast_vendor_default_is_faster(testbed):
    amd, nv = device_of_rank(testbed, 0), device_of_rank(testbed, 8)
    assert nv.layer_time_fwd < amd.layer_time_fwd
    assert nv.layer_time_bwd < amd.layer_time_bwd


@pytest.mark.parametrize("key", ["mem_bw_gbps", "layer_time_fwd_ms", "host_bw_gbps", "nic_bw_gbps"])
def test_non_positive_values_rejected(testbed, key):
    doc = topology_to_dict(testbed)
    doc["nodes"][0][key] = 0
    for dev in doc["nodes"][0]["devices"]:
        dev.pop(key, None)
    with pytest.raises(ValidationError):
        load_topology(yaml.safe_dump(doc))
