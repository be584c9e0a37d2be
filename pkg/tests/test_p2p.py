from __future__ import annotations

import random
import struct
import warnings

import numpy as np
import pytest

from hetcomm.adaptors import DeviceBuffer
from hetcomm.errors import NoMatchingRecv, PathMismatch, SelfSend, SizeMismatch
from hetcomm.p2p import (
    CCL_PATH,
    MAGIC,
    ChunkConfig,
    NicSharingWarning,
    TransferPath,
    assign_nic,
    decode_chunk,
    encode_chunk,
    p2p_dispatch,
    p2p_recv,
    p2p_send,
    p2p_transfer,
    transfer_time,
)
from hetcomm.topology import make_topology
from hetcomm.transport import pipelined_time
from hetcomm.world import World

MiB = 1 << 20
PATHS = list(TransferPath)


def _payload(rank, size, seed=0):
    return DeviceBuffer.from_bytes(rank, random.Random(seed).randbytes(size))


def test_header_wire_format():
    frame = encode_chunk(TransferPath.DEVICE_DIRECT, 3, 7, b"abc")
    assert frame[:4] == bytes.fromhex("48435043")
    assert frame[4] == 1
    assert struct.unpack(">III", frame[5:17]) == (3, 7, 3)
    assert frame[17:] == b"abc"
    assert encode_chunk(TransferPath.CPU_FORWARDING, 0, 1, b"")[4] == 0
    assert decode_chunk(frame) == (TransferPath.DEVICE_DIRECT, 3, 7, b"abc")
    assert MAGIC == 0x48435043


def test_decode_rejects_bad_magic():
    frame = bytearray(encode_chunk(TransferPath.CPU_FORWARDING, 0, 1, b"x"))
    frame[0] ^= 0xFF
    with pytest.raises(ValueError):
        decode_chunk(bytes(frame))


@pytest.mark.parametrize("path", PATHS)
def test_64mib_cross_vendor(world, path):
    payload = _payload(0, 64 * MiB)
    out, rec = p2p_transfer(world, 0, 8, payload, path)
    assert out.tobytes() == payload.tobytes() and out.owner_rank == 8
    chunks = 16
    if path is TransferPath.DEVICE_DIRECT:
        assert rec.count("host_bridge") == 0
        assert rec.count("device_copy") == 2 * chunks
    else:
        assert rec.count("host_bridge") == 2 * chunks
    assert rec.count("nic_network") == chunks


def test_direct_faster_than_forwarding(testbed):
    t = {p: transfer_time(testbed, 0, 8, 64 * MiB, p) for p in PATHS}
    assert t[TransferPath.DEVICE_DIRECT] < t[TransferPath.CPU_FORWARDING]
    # 16 chunks of 4 MiB: copy-out, wire, copy-in pipeline
    c = 4 * MiB
    direct = [c / 6000e9 * 1e6, 5 + c / 100e9 * 1e6, c / 3000e9 * 1e6]
    fwd = [c / 64e9 * 1e6, 5 + c / 100e9 * 1e6, c / 64e9 * 1e6]
    assert t[TransferPath.DEVICE_DIRECT] == pytest.approx(pipelined_time(direct, 16), rel=1e-12)
    assert t[TransferPath.CPU_FORWARDING] == pytest.approx(pipelined_time(fwd, 16), rel=1e-12)


@pytest.mark.parametrize("path", PATHS)
def test_zero_bytes(world, path):
    out, rec = p2p_transfer(world, 0, 8, DeviceBuffer(0, 0), path)
    assert out.size_bytes == 0
    assert rec.duration == pytest.approx(5.0)


def test_record_timing_matches_model(world):
    _, rec = p2p_transfer(world, 0, 8, _payload(0, 10 * MiB), TransferPath.DEVICE_DIRECT)
    assert rec.duration == pytest.approx(transfer_time(world.topology, 0, 8, 10 * MiB, "device_direct"))
    assert world.clock.now(0) == world.clock.now(8) == rec.t_end


@pytest.mark.parametrize("seed", range(5))
def test_path_equivalence_random(small_world, seed):
    rng = random.Random(seed)
    cfg = ChunkConfig(chunk_size_bytes=rng.choice([1, 7, 4096, 65536]), chunks_in_flight=rng.randint(1, 3))
    size = rng.randint(0, 200_000)
    payload = _payload(0, size, seed)
    outs = [p2p_transfer(small_world, 0, 2, payload, p, cfg)[0].tobytes() for p in PATHS]
    assert outs[0] == outs[1] == payload.tobytes()


def test_path_mismatch(world):
    p2p_recv(world, 8, 0, 16, TransferPath.CPU_FORWARDING)
    with pytest.raises(PathMismatch):
        p2p_send(world, 0, 8, _payload(0, 16), TransferPath.DEVICE_DIRECT)


def test_send_without_recv(world):
    with pytest.raises(NoMatchingRecv):
        p2p_send(world, 0, 8, _payload(0, 16), TransferPath.DEVICE_DIRECT)


def test_send_size_mismatch(world):
    p2p_recv(world, 8, 0, 8, "direct")
    with pytest.raises(SizeMismatch):
        p2p_send(world, 0, 8, _payload(0, 16), "direct")


def test_dispatch_routing(world):
    _, rec = p2p_dispatch(world, 0, 1, _payload(0, 1024))
    assert rec.path == CCL_PATH
    _, rec = p2p_dispatch(world, 0, 8, _payload(0, 1024))
    assert rec.path == TransferPath.DEVICE_DIRECT.value
    world.path = TransferPath.CPU_FORWARDING
    _, rec = p2p_dispatch(world, 8, 0, _payload(8, 1024))
    assert rec.path == "cpu_forwarding"
    with pytest.raises(SelfSend):
        p2p_dispatch(world, 0, 0, _payload(0, 4))


def test_dispatch_preserves_arrays(world):
    arr = np.arange(100, dtype=np.float64)
    out, _ = p2p_dispatch(world, 3, 12, DeviceBuffer.from_array(3, arr))
    np.testing.assert_array_equal(out.array(), arr)


def test_assign_nic_one_per_device(testbed):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert [assign_nic(testbed, r) for r in range(8)] == list(range(8))


def test_assign_nic_round_robin_warns():
    t = make_topology(["amd", "nvidia"], devices_per_node=8, nic_count=4)
    with pytest.warns(NicSharingWarning):
        nics = [assign_nic(t, r) for r in range(8)]
    assert nics == [i % 4 for i in range(8)]


def test_assign_nic_single():
    t = make_topology(["nvidia"], devices_per_node=1, nic_count=1)
    assert assign_nic(t, 0) == 0


def _concurrent_makespan(topology, n):
    w = World(topology, bootstrap=False)
    recs = [p2p_transfer(w, i, 8 + i, DeviceBuffer(i, 16 * MiB), "direct")[1] for i in range(n)]
    return recs, max(r.t_end for r in recs)


def test_mpdt_overlap(testbed):
    recs, span = _concurrent_makespan(testbed, 8)
    single = recs[0].duration
    assert len({assign_nic(testbed, i) for i in range(8)}) == 8
    assert span < 8 * single
    assert all(r.t_start == 0.0 for r in recs)


def test_shared_nic_serializes():
    t = make_topology(["amd", "nvidia"], devices_per_node=8, nic_count=1)
    with pytest.warns(NicSharingWarning):
        recs, span = _concurrent_makespan(t, 8)
    assert span == pytest.approx(8 * recs[0].duration)


def test_crossover_host_bandwidth():
    size = 64 * MiB
    times = {}
    for host in (64, 16, 4, 1):
        t = make_topology(["amd", "nvidia"], devices_per_node=1, host_bw_gbps=host)
        times[host] = {p: transfer_time(t, 0, 1, size, p) for p in PATHS}
    direct = {h: v[TransferPath.DEVICE_DIRECT] for h, v in times.items()}
    fwd = [times[h][TransferPath.CPU_FORWARDING] for h in (64, 16, 4, 1)]
    assert len(set(direct.values())) == 1
    assert fwd == sorted(fwd) and fwd[-1] > 50 * direct[1]
