from __future__ import annotations

import csv
import io
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetcomm.errors import ChannelClosed
from hetcomm.topology import LinkKind, LinkSpec
from hetcomm.transport import (
    CSV_COLUMNS,
    SimClock,
    Transport,
    chunk_schedule,
    pipelined_time,
    wire_time,
)

GiB = 1 << 30
NIC = LinkSpec(LinkKind.NIC_NETWORK, 100.0, 5.0)


def test_wire_time_examples():
    # 5 us + 2^30 B / 100 GB/s
    assert wire_time(NIC, GiB) == pytest.approx(10742.418240, abs=1e-6)
    assert wire_time(NIC, 0) == 5.0
    nvl = LinkSpec(LinkKind.INTRA_NODE_FABRIC, 900.0, 1.0)
    assert wire_time(nvl, GiB) == pytest.approx(1194.0465, abs=1e-3)


def test_pipelined_time_examples():
    assert pipelined_time([2, 5, 2], 10) == 54
    assert pipelined_time([2, 5, 2], 1) == 9
    assert pipelined_time([3, 3, 3, 3], 7) == 3 * (4 + 7 - 1)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-3, 1e4), st.floats(0, 100), st.integers(0, 1 << 32), st.integers(1, 1 << 20))
def test_wire_time_strictly_increasing(bw, lat, size, delta):
    link = LinkSpec(LinkKind.NIC_NETWORK, bw, lat)
    assert wire_time(link, size) >= lat
    assert wire_time(link, size + delta) > wire_time(link, size)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1e3), min_size=1, max_size=6), st.integers(1, 50))
def test_pipelined_time_properties(stages, n):
    assert pipelined_time(stages, 1) == pytest.approx(sum(stages))
    assert pipelined_time(stages, n + 1) >= pipelined_time(stages, n)


def _flow_shop_oracle(times, n):
    """Unbounded-buffer flow shop: finish[i][s] = max(finish[i-1][s], finish[i][s-1]) + t."""
    finish = [[0.0] * len(times) for _ in range(n)]
    for i in range(n):
        for s, t in enumerate(times):
            ready = max(finish[i - 1][s] if i else 0.0, finish[i][s - 1] if s else 0.0)
            finish[i][s] = ready + t
    return finish[-1][-1]


@pytest.mark.parametrize("seed", range(20))
def test_chunk_schedule_matches_closed_form(seed):
    rng = random.Random(seed)
    stages = [rng.uniform(0.1, 10) for _ in range(3)]
    n = rng.randint(1, 40)
    for k in (2, 3, None):
        sched = chunk_schedule([stages] * n, k)
        assert sched[-1][-1][1] == pytest.approx(pipelined_time(stages, n), rel=1e-12)
    assert _flow_shop_oracle(stages, n) == pytest.approx(pipelined_time(stages, n), rel=1e-12)


def test_single_slot_serializes_neighbours():
    # with one slot, chunk i+1 cannot start copy-out until chunk i left the wire
    sched = chunk_schedule([[1.0, 1.0, 1.0]] * 3, in_flight=1)
    assert sched[1][0][0] == sched[0][1][1]
    assert sched[-1][-1][1] > pipelined_time([1.0, 1.0, 1.0], 3)


def test_channel_integrity_1000_payloads():
    t = Transport()
    rng = random.Random(7)
    for i in range(1000):
        payload = rng.randbytes(rng.randint(0, 1 << 20))
        t.channel_send(i % 4, (i + 1) % 4, payload)
        assert t.recv((i + 1) % 4, i % 4) == payload


def test_channel_fifo_and_close():
    t = Transport()
    t.channel_send(0, 1, b"first")
    t.channel_send(0, 1, b"second")
    assert [t.recv(1, 0), t.recv(1, 0)] == [b"first", b"second"]
    t.close(0, 1)
    with pytest.raises(ChannelClosed):
        t.channel_send(0, 1, b"late")
    with pytest.raises(ChannelClosed):
        t.recv(1, 0)


def test_recv_timeout():
    with pytest.raises(TimeoutError):
        Transport().recv(1, 0, timeout=0.01)


def test_clock_never_moves_backwards():
    c = SimClock()
    c.advance_to(0, 5.0)
    c.advance_to(0, 3.0)
    assert c.now(0) == 5.0
    assert c.sync([0, 1]) == 5.0


def test_trace_csv_schema_and_order():
    t = Transport()
    t.clock.advance_to(2, 10.0)
    t.channel_send(2, 3, b"x" * 100, NIC, path="ccl")
    t.channel_send(0, 1, b"y" * 10, NIC)
    text = t.trace.to_csv()
    rows = list(csv.reader(io.StringIO(text)))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert text.splitlines()[0] == "t_start_us,t_end_us,src,dst,path,size_bytes,segment_kind"
    starts = [float(r[0]) for r in rows[1:]]
    assert starts == sorted(starts)
    assert rows[1][2:] == ["0", "1", "host", "10", "nic_network"]
    assert float(rows[2][1]) == pytest.approx(10.0 + wire_time(NIC, 100))
