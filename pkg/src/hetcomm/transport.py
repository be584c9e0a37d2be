"""In-process byte channels between ranks plus the simulated-time cost model.

Real bytes move through :class:`Transport` channels; simulated durations are
computed separately from link specs and logged as :class:`TransferRecord`
entries in a global :class:`Trace`.  Nothing here looks at wall-clock time.
"""

from __future__ import annotations

import csv
import io
import itertools
import threading
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import ChannelClosed
from .topology import GB, LinkSpec

CSV_COLUMNS = ("t_start_us", "t_end_us", "src", "dst", "path", "size_bytes", "segment_kind")


def wire_time(link: LinkSpec, size_bytes: int) -> float:
    """Latency plus serialization time, in microseconds."""
    return link.latency + size_bytes / (link.bandwidth * GB) * 1e6


def copy_time(bandwidth_gbps: float, size_bytes: int) -> float:
    return size_bytes / (bandwidth_gbps * GB) * 1e6


def pipelined_time(stage_times: Sequence[float], num_chunks: int) -> float:
    """Fill + drain time of ``num_chunks`` identical chunks through the stages."""
    if num_chunks < 1:
        raise ValueError("num_chunks must be >= 1")
    if any(s < 0 for s in stage_times):
        raise ValueError("stage times must be >= 0")
    if not stage_times:
        return 0.0
    return sum(stage_times) + (num_chunks - 1) * max(stage_times)


def chunk_schedule(
    chunk_stage_times: Sequence[Sequence[float]],
    in_flight: int | None = None,
    start: float = 0.0,
) -> list[list[tuple[float, float]]]:
    """Start/end of every (chunk, stage) in a chunked copy/wire pipeline.

    Each stage is one resource handling chunks in order.  With ``in_flight``
    set, chunk ``i`` may enter stage ``s`` only once chunk ``i - in_flight``
    has left stage ``s + 1``: a staging slot is held from the moment a chunk
    is written into it until the next hop has drained it.
    """
    out: list[list[tuple[float, float]]] = []
    for i, stages in enumerate(chunk_stage_times):
        row = []
        for s, dur in enumerate(stages):
            t = start
            if s > 0:
                t = max(t, row[s - 1][1])
            if i > 0:
                t = max(t, out[i - 1][s][1])
            if in_flight is not None and i >= in_flight and s + 1 < len(stages):
                t = max(t, out[i - in_flight][s + 1][1])
            row.append((t, t + dur))
        out.append(row)
    return out


@dataclass(frozen=True)
class Segment:
    kind: str
    duration: float
    t_start: float
    t_end: float


_seq = itertools.count()


@dataclass
class TransferRecord:
    src_rank: int
    dst_rank: int
    path: str
    size_bytes: int
    t_start: float
    t_end: float
    segments: list[Segment] = field(default_factory=list)
    seq: int = field(default_factory=lambda: next(_seq))

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    def count(self, kind: str) -> int:
        return sum(1 for s in self.segments if s.kind == kind)

    def rows(self) -> list[tuple]:
        segs = self.segments or [Segment("", self.duration, self.t_start, self.t_end)]
        return [
            (s.t_start, s.t_end, self.src_rank, self.dst_rank, self.path, self.size_bytes, s.kind)
            for s in segs
        ]


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def rows_to_csv(rows: Iterable[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


class Trace:
    """Append-only transfer log, ordered by ``(t_start, src_rank, seq)``."""

    def __init__(self):
        self._records: list[TransferRecord] = []
        self._lock = threading.Lock()

    def append(self, record: TransferRecord) -> None:
        with self._lock:
            self._records.append(record)

    def __len__(self):
        return len(self._records)

    def records(self) -> list[TransferRecord]:
        with self._lock:
            return sorted(self._records, key=lambda r: (r.t_start, r.src_rank, r.seq))

    def to_csv(self) -> str:
        return rows_to_csv(row for r in self.records() for row in r.rows())


class SimClock:
    """Per-rank simulated time in microseconds; never moves backwards."""

    def __init__(self):
        self._now: dict[int, float] = defaultdict(float)

    def now(self, rank: int) -> float:
        return self._now[rank]

    def advance_to(self, rank: int, t: float) -> None:
        if t > self._now[rank]:
            self._now[rank] = t

    def sync(self, ranks: Iterable[int]) -> float:
        """Rendezvous point: return the latest clock among ``ranks``."""
        return max((self._now[r] for r in ranks), default=0.0)

    def reset(self) -> None:
        self._now.clear()


class Transport:
    """FIFO byte channels keyed by ``(src, dst)``.

    Any rank may write to a destination; only the destination reads.  The
    class is thread-safe so it can back one-thread-per-rank harnesses.
    """

    def __init__(self):
        self._queues: dict[tuple[int, int], deque[bytes]] = defaultdict(deque)
        self._closed: set[tuple[int, int]] = set()
        self._cond = threading.Condition()
        self.trace = Trace()
        self.clock = SimClock()

    def close(self, src: int, dst: int) -> None:
        with self._cond:
            self._closed.add((src, dst))
            self._cond.notify_all()

    def is_closed(self, src: int, dst: int) -> bool:
        return (src, dst) in self._closed

    def deliver(self, src: int, dst: int, payload: bytes) -> None:
        with self._cond:
            if (src, dst) in self._closed:
                raise ChannelClosed(f"channel {src}->{dst} is closed")
            self._queues[(src, dst)].append(bytes(payload))
            self._cond.notify_all()

    def recv(self, dst: int, src: int, timeout: float | None = None) -> bytes:
        with self._cond:
            q = self._queues[(src, dst)]
            ok = self._cond.wait_for(lambda: q or (src, dst) in self._closed, timeout)
            if not ok:
                raise TimeoutError(f"no message on {src}->{dst}")
            if not q:
                raise ChannelClosed(f"channel {src}->{dst} is closed")
            return q.popleft()

    def pending(self, src: int, dst: int) -> int:
        with self._cond:
            return len(self._queues[(src, dst)])

    def channel_send(
        self, src: int, dst: int, payload: bytes, link: LinkSpec | None = None, path: str = "host"
    ) -> TransferRecord:
        """Deliver ``payload`` to ``dst`` and log it; ``link`` prices the wire time."""
        self.deliver(src, dst, payload)
        t0 = self.clock.sync((src, dst))
        dur = wire_time(link, len(payload)) if link is not None else 0.0
        kind = link.kind.value if link is not None else path
        rec = TransferRecord(src, dst, path, len(payload), t0, t0 + dur, [Segment(kind, dur, t0, t0 + dur)])
        self.clock.advance_to(src, rec.t_end)
        self.clock.advance_to(dst, rec.t_end)
        self.trace.append(rec)
        return rec
