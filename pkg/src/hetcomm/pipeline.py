"""1F1B pipeline iteration simulator and uneven layer-partition search.

Times in this module are milliseconds.  Stage ``s`` runs its compute ops in
1F1B order: ``min(pp - s, microbatches)`` forwards, then alternating
backward/forward, then the remaining backwards.  Activations and gradients
travel on one FIFO lane per direction between neighbouring stages, so
communication overlaps compute but not other transfers on the same lane.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .errors import Infeasible, InvalidPlan
from .topology import ClusterTopology, VendorId, device_of_rank
from .transport import rows_to_csv

CommFn = Callable[[int, int, int], float]

SCHEDULES = ("1F1B",)

# hidden 4096 x seq 4096 x microbatch 1 at 2 bytes per element
DEFAULT_ACTIVATION_BYTES = 4096 * 4096 * 2
DEFAULT_MICROBATCHES = 8


def zero_comm(src: int, dst: int, nbytes: int) -> float:
    return 0.0


def constant_comm(ms: float) -> CommFn:
    def comm(src, dst, nbytes):
        return ms

    return comm


@dataclass(frozen=True)
class StageSpec:
    vendor: VendorId
    layer_time_fwd: float
    layer_time_bwd: float
    overhead_fwd: float = 0.0
    overhead_bwd: float = 0.0


@dataclass(frozen=True)
class StageProfile:
    stages: tuple[StageSpec, ...]
    activation_bytes: int = DEFAULT_ACTIVATION_BYTES
    microbatches: int = DEFAULT_MICROBATCHES
    gradient_bytes: int = 0

    def __post_init__(self):
        if not self.stages:
            raise InvalidPlan("profile needs at least one stage")
        for s in self.stages:
            if s.layer_time_fwd <= 0 or s.layer_time_bwd <= 0:
                raise InvalidPlan("layer times must be > 0")
            if s.overhead_fwd < 0 or s.overhead_bwd < 0:
                raise InvalidPlan("stage overheads must be >= 0")
        if self.microbatches < 1:
            raise InvalidPlan("microbatches must be >= 1")

    @property
    def pp(self) -> int:
        return len(self.stages)

    def with_microbatches(self, m: int) -> StageProfile:
        return StageProfile(self.stages, self.activation_bytes, m, self.gradient_bytes)


@dataclass(frozen=True)
class PartitionPlan:
    layers_per_stage: tuple[int, ...]

    @property
    def total_layers(self) -> int:
        return sum(self.layers_per_stage)

    @property
    def pp(self) -> int:
        return len(self.layers_per_stage)

    @classmethod
    def parse(cls, text: str) -> PartitionPlan:
        try:
            return cls(tuple(int(x) for x in text.split(",")))
        except ValueError:
            raise InvalidPlan(f"cannot parse plan {text!r}") from None

    def __str__(self):
        return "-".join(map(str, self.layers_per_stage))


@dataclass(frozen=True)
class ScheduleEvent:
    stage: int
    microbatch: int
    phase: str  # fwd | bwd | send | recv
    t_start: float
    t_end: float
    peer: int | None = None
    size_bytes: int = 0


@dataclass
class ScheduleTrace:
    events: list[ScheduleEvent] = field(default_factory=list)

    def __len__(self):
        return len(self.events)

    @property
    def end(self) -> float:
        return max((e.t_end for e in self.events), default=0.0)

    def of(self, stage: int, phase: str | None = None) -> list[ScheduleEvent]:
        return [e for e in self.events if e.stage == stage and (phase is None or e.phase == phase)]

    def rows(self, offset_ms: float = 0.0):
        for e in sorted(self.events, key=lambda e: (e.t_start, e.stage, e.phase != "send")):
            if e.phase in ("fwd", "bwd"):
                src = dst = e.stage
                path = "compute"
            elif e.phase == "send":
                src, dst, path = e.stage, e.peer, "p2p"
            else:
                src, dst, path = e.peer, e.stage, "p2p"
            yield ((e.t_start + offset_ms) * 1e3, (e.t_end + offset_ms) * 1e3, src, dst, path, e.size_bytes, e.phase)

    def to_csv(self) -> str:
        return rows_to_csv(self.rows())


def expected_event_count(pp: int, microbatches: int) -> int:
    """Compute events plus a send and a recv per activation and per gradient."""
    return 2 * pp * microbatches + 4 * (pp - 1) * microbatches


def one_f_one_b(pp: int, microbatches: int, stage: int) -> list[tuple[str, int]]:
    """Compute-op order of ``stage`` as ``(phase, microbatch)`` pairs."""
    warmup = min(pp - stage, microbatches)
    ops = [("fwd", i) for i in range(warmup)]
    f = warmup
    for b in range(microbatches):
        ops.append(("bwd", b))
        if f < microbatches:
            ops.append(("fwd", f))
            f += 1
    return ops


def stage_times(plan: PartitionPlan, profile: StageProfile) -> list[tuple[float, float]]:
    return [
        (n * s.layer_time_fwd + s.overhead_fwd, n * s.layer_time_bwd + s.overhead_bwd)
        for n, s in zip(plan.layers_per_stage, profile.stages)
    ]


def validate_plan(plan: PartitionPlan, profile: StageProfile, total_layers: int | None = None) -> None:
    if plan.pp != profile.pp:
        raise InvalidPlan(f"plan has {plan.pp} stages, profile has {profile.pp}")
    if any(n < 1 for n in plan.layers_per_stage):
        raise InvalidPlan(f"every stage needs >= 1 layer: {plan}")
    if total_layers is not None and plan.total_layers != total_layers:
        raise InvalidPlan(f"plan covers {plan.total_layers} layers, expected {total_layers}")


def simulate_iteration(
    plan: PartitionPlan,
    profile: StageProfile,
    comm: CommFn | None = None,
    schedule: str = "1F1B",
) -> tuple[float, ScheduleTrace]:
    """Run one training iteration through the event simulator."""
    if schedule not in SCHEDULES:
        raise InvalidPlan(f"unknown schedule {schedule!r}")
    validate_plan(plan, profile)
    comm = comm or zero_comm
    pp, m = profile.pp, profile.microbatches
    if m < pp:
        warnings.warn(f"{m} microbatches for {pp} stages leaves the pipeline mostly idle", stacklevel=2)
    times = stage_times(plan, profile)
    nbytes = profile.activation_bytes
    fwd_cost = [comm(s, s + 1, nbytes) for s in range(pp - 1)]
    bwd_cost = [comm(s + 1, s, nbytes) for s in range(pp - 1)]

    orders = [one_f_one_b(pp, m, s) for s in range(pp)]
    cursor = [0] * pp
    stage_free = [0.0] * pp
    lane_free: dict[tuple[int, int], float] = {}
    arrived: dict[tuple[str, int, int], float] = {}  # (phase, stage, mb) -> input ready
    trace = ScheduleTrace()

    def send(phase: str, src: int, dst: int, mb: int, ready: float, cost: float) -> None:
        start = max(ready, lane_free.get((src, dst), 0.0))
        end = start + cost
        lane_free[(src, dst)] = end
        arrived[(phase, dst, mb)] = end
        trace.events.append(ScheduleEvent(src, mb, "send", start, end, dst, nbytes))
        trace.events.append(ScheduleEvent(dst, mb, "recv", start, end, src, nbytes))

    remaining = sum(len(o) for o in orders)
    while remaining:
        progressed = False
        for s in range(pp):
            while cursor[s] < len(orders[s]):
                phase, mb = orders[s][cursor[s]]
                needs_input = (phase == "fwd" and s > 0) or (phase == "bwd" and s < pp - 1)
                if needs_input and (phase, s, mb) not in arrived:
                    break
                ready = arrived.get((phase, s, mb), 0.0)
                start = max(stage_free[s], ready)
                end = start + times[s][0 if phase == "fwd" else 1]
                stage_free[s] = end
                trace.events.append(ScheduleEvent(s, mb, phase, start, end))
                if phase == "fwd" and s < pp - 1:
                    send("fwd", s, s + 1, mb, end, fwd_cost[s])
                elif phase == "bwd" and s > 0:
                    send("bwd", s, s - 1, mb, end, bwd_cost[s - 1])
                cursor[s] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            raise RuntimeError("pipeline schedule deadlocked")
    return trace.end, trace


def check_trace(trace: ScheduleTrace, pp: int, microbatches: int) -> None:
    """Raise ``AssertionError`` if ``trace`` breaks ordering or overlap rules."""
    by_stage: dict[int, list[ScheduleEvent]] = {}
    lanes: dict[tuple[int, int], list[ScheduleEvent]] = {}
    sends: dict[tuple[int, int, int], ScheduleEvent] = {}
    for e in trace.events:
        assert e.t_end >= e.t_start, e
        if e.phase in ("fwd", "bwd"):
            by_stage.setdefault(e.stage, []).append(e)
        elif e.phase == "send":
            lanes.setdefault((e.stage, e.peer), []).append(e)
            sends[(e.stage, e.peer, e.microbatch)] = e
    for evs in list(by_stage.values()) + list(lanes.values()):
        evs = sorted(evs, key=lambda e: e.t_start)
        for a, b in zip(evs, evs[1:]):
            assert b.t_start >= a.t_end, f"overlap {a} / {b}"
    compute = {(e.stage, e.phase, e.microbatch): e for es in by_stage.values() for e in es}
    assert len(compute) == 2 * pp * microbatches
    for e in trace.events:
        if e.phase == "recv":
            s = sends.get((e.peer, e.stage, e.microbatch))
            assert s is not None and s.t_start <= e.t_start, f"unmatched recv {e}"
    for (s, phase, mb), e in compute.items():
        if phase == "fwd" and s > 0:
            assert e.t_start >= sends[(s - 1, s, mb)].t_end
        if phase == "bwd":
            assert e.t_start >= compute[(s, "fwd", mb)].t_end
            if s < pp - 1:
                assert e.t_start >= sends[(s + 1, s, mb)].t_end


def _compositions(total: int, parts: int):
    for cuts in itertools.combinations(range(1, total), parts - 1):
        edges = (0, *cuts, total)
        yield tuple(edges[i + 1] - edges[i] for i in range(parts))


def _spread(split: Sequence[int]) -> tuple:
    mean = sum(split) / len(split)
    return (max(split) - min(split), sum((x - mean) ** 2 for x in split), tuple(split))


def _pick(scored: list[tuple[float, tuple[int, ...]]]) -> tuple[int, ...]:
    """Fastest split; near-equal times go to the most even one."""
    best = min(t for t, _ in scored)
    tol = 1e-12 * abs(best)
    return min((split for t, split in scored if t <= best + tol), key=_spread)


def optimize_partition(
    total_layers: int,
    profile: StageProfile,
    comm: CommFn | None = None,
    schedule: str = "1F1B",
    max_enumeration: int = 100_000,
) -> PartitionPlan:
    """Layer split minimizing simulated iteration time.

    Every composition is tried when there are at most ``max_enumeration`` of
    them (always the case for two stages); otherwise a hill climb moving one
    layer at a time starts from the most even split.
    """
    pp = profile.pp
    if total_layers < pp:
        raise Infeasible(f"{total_layers} layers cannot fill {pp} stages")

    def cost(split):
        return simulate_iteration(PartitionPlan(split), profile, comm, schedule)[0]

    if math.comb(total_layers - 1, pp - 1) <= max_enumeration:
        return PartitionPlan(_pick([(cost(s), s) for s in _compositions(total_layers, pp)]))

    base, extra = divmod(total_layers, pp)
    current = tuple(base + (i < extra) for i in range(pp))
    current_t = cost(current)
    while True:
        moves = []
        for i, j in itertools.permutations(range(pp), 2):
            if current[i] > 1:
                cand = list(current)
                cand[i] -= 1
                cand[j] += 1
                moves.append((cost(tuple(cand)), tuple(cand)))
        t, cand = min(moves, key=lambda x: (x[0], _spread(x[1])))
        if t >= current_t:
            return PartitionPlan(current)
        current, current_t = cand, t


def throughput(
    plan: PartitionPlan,
    profile: StageProfile,
    comm: CommFn | None,
    global_batch: float,
    dp: int = 1,
    allreduce_ms: float = 0.0,
) -> float:
    """Samples per second across ``dp`` pipeline replicas.

    ``global_batch`` counts the samples one replica consumes per iteration;
    ``allreduce_ms`` is the per-iteration gradient allreduce cost.
    """
    t, _ = simulate_iteration(plan, profile, comm)
    return global_batch * dp / ((t + allreduce_ms) / 1e3)


def split_sweep(total_layers: int, profile: StageProfile, comm: CommFn | None = None):
    """``(plan, iteration_ms)`` for every two-or-more-stage composition."""
    return [
        (PartitionPlan(s), simulate_iteration(PartitionPlan(s), profile, comm)[0])
        for s in _compositions(total_layers, profile.pp)
    ]


def simulate_iterations(
    n: int, plan: PartitionPlan, profile: StageProfile, comm: CommFn | None = None
) -> tuple[list[float], list[ScheduleTrace]]:
    """Back-to-back iterations, each starting after the previous flush."""
    times, traces = [], []
    for _ in range(n):
        t, trace = simulate_iteration(plan, profile, comm)
        times.append(t)
        traces.append(trace)
    return times, traces


# -- building profiles and comm models from a topology ------------------------


def stage_ranks(topology: ClusterTopology, pp: int, replica: int = 0, tp: int = 1) -> list[int]:
    """Ranks of one pipeline replica under the tp-fastest/dp/pp grid."""
    dp = topology.world_size // (tp * pp)
    return [replica * tp + tp * dp * p for p in range(pp)]


def profile_from_topology(
    topology: ClusterTopology,
    ranks: Sequence[int],
    activation_bytes: int = DEFAULT_ACTIVATION_BYTES,
    microbatches: int = DEFAULT_MICROBATCHES,
    gradient_bytes: int = 0,
) -> StageProfile:
    stages = []
    for r in ranks:
        d = device_of_rank(topology, r)
        stages.append(StageSpec(d.vendor, d.layer_time_fwd, d.layer_time_bwd))
    return StageProfile(tuple(stages), activation_bytes, microbatches, gradient_bytes)


def topology_comm(topology: ClusterTopology, ranks: Sequence[int], path="device_direct", chunk=None) -> CommFn:
    """Stage-to-stage cost from the p2p timing model (CCL for same-vendor pairs)."""
    from .p2p import CCL_PATH, transfer_time

    cache: dict[tuple[int, int, int], float] = {}

    def comm(src, dst, nbytes):
        key = (src, dst, nbytes)
        if key not in cache:
            a, b = ranks[src], ranks[dst]
            same = topology.vendor_of(a) == topology.vendor_of(b)
            cache[key] = transfer_time(topology, a, b, nbytes, CCL_PATH if same else path, chunk) / 1e3
        return cache[key]

    return comm
