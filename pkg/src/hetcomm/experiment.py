"""Experiment specs, profile files and the runner behind the CLI.

An experiment spec is a YAML mapping::

    name: hetero-llama
    kind: pipeline          # p2p | collective | pipeline | partition_sweep | train
    topology: testbed.yaml  # relative to the spec file; "testbed" = built-in
    tp: 1
    pp: 2
    dp: 8
    path: device_direct
    chunk_size: 4194304
    chunks_in_flight: 2
    partition: auto         # or "15,17"
    repetitions: 3
    baseline: nvidia-homo.yaml
    profile: profile.yaml   # pipeline / partition_sweep only

Every number in the output is a simulated model value, not a hardware
measurement.
"""

from __future__ import annotations

import csv
import io
import os
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .adaptors import DeviceBuffer
from .collectives import COLLECTIVES, HeteroGroup
from .errors import SpecError
from .groups import parallel_groups
from .p2p import ChunkConfig, MiB, TransferPath, transfer_time
from .pipeline import (
    DEFAULT_ACTIVATION_BYTES,
    DEFAULT_MICROBATCHES,
    CommFn,
    PartitionPlan,
    StageProfile,
    StageSpec,
    constant_comm,
    optimize_partition,
    simulate_iteration,
    split_sweep,
    throughput,
    topology_comm,
)
from .topology import ClusterTopology, load_topology_file, reference_testbed
from .world import World

DATA = Path(__file__).parent / "data"
DEFAULT_SEED = 42
P2P_SIZES = [1 << k for k in range(20, 31)]  # 1 MiB .. 1 GiB


def default_seed() -> int:
    return int(os.environ.get("HETCOMM_SEED", DEFAULT_SEED))


def resolve_topology(ref: str | None, base: Path = Path(".")) -> ClusterTopology:
    if ref in (None, "testbed"):
        return reference_testbed()
    p = Path(ref)
    if not p.is_absolute():
        p = base / p
    if not p.exists() and (DATA / ref).exists():
        p = DATA / ref
    if not p.exists():
        raise SpecError(f"topology file {ref!r} not found")
    return load_topology_file(p)


def load_calibration(path: str | Path | None = None) -> dict:
    return yaml.safe_load(Path(path or DATA / "calibration.yaml").read_text())


@dataclass
class ProfileBundle:
    profile: StageProfile
    comm: CommFn
    layers: int | None = None
    ranks: list[int] | None = None


def _pick_ranks(topology: ClusterTopology, vendors: list[str]) -> list[int]:
    """Lowest unused rank of the right vendor for each stage."""
    used: set[int] = set()
    ranks = []
    for v in vendors:
        cands = [r for r in range(topology.world_size) if topology.vendor_of(r) == v and r not in used]
        if not cands:
            raise SpecError(f"topology has no free {v} device for a pipeline stage")
        used.add(cands[0])
        ranks.append(cands[0])
    return ranks


def load_profile(src: str | Path | dict, base: Path | None = None) -> ProfileBundle:
    """Stage profile plus comm model from a profile file (see README)."""
    if isinstance(src, dict):
        doc, base = src, base or Path(".")
    else:
        p = Path(src)
        if not p.exists() and (DATA / p).exists():
            p = DATA / p
        if not p.exists():
            raise SpecError(f"profile file {src!r} not found")
        doc, base = yaml.safe_load(p.read_text()), p.parent
    if not isinstance(doc, dict):
        raise SpecError("profile must be a mapping")
    calib = load_calibration(base / doc["calibration"] if "calibration" in doc else None)
    layers = doc.get("layers")
    if "stages" in doc:
        stages = tuple(
            StageSpec(
                s["vendor"],
                float(s["layer_time_fwd_ms"]),
                float(s["layer_time_bwd_ms"]),
                float(s.get("overhead_fwd_ms", 0.0)),
                float(s.get("overhead_bwd_ms", 0.0)),
            )
            for s in doc["stages"]
        )
    elif "model" in doc:
        model = calib["models"].get(doc["model"])
        if model is None:
            raise SpecError(f"unknown model {doc['model']!r} in calibration")
        layers = layers or model["layers"]
        stages = tuple(
            StageSpec(v, model["vendors"][v]["layer_time_fwd_ms"], model["vendors"][v]["layer_time_bwd_ms"])
            for v in doc["stage_vendors"]
        )
    else:
        raise SpecError("profile needs either 'stages' or 'model' + 'stage_vendors'")
    profile = StageProfile(
        stages,
        int(doc.get("activation_bytes", calib.get("activation_bytes", DEFAULT_ACTIVATION_BYTES))),
        int(doc.get("microbatches", calib.get("microbatches", DEFAULT_MICROBATCHES))),
        int(doc.get("gradient_bytes", 0)),
    )
    ranks = None
    if "topology" in doc:
        topo = resolve_topology(doc["topology"], base)
        ranks = _pick_ranks(topo, [s.vendor for s in stages])
        chunk = ChunkConfig(int(doc.get("chunk_size", 4 * MiB)), int(doc.get("chunks_in_flight", 2)))
        comm = topology_comm(topo, ranks, TransferPath.parse(doc.get("path", "device_direct")), chunk)
    else:
        comm = constant_comm(float(doc.get("comm_ms", 0.0)))
    return ProfileBundle(profile, comm, layers, ranks)


@dataclass
class ExperimentSpec:
    name: str
    kind: str
    topology: str | None = None
    tp: int = 1
    pp: int = 2
    dp: int = 1
    path: str = "device_direct"
    chunk_size: int = 4 * MiB
    chunks_in_flight: int = 2
    partition: str = "auto"
    repetitions: int = 1
    seed: int = field(default_factory=default_seed)
    baseline: str | None = None
    params: dict[str, Any] = field(default_factory=dict)
    base_dir: Path = Path(".")

    KINDS = ("p2p", "collective", "pipeline", "partition_sweep", "train")

    @classmethod
    def load(cls, path: str | Path) -> ExperimentSpec:
        p = Path(path)
        if not p.exists():
            raise SpecError(f"experiment spec {path!r} not found")
        try:
            doc = yaml.safe_load(p.read_text())
        except yaml.YAMLError as e:
            raise SpecError(f"malformed spec {path}: {e}") from e
        return cls.from_dict(doc, p.parent)

    @classmethod
    def from_dict(cls, doc: Any, base_dir: Path = Path(".")) -> ExperimentSpec:
        if not isinstance(doc, dict):
            raise SpecError("experiment spec must be a mapping")
        known = {f for f in cls.__dataclass_fields__ if f not in ("params", "base_dir")}
        missing = {"name", "kind"} - set(doc)
        if missing:
            raise SpecError(f"spec missing keys {sorted(missing)}")
        spec = cls(
            **{k: v for k, v in doc.items() if k in known},
            params={k: v for k, v in doc.items() if k not in known},
            base_dir=base_dir,
        )
        if spec.kind not in cls.KINDS:
            raise SpecError(f"unknown experiment kind {spec.kind!r}")
        if not isinstance(spec.repetitions, int) or spec.repetitions < 1:
            raise SpecError("repetitions must be an integer >= 1")
        if isinstance(spec.partition, list):
            spec.partition = ",".join(map(str, spec.partition))
        spec.partition = str(spec.partition)
        # fail early on dangling references
        if spec.kind in ("p2p", "collective", "train") or spec.topology is not None:
            spec.load_topology()
        if spec.kind in ("pipeline", "partition_sweep"):
            spec._profile_ref()
        return spec

    def load_topology(self) -> ClusterTopology:
        return resolve_topology(self.topology, self.base_dir)

    @property
    def chunk(self) -> ChunkConfig:
        return ChunkConfig(int(self.chunk_size), int(self.chunks_in_flight))

    def _profile_ref(self):
        ref = self.params.get("profile")
        if ref is None:
            raise SpecError(f"{self.kind} experiment needs a 'profile'")
        if isinstance(ref, dict):
            return ref
        p = self.base_dir / ref
        if not p.exists() and not (DATA / ref).exists():
            raise SpecError(f"profile file {ref!r} not found")
        return p if p.exists() else DATA / ref


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    csv: str
    metric: str
    values: list[float]
    baseline_mean: float | None = None

    @property
    def mean(self) -> float:
        return statistics.fmean(self.values)

    @property
    def ratio(self) -> float | None:
        return None if self.baseline_mean is None else self.mean / self.baseline_mean

    def summary(self) -> str:
        ratio = "" if self.ratio is None else repr(self.ratio)
        return f"name={self.spec.name},metric={self.metric},mean={self.mean!r},ratio_to_baseline={ratio}"


def _p2p(spec: ExperimentSpec) -> ExperimentResult:
    topo = spec.load_topology()
    src = int(spec.params.get("src", 0))
    vendor = topo.vendor_of(src)
    default_dst = next((r for r in range(topo.world_size) if topo.vendor_of(r) != vendor), None)
    dst = spec.params.get("dst", default_dst)
    if dst is None:
        raise SpecError("p2p bench needs a cross-vendor destination rank")
    sizes = [int(s) for s in spec.params.get("sizes", P2P_SIZES)]
    paths = [TransferPath.parse(p) for p in spec.params.get("paths", [p.value for p in TransferPath])]
    rows, direct = [], []
    for size in sizes:
        for path in paths:
            t = transfer_time(topo, src, int(dst), size, path, spec.chunk)
            rows.append((size, path.value, t, size / t / 1e3 if t > 0 else 0.0))
            if path is TransferPath.DEVICE_DIRECT:
                direct.append(t)
    text = _csv(("size_bytes", "path", "sim_time_us", "effective_gbps"), rows)
    values = direct or [r[2] for r in rows]
    return ExperimentResult(spec, text, "sim_time_us", values)


def _collective(spec: ExperimentSpec) -> ExperimentResult:
    topo = spec.load_topology()
    op = spec.params.get("op", "allreduce")
    if op not in COLLECTIVES:
        raise SpecError(f"unknown collective {op!r}")
    sizes = [int(s) for s in spec.params.get("sizes", [4096, 65536, 1 << 20])]
    members = spec.params.get("members", list(range(topo.world_size)))
    world = World(topo, path=spec.path, chunk=spec.chunk)
    group = HeteroGroup.build(world, members)
    rng = np.random.default_rng(spec.seed)
    rows, values = [], []
    for size in sizes:
        n = max(1, size // 4)
        n -= n % group.size if op == "reducescatter" and n >= group.size else 0
        for rep in range(spec.repetitions):
            world.reset_clocks()
            inputs = {r: DeviceBuffer.from_array(r, rng.standard_normal(n).astype(np.float32)) for r in group.members}
            if op == "broadcast":
                COLLECTIVES[op](world, group, group.members[0], inputs[group.members[0]])
            else:
                COLLECTIVES[op](world, group, inputs)
            t = world.clock.sync(group.members)
            rows.append((op, n * 4, rep, t))
            values.append(t)
    return ExperimentResult(spec, _csv(("op", "size_bytes", "repetition", "sim_time_us"), rows), "sim_time_us", values)


def _bundle(spec: ExperimentSpec) -> ProfileBundle:
    ref = spec._profile_ref()
    return load_profile(ref, spec.base_dir)


def _plan(spec: ExperimentSpec, bundle: ProfileBundle) -> PartitionPlan:
    if spec.partition == "auto":
        layers = int(spec.params.get("layers", bundle.layers or 0))
        return optimize_partition(layers, bundle.profile, bundle.comm)
    return PartitionPlan.parse(spec.partition)


def _pipeline(spec: ExperimentSpec) -> ExperimentResult:
    bundle = _bundle(spec)
    plan = _plan(spec, bundle)
    batch = float(spec.params.get("global_batch", bundle.profile.microbatches))
    gpus = bundle.profile.pp * spec.dp * spec.tp
    allreduce_ms = float(spec.params.get("allreduce_ms", 0.0))
    rows, values = [], []
    for rep in range(spec.repetitions):
        t, _ = simulate_iteration(plan, bundle.profile, bundle.comm)
        tput = throughput(plan, bundle.profile, bundle.comm, batch, spec.dp, allreduce_ms)
        rows.append((rep, str(plan), t, tput, tput / gpus))
        values.append(tput / gpus)
    header = ("repetition", "plan", "iteration_ms", "throughput_samples_s", "throughput_per_gpu")
    return ExperimentResult(spec, _csv(header, rows), "throughput_per_gpu", values)


def _partition_sweep(spec: ExperimentSpec) -> ExperimentResult:
    bundle = _bundle(spec)
    layers = int(spec.params.get("layers", bundle.layers or 0))
    best = optimize_partition(layers, bundle.profile, bundle.comm)
    sweep = split_sweep(layers, bundle.profile, bundle.comm)
    rows = [(str(p), t, int(p == best)) for p, t in sweep]
    return ExperimentResult(
        spec, _csv(("plan", "iteration_ms", "optimal"), rows), "iteration_ms", [t for _, t in sweep]
    )


def _train(spec: ExperimentSpec) -> ExperimentResult:
    from .trainer import ModelSpec, export_run, train

    topo = spec.load_topology()
    model = ModelSpec()
    plan = (
        PartitionPlan.parse(spec.partition)
        if spec.partition != "auto"
        else PartitionPlan(tuple(_even(model.num_layers, spec.pp)))
    )
    parallel_groups(topo, spec.tp, spec.pp, spec.dp)
    run = train(model, topo, plan, spec.path, int(spec.params.get("iters", 200)), spec.seed, spec.dp)
    return ExperimentResult(spec, export_run(run), "loss", run.loss_series[-1:])


def _even(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (i < extra) for i in range(parts)]


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


_RUNNERS = {
    "p2p": _p2p,
    "collective": _collective,
    "pipeline": _pipeline,
    "partition_sweep": _partition_sweep,
    "train": _train,
}


def run_experiment(spec: ExperimentSpec | str | Path) -> ExperimentResult:
    if not isinstance(spec, ExperimentSpec):
        spec = ExperimentSpec.load(spec)
    result = _RUNNERS[spec.kind](spec)
    if spec.baseline:
        base = spec.base_dir / spec.baseline
        if not base.exists():
            raise SpecError(f"baseline spec {spec.baseline!r} not found")
        result.baseline_mean = run_experiment(ExperimentSpec.load(base)).mean
    return result

