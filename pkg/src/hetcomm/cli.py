"""Command-line front end.

Exit codes:

    0  success
    2  usage error (bad flags)
    3  topology ParseError / ValidationError
    4  SpecError
    5  GridMismatch / HeterogeneityNotSupported
    6  InvalidPlan / Infeasible
    7  DivergedError
    8  IoError
    9  any other library error
"""

from __future__ import annotations

import os
import sys
from dataclasses import replace
from pathlib import Path

import click

from . import errors
from .collectives import COLLECTIVES
from .experiment import (
    P2P_SIZES,
    ExperimentSpec,
    default_seed,
    load_profile,
    resolve_topology,
    run_experiment,
)
from .groups import Backend, parallel_groups
from .p2p import MiB, TransferPath
from .pipeline import PartitionPlan, optimize_partition, simulate_iteration
from .topology import load_topology_file, make_topology

EXIT_CODES: list[tuple[type[Exception], int]] = [
    (errors.ParseError, 3),
    (errors.ValidationError, 3),
    (errors.SpecError, 4),
    (errors.GridMismatch, 5),
    (errors.HeterogeneityNotSupported, 5),
    (errors.InvalidPlan, 6),
    (errors.Infeasible, 6),
    (errors.DivergedError, 7),
    (errors.IoError, 8),
    (errors.HetCommError, 9),
]


def exit_code_for(exc: BaseException) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1


def _emit(text: str, out: str | None) -> None:
    if out is None:
        click.echo(text, nl=False)
        return
    try:
        Path(out).write_text(text)
    except OSError as e:
        raise errors.IoError(f"cannot write {out}: {e}") from e


def _sizes(raw: str | None, default: list[int]) -> list[int]:
    if not raw:
        return default
    try:
        return [int(s) for s in raw.split(",")]
    except ValueError:
        raise click.BadParameter(f"sizes must be comma-separated integers, got {raw!r}") from None


class _Group(click.Group):
    """Maps library errors onto documented exit codes."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except errors.HetCommError as e:
            click.echo(f"error: {type(e).__name__}: {e}", err=True)
            ctx.exit(exit_code_for(e))


@click.group(cls=_Group)
@click.option("--coordinator", default=None, help="Bootstrap coordinator address (default $HETCOMM_COORD).")
def main(coordinator: str | None) -> None:
    """Simulated heterogeneous-cluster communication and pipeline tools."""
    if coordinator:
        os.environ["HETCOMM_COORD"] = coordinator


# ---------------------------------------------------------------- topo


@main.group()
def topo() -> None:
    """Topology files."""


@topo.command("validate")
@click.argument("file", type=click.Path(dir_okay=False))
@click.option("--tp", type=int, default=None)
@click.option("--pp", type=int, default=None)
@click.option("--dp", type=int, default=None)
def topo_validate(file: str, tp: int | None, pp: int | None, dp: int | None) -> None:
    """Parse FILE and, with --tp/--pp/--dp, check the parallel grid."""
    topology = resolve_topology(file) if file == "testbed" else _load_file(file)
    click.echo(f"world_size={topology.world_size}")
    for node in topology.node_ids:
        click.echo(
            f"node={node} vendor={topology.node_vendor(node)} devices={len(topology.devices_on(node))} "
            f"nics={topology.nic_count(node)}"
        )
    if tp is None and pp is None and dp is None:
        return
    tp, pp = tp or 1, pp or 1
    dp = dp or topology.world_size // (tp * pp)
    groups = parallel_groups(topology, tp, pp, dp)
    for gs in groups:
        for g in gs:
            click.echo(f"{g.kind.value} {','.join(map(str, g.members))} {g.backend.value}")
    hetero = sum(g.backend is Backend.HETERO for gs in groups for g in gs)
    click.echo(f"groups tp={len(groups[0])} dp={len(groups[1])} pp={len(groups[2])} hetero={hetero}")


def _load_file(file: str):
    if not Path(file).exists():
        raise errors.SpecError(f"topology file {file!r} not found")
    return load_topology_file(file)


# ---------------------------------------------------------------- bench

_path_choice = click.Choice(["cpu", "direct", "cpu_forwarding", "device_direct", "both"])


@main.group()
def bench() -> None:
    """Simulated communication benchmarks (CSV on stdout or --out)."""


@bench.command("p2p")
@click.option("--topology", default="testbed", show_default=True)
@click.option("--src", type=int, default=0, show_default=True)
@click.option("--dst", type=int, default=None, help="Default: first rank of another vendor.")
@click.option("--sizes", default=None, help="Comma-separated byte sizes (default 1 MiB .. 1 GiB).")
@click.option("--path", type=_path_choice, default="both", show_default=True)
@click.option("--chunk-size", type=int, default=4 * MiB, show_default=True)
@click.option("--in-flight", type=int, default=2, show_default=True)
@click.option("--out", default=None)
def bench_p2p(topology, src, dst, sizes, path, chunk_size, in_flight, out) -> None:
    params = {"src": src, "sizes": _sizes(sizes, P2P_SIZES)}
    if dst is not None:
        params["dst"] = dst
    if path != "both":
        params["paths"] = [TransferPath.parse(path).value]
    spec = ExperimentSpec.from_dict(
        {"name": "bench-p2p", "kind": "p2p", "topology": topology, "chunk_size": chunk_size,
         "chunks_in_flight": in_flight, **params}
    )
    _emit(run_experiment(spec).csv, out)


@bench.command("collective")
@click.option("--topology", default="testbed", show_default=True)
@click.option("--op", type=click.Choice(sorted(COLLECTIVES)), default="allreduce", show_default=True)
@click.option("--sizes", default=None, help="Comma-separated byte sizes.")
@click.option("--members", default=None, help="Comma-separated ranks (default: all).")
@click.option("--path", type=click.Choice(["cpu", "direct"]), default="direct", show_default=True)
@click.option("--repetitions", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", default=None)
def bench_collective(topology, op, sizes, members, path, repetitions, seed, out) -> None:
    doc = {
        "name": "bench-collective",
        "kind": "collective",
        "topology": topology,
        "op": op,
        "path": path,
        "repetitions": repetitions,
        "seed": default_seed() if seed is None else seed,
    }
    if sizes:
        doc["sizes"] = _sizes(sizes, [])
    if members:
        doc["members"] = _sizes(members, [])
    _emit(run_experiment(ExperimentSpec.from_dict(doc)).csv, out)


# ---------------------------------------------------------------- simulate / sweep


@main.group()
def simulate() -> None:
    """Pipeline schedule simulation."""


@simulate.command("pipeline")
@click.option("--plan", default="auto", show_default=True, help='Layers per stage, e.g. "15,17", or "auto".')
@click.option("--profile", "profile_file", required=True, type=click.Path(dir_okay=False))
@click.option("--microbatches", type=int, default=None)
@click.option("--layers", type=int, default=None, help="Total layers when --plan auto.")
@click.option("--trace", default=None, help="Write the event trace CSV here.")
def simulate_pipeline(plan, profile_file, microbatches, layers, trace) -> None:
    bundle = load_profile(profile_file)
    profile = bundle.profile
    if microbatches is not None:
        profile = replace(profile, microbatches=microbatches)
    if plan == "auto":
        total = layers or bundle.layers
        if not total:
            raise errors.SpecError("--plan auto needs --layers or a profile with a model")
        chosen = optimize_partition(total, profile, bundle.comm)
    else:
        chosen = PartitionPlan.parse(plan)
    t, events = simulate_iteration(chosen, profile, bundle.comm)
    click.echo(f"plan={chosen} iteration_time_ms={t!r}")
    if trace:
        _emit(events.to_csv(), trace)


@main.group()
def sweep() -> None:
    """Parameter sweeps."""


@sweep.command("partition")
@click.option("--profile", "profile_file", required=True, type=click.Path(dir_okay=False))
@click.option("--layers", type=int, default=None)
@click.option("--out", default=None)
def sweep_partition(profile_file, layers, out) -> None:
    doc = {"name": "sweep-partition", "kind": "partition_sweep", "profile": str(Path(profile_file).resolve())}
    if layers:
        doc["layers"] = layers
    _emit(run_experiment(ExperimentSpec.from_dict(doc)).csv, out)


# ---------------------------------------------------------------- train


@main.group()
def train() -> None:
    """Desk-scale training runs."""


@train.command("toy")
@click.option("--pp", type=int, default=2, show_default=True)
@click.option("--dp", type=int, default=1, show_default=True)
@click.option("--path", type=click.Choice(["cpu", "direct"]), default="direct", show_default=True)
@click.option("--iters", type=int, default=200, show_default=True)
@click.option("--seed", type=int, default=None, help="Default $HETCOMM_SEED or 42.")
@click.option("--layout", type=click.Choice(["hetero", "homo"]), default="hetero", show_default=True)
@click.option("--plan", default=None, help="Layers per stage (default: even split).")
@click.option("--out", default=None)
def train_toy(pp, dp, path, iters, seed, layout, plan, out) -> None:
    """Train the toy MLP with one node per pipeline stage and DP ranks per node."""
    from .trainer import ModelSpec, export_run
    from .trainer import train as run_train

    model = ModelSpec()
    vendors = [("amd", "nvidia")[i % 2] if layout == "hetero" else "nvidia" for i in range(pp)]
    topology = make_topology(vendors, devices_per_node=dp)
    if plan is None:
        base, extra = divmod(model.num_layers, pp)
        chosen = PartitionPlan(tuple(base + (i < extra) for i in range(pp)))
    else:
        chosen = PartitionPlan.parse(plan)
    run = run_train(model, topology, chosen, path, iters, default_seed() if seed is None else seed, dp)
    text = export_run(run, out)
    if out is None:
        click.echo(text, nl=False)
    else:
        first, last = run.loss_series[:1], run.loss_series[-1:]
        click.echo(f"iterations={iters} first_loss={first[0]!r} last_loss={last[0]!r}" if first else "iterations=0")


# ---------------------------------------------------------------- run


@main.command("run")
@click.argument("spec_file", type=click.Path(dir_okay=False))
@click.option("--out", default=None, help="Write the result CSV here (summary still goes to stdout).")
def run_cmd(spec_file, out) -> None:
    """Run an experiment spec; prints the CSV then a summary line."""
    result = run_experiment(ExperimentSpec.load(spec_file))
    if out:
        _emit(result.csv, out)
    else:
        click.echo(result.csv, nl=False)
    click.echo(result.summary())


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
