"""Tiny deterministic MLP trained across simulated pipeline/data-parallel ranks.

Activations and gradients cross stage boundaries through
:func:`~hetcomm.p2p.p2p_dispatch` as raw float64 bytes, and data-parallel
gradients are summed with :func:`~hetcomm.collectives.hetero_allreduce`.
The single-process reference runs the same microbatched arithmetic with no
communication, so DP=1 runs must match it bit for bit.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adaptors import DeviceBuffer
from .collectives import HeteroGroup, hetero_allreduce
from .errors import DivergedError, InvalidPlan, IoError
from .groups import Grid, assign_backends, build_groups
from .p2p import TransferPath, p2p_dispatch
from .pipeline import PartitionPlan, one_f_one_b
from .topology import ClusterTopology
from .world import World


@dataclass(frozen=True)
class ModelSpec:
    widths: tuple[int, ...] = (8, 32, 32, 32, 4)
    samples: int = 256
    batch: int = 32
    microbatches: int = 4
    lr: float = 0.05

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1


Params = list[tuple[np.ndarray, np.ndarray]]


def init_params(spec: ModelSpec, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    return [
        (rng.standard_normal((i, o)) / np.sqrt(i), np.zeros(o))
        for i, o in zip(spec.widths[:-1], spec.widths[1:])
    ]


def make_task(spec: ModelSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed random linear map regression data."""
    rng = np.random.default_rng([seed, 1])
    x = rng.standard_normal((spec.samples, spec.widths[0]))
    a = rng.standard_normal((spec.widths[0], spec.widths[-1])) / np.sqrt(spec.widths[0])
    return x, x @ a


def batch_at(spec: ModelSpec, data, it: int):
    x, y = data
    per_epoch = spec.samples // spec.batch
    lo = (it % per_epoch) * spec.batch
    return x[lo : lo + spec.batch], y[lo : lo + spec.batch]


# -- per-layer math shared by the reference and the distributed stages -------


def forward_layers(params: Params, h: np.ndarray, first: int, last_layer: int):
    """Apply layers in order; ``last_layer`` is the global index of the model's final layer."""
    acts = [h]
    for i, (w, b) in enumerate(params):
        z = h @ w + b
        h = z if first + i == last_layer else np.tanh(z)
        acts.append(h)
    return acts


def backward_layers(params: Params, acts: list[np.ndarray], grad_out: np.ndarray, first: int, last_layer: int):
    """Gradients for every layer plus the gradient w.r.t. the stage input."""
    grads = [None] * len(params)
    g = grad_out
    for i in reversed(range(len(params))):
        w, _ = params[i]
        out = acts[i + 1]
        dz = g if first + i == last_layer else g * (1.0 - out * out)
        grads[i] = (acts[i].T @ dz, dz.sum(axis=0))
        g = dz @ w.T
    return grads, g


def loss_and_grad(pred: np.ndarray, y: np.ndarray, denom: int) -> tuple[float, np.ndarray]:
    diff = pred - y
    return float((diff * diff).sum() / denom), 2.0 * diff / denom


def _accumulate(acc, grads):
    if acc is None:
        return [(gw.copy(), gb.copy()) for gw, gb in grads]
    for (aw, ab), (gw, gb) in zip(acc, grads):
        aw += gw
        ab += gb
    return acc


def _sgd(params: Params, grads, lr: float) -> Params:
    return [(w - lr * gw, b - lr * gb) for (w, b), (gw, gb) in zip(params, grads)]


def reference_step(spec: ModelSpec, params: Params, x: np.ndarray, y: np.ndarray, microbatches: int | None = None):
    """Loss and summed gradients over ``microbatches`` equal slices, one process."""
    m = microbatches or spec.microbatches
    last = spec.num_layers - 1
    denom = len(x) * spec.widths[-1]
    mb = len(x) // m
    loss, acc = 0.0, None
    for k in range(m):
        xs, ys = x[k * mb : (k + 1) * mb], y[k * mb : (k + 1) * mb]
        acts = forward_layers(params, xs, 0, last)
        l, g = loss_and_grad(acts[-1], ys, denom)
        loss += l
        grads, _ = backward_layers(params, acts, g, 0, last)
        acc = _accumulate(acc, grads)
    return loss, acc


def full_loss(spec: ModelSpec, params: Params, x: np.ndarray, y: np.ndarray) -> float:
    pred = forward_layers(params, x, 0, spec.num_layers - 1)[-1]
    return loss_and_grad(pred, y, len(x) * spec.widths[-1])[0]


@dataclass
class TrainRun:
    config: dict
    iterations: int
    loss_series: list[float] = field(default_factory=list)
    seed: int = 42


def _check_loss(loss: float, it: int) -> None:
    if not np.isfinite(loss):
        raise DivergedError(f"loss became {loss} at iteration {it}")


def train_reference(spec: ModelSpec, iterations: int, seed: int = 42) -> TrainRun:
    params = init_params(spec, seed)
    data = make_task(spec, seed)
    run = TrainRun({"pp": 1, "dp": 1, "path": None, "partition": str(spec.num_layers)}, iterations, [], seed)
    for it in range(iterations):
        x, y = batch_at(spec, data, it)
        loss, grads = reference_step(spec, params, x, y)
        _check_loss(loss, it)
        run.loss_series.append(loss)
        params = _sgd(params, grads, spec.lr)
    return run


# -- distributed ----------------------------------------------------------------


def _to_buf(rank: int, arr: np.ndarray) -> DeviceBuffer:
    return DeviceBuffer.from_array(rank, np.ascontiguousarray(arr, dtype=np.float64))


def _flatten(grads) -> np.ndarray:
    return np.concatenate([a.ravel() for pair in grads for a in pair]) if grads else np.zeros(0)


def _unflatten(flat: np.ndarray, like) -> list:
    out, off = [], 0
    for gw, gb in like:
        w = flat[off : off + gw.size].reshape(gw.shape)
        off += gw.size
        b = flat[off : off + gb.size].reshape(gb.shape)
        off += gb.size
        out.append((w, b))
    return out


class PipelineTrainer:
    """Holds one parameter shard per rank and runs 1F1B steps across the world."""

    def __init__(
        self,
        spec: ModelSpec,
        topology: ClusterTopology,
        plan: PartitionPlan,
        path: TransferPath | str = TransferPath.DEVICE_DIRECT,
        dp: int | None = None,
        seed: int = 42,
        world: World | None = None,
    ):
        pp = plan.pp
        if plan.total_layers != spec.num_layers or min(plan.layers_per_stage) < 1:
            raise InvalidPlan(f"plan {plan} does not cover {spec.num_layers} layers")
        dp = dp or topology.world_size // pp
        self.spec, self.plan, self.seed = spec, plan, seed
        self.grid = Grid(1, pp, dp)
        _, self.dp_groups, self.pp_groups = assign_backends(build_groups(topology, 1, pp, dp), topology)
        self.world = world or World(topology, path=path)
        self.world.path = TransferPath.parse(path)
        if spec.batch % (dp * spec.microbatches):
            raise InvalidPlan(f"batch {spec.batch} not divisible by dp*microbatches = {dp * spec.microbatches}")
        full = init_params(spec, seed)
        self.bounds = np.cumsum((0,) + plan.layers_per_stage)
        self.params: dict[int, Params] = {}
        for p in range(pp):
            lo, hi = self.bounds[p], self.bounds[p + 1]
            for d in range(dp):
                self.params[self.grid.rank(0, d, p)] = [(w.copy(), b.copy()) for w, b in full[lo:hi]]

    @property
    def pp(self) -> int:
        return self.grid.pp

    @property
    def dp(self) -> int:
        return self.grid.dp

    def _replica(self, d: int, x: np.ndarray, y: np.ndarray):
        """One pipeline replica's 1F1B pass; returns (loss, grads per stage rank)."""
        pp, m = self.pp, self.spec.microbatches
        ranks = [self.grid.rank(0, d, p) for p in range(pp)]
        last_layer = self.spec.num_layers - 1
        denom = len(x) * self.spec.widths[-1]
        mbs = len(x) // m
        inbox: dict[tuple[str, int, int], np.ndarray] = {}
        acts: dict[tuple[int, int], list] = {}
        grads: dict[int, list] = {r: None for r in ranks}
        losses = [0.0] * m
        orders = [one_f_one_b(pp, m, s) for s in range(pp)]
        cursor = [0] * pp
        remaining = sum(map(len, orders))
        while remaining:
            progressed = False
            for s in range(pp):
                r = ranks[s]
                first = int(self.bounds[s])
                while cursor[s] < len(orders[s]):
                    phase, k = orders[s][cursor[s]]
                    if phase == "fwd":
                        if s == 0:
                            h = x[k * mbs : (k + 1) * mbs]
                        elif ("fwd", s, k) in inbox:
                            h = inbox.pop(("fwd", s, k))
                        else:
                            break
                        a = forward_layers(self.params[r], h, first, last_layer)
                        acts[(s, k)] = a
                        if s < pp - 1:
                            buf, _ = p2p_dispatch(self.world, r, ranks[s + 1], _to_buf(r, a[-1]))
                            inbox[("fwd", s + 1, k)] = buf.array().reshape(a[-1].shape)
                        else:
                            losses[k], g = loss_and_grad(a[-1], y[k * mbs : (k + 1) * mbs], denom)
                            inbox[("bwd", s, k)] = g
                    else:
                        if ("bwd", s, k) not in inbox:
                            break
                        g_out = inbox.pop(("bwd", s, k))
                        a = acts.pop((s, k))
                        gs, g_in = backward_layers(self.params[r], a, g_out, first, last_layer)
                        grads[r] = _accumulate(grads[r], gs)
                        if s > 0:
                            buf, _ = p2p_dispatch(self.world, r, ranks[s - 1], _to_buf(r, g_in))
                            inbox[("bwd", s - 1, k)] = buf.array().reshape(g_in.shape)
                    cursor[s] += 1
                    remaining -= 1
                    progressed = True
            if not progressed:
                raise RuntimeError("training schedule deadlocked")
        loss = 0.0
        for l in losses:
            loss += l
        return loss, grads

    def gradients(self, x: np.ndarray, y: np.ndarray):
        """Loss and DP-averaged gradients per rank, without updating parameters."""
        shard = len(x) // self.dp
        losses, grads = {}, {}
        for d in range(self.dp):
            xs, ys = x[d * shard : (d + 1) * shard], y[d * shard : (d + 1) * shard]
            loss, g = self._replica(d, xs, ys)
            losses[self.grid.rank(0, d, self.pp - 1)] = loss
            grads.update(g)
        if self.dp == 1:
            return next(iter(losses.values())), grads
        world = self.world
        for group in self.dp_groups:
            hg = HeteroGroup.build(world, group.members)
            summed = hetero_allreduce(world, hg, {r: _to_buf(r, _flatten(grads[r])) for r in group.members})
            for r in group.members:
                grads[r] = _unflatten(summed[r].array() / self.dp, grads[r])
        last = [self.grid.rank(0, d, self.pp - 1) for d in range(self.dp)]
        hg = HeteroGroup.build(world, last)
        total = hetero_allreduce(world, hg, {r: _to_buf(r, np.array([losses[r]])) for r in last})
        return float(total[last[0]].array()[0] / self.dp), grads

    def step(self, x: np.ndarray, y: np.ndarray) -> float:
        loss, grads = self.gradients(x, y)
        for r, g in grads.items():
            self.params[r] = _sgd(self.params[r], g, self.spec.lr)
        return loss

    def full_params(self, replica: int = 0) -> Params:
        out = []
        for p in range(self.pp):
            out.extend(self.params[self.grid.rank(0, replica, p)])
        return out


def train(
    spec: ModelSpec,
    topology: ClusterTopology,
    plan: PartitionPlan,
    path: TransferPath | str = TransferPath.DEVICE_DIRECT,
    iterations: int = 200,
    seed: int = 42,
    dp: int | None = None,
    world: World | None = None,
) -> TrainRun:
    trainer = PipelineTrainer(spec, topology, plan, path, dp, seed, world)
    data = make_task(spec, seed)
    run = TrainRun(
        {"pp": trainer.pp, "dp": trainer.dp, "path": TransferPath.parse(path).value, "partition": str(plan)},
        iterations,
        [],
        seed,
    )
    for it in range(iterations):
        x, y = batch_at(spec, data, it)
        loss = trainer.step(x, y)
        _check_loss(loss, it)
        run.loss_series.append(loss)
    run.trainer = trainer
    return run


def export_run(run: TrainRun, path: str | Path | None = None) -> str:
    """``iter,loss`` CSV (1-based iterations, round-trip float repr)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "loss"])
    for i, loss in enumerate(run.loss_series, start=1):
        w.writerow([i, repr(float(loss))])
    text = buf.getvalue()
    if path is not None:
        try:
            Path(path).write_text(text)
        except OSError as e:
            raise IoError(f"cannot write {path}: {e}") from e
    return text
