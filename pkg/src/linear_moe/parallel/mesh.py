"""Data-sequence hybrid parallelism: ``dp`` groups of ``sp`` ranks.

Each data-parallel group runs one packed batch with its sequence split over
its own :class:`RankGroup`; gradients are then averaged across groups with an
all-reduce. Pipeline and expert parallelism are accepted in the config only
at size 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..errors import ConfigError
from ..model import Model, PackedBatch, cross_entropy
from ..tensor import Tape, Tensor
from .collectives import CommRecord, RankGroup, all_reduce
from .sp import hybrid_sp_forward


@dataclass(frozen=True)
class ParallelConfig:
    dp: int = 1
    sp: int = 1
    tp: int = 1
    pp: int = 1
    ep: int = 1

    def __post_init__(self):
        for name in ("dp", "sp", "tp", "pp", "ep"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.pp != 1 or self.ep != 1:
            raise ConfigError("pipeline and expert parallelism are not simulated; set pp = ep = 1")

    @property
    def world_size(self) -> int:
        return self.dp * self.sp * self.tp


@dataclass(frozen=True)
class MeshResult:
    losses: tuple[float, ...]
    grads: dict[str, np.ndarray]
    sp_logs: tuple[tuple[CommRecord, ...], ...]
    dp_log: tuple[CommRecord, ...]

    @property
    def loss(self) -> float:
        return float(np.mean(self.losses))


def sp_loss(model: Model, packed: PackedBatch, sp: int, schedule="round_robin") -> tuple[Tensor, RankGroup]:
    group = RankGroup(sp, schedule=schedule)
    outs = hybrid_sp_forward(group, model, packed)
    logits = T.concat([logits for logits, _ in outs], axis=0)
    return cross_entropy(logits, packed.labels), group


def data_sequence_grads(model: Model, shards: list[PackedBatch], sp: int) -> MeshResult:
    """Per-shard SP backward, then gradient averaging over ``len(shards)`` data-parallel groups."""
    names = list(model.params)
    losses, flats, logs = [], [], []
    for shard in shards:
        leaves = {n: Tensor(p.data, requires_grad=True) for n, p in model.params.items()}
        with Tape() as tape:
            loss, group = sp_loss(model.with_params(leaves), shard, sp)
        tape.backward(loss)
        losses.append(loss.item())
        flats.append(np.concatenate([_grad(leaves[n]).reshape(-1) for n in names]))
        logs.append(tuple(group.comm_log))

    dp = len(shards)
    size = flats[0].size
    padded = -(-size // dp) * dp
    dp_group = RankGroup(dp)

    def body(ctx):
        g = Tensor(np.pad(flats[ctx.rank], (0, padded - size)))
        total = yield from all_reduce(ctx, g, "dp", "grad")
        return total.data[:size] / dp

    avg = dp_group.run(body)[0]
    grads, offset = {}, 0
    for n in names:
        shape = model.params[n].shape
        count = int(np.prod(shape, dtype=np.int64))
        grads[n] = avg[offset:offset + count].reshape(shape)
        offset += count
    return MeshResult(tuple(losses), grads, tuple(logs), tuple(dp_group.comm_log))


def _grad(t: Tensor) -> np.ndarray:
    return t.grad if t.grad is not None else np.zeros_like(t.data)
