"""Tensor-parallel sharding of a token mixer, checked against the unsharded layer.

Rank ``i`` owns a contiguous block of heads: the matching columns of the
Q/K/V (and gate) projections and the matching rows of the output
projection. Each rank's partial output ``O_i W_O[i]`` is summed with an
all-reduce (reduce-scatter followed by all-gather).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..errors import ShapeError
from ..mixer import MixerWeights
from ..tensor import Tensor
from .collectives import RankGroup, all_reduce


@dataclass(frozen=True)
class TpReport:
    ranks: int
    max_abs_deviation: float
    allreduce_elements: int
    shard_outputs: tuple[np.ndarray, ...]  # per-rank head outputs before the output projection
    output: np.ndarray

    def as_dict(self) -> dict:
        return {"ranks": self.ranks, "max_abs_deviation": self.max_abs_deviation,
                "allreduce_elements": self.allreduce_elements}


def tp_forward(group: RankGroup, weights: MixerWeights, X: Tensor, chunk_size: int = 64) -> list[tuple[Tensor, Tensor]]:
    """Per-rank ``(shard head outputs, reunified output)`` for ``X`` of shape ``(N, hidden)``."""
    t = group.size
    if weights.num_heads % t:
        raise ShapeError(f"{weights.num_heads} heads cannot be split over {t} ranks")
    per = weights.num_heads // t
    x3 = T.reshape(X, (1,) + X.shape)

    def body(ctx):
        shard = weights.head_slice(ctx.rank * per, (ctx.rank + 1) * per)
        heads = shard.heads_output(x3, chunk_size)
        out = yield from all_reduce(ctx, heads @ shard.wo, "tp", "activation")
        return T.reshape(heads, heads.shape[1:]), T.reshape(out, out.shape[1:])

    return group.run(body)


def tp_shard_check(weights: MixerWeights, X: Tensor, ranks: int, chunk_size: int = 64) -> TpReport:
    """Sharded forward over ``ranks`` versus the unsharded mixer."""
    if X.shape[1] % ranks:
        raise ShapeError(f"hidden {X.shape[1]} is not divisible by {ranks} ranks")
    full = weights(T.reshape(X, (1,) + X.shape), chunk_size).data[0]
    group = RankGroup(ranks)
    results = tp_forward(group, weights, X, chunk_size)
    deviation = max(float(np.max(np.abs(out.data - full))) for _, out in results)
    return TpReport(ranks, deviation, sum(r.elements for r in group.comm_log),
                    tuple(h.data for h, _ in results), full)
